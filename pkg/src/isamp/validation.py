"""Oracle suite behind ``isamp validate``.

Each check compares a closed form used by the estimators against an
independent computation (adaptive numerical integration, exact polynomial
moments, Monte Carlo) and returns a :class:`Check`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import betaln, digamma, polygamma

from . import weight_model as wm
from .core import linear_regression_target, normal_linear_target
from .outcome_model import NormalLinearWorkingModel, cond_expect, gauss_hermite


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


# ---------------------------------------------------------------------------
# Beta-prime moments by numerical integration
# ---------------------------------------------------------------------------


def beta_prime_moment(a, b, k=1, shift=0.0):
    """``E (shift + O)^k`` for ``O ~ Beta'(a, b)`` by adaptive quadrature over ``t = log O``.

    The log-odds density is ``exp(a t - (a + b) log(1 + e^t)) / B(a, b)``;
    the integrand is formed in log space and the range is split around the
    mode so that concentrated laws are resolved.
    """
    lb = betaln(a, b)
    mu = digamma(a) - digamma(b)
    sd = np.sqrt(polygamma(1, a) + polygamma(1, b))

    def f(t):
        lg = np.logaddexp(np.log(shift), t) if shift > 0 else t
        return np.exp(a * t - (a + b) * np.logaddexp(0.0, t) - lb + k * lg)

    cuts = mu + sd * np.array([-8.0, -3.0, -1.0, 0.0, 1.0, 3.0, 8.0])
    opts = dict(epsabs=0, epsrel=1e-13, limit=500)
    total = integrate.quad(f, -np.inf, cuts[0], **opts)[0]
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        total += integrate.quad(f, lo, hi, **opts)[0]
    total += integrate.quad(f, cuts[-1], np.inf, **opts)[0]
    return total


def population_law(m, phi, swap=False):
    """Beta' parameters of ``O = W - 1`` when ``1/W ~ Beta(m phi, (1 - m) phi)``.

    ``1/W = U`` gives ``O = (1 - U)/U ~ Beta'((1 - m) phi, m phi)``.  ``swap``
    injects the reversed Beta order (used to show the oracle catches it).
    """
    if swap:
        return m * phi, (1 - m) * phi
    return (1 - m) * phi, m * phi


def sampled_law(m, phi):
    """Beta' parameters of the sampled odds (population law tilted by ``1/w``)."""
    return (1 - m) * phi, m * phi + 1


def moment_oracle(m, phi, swap=False):
    """Numerical ``E(W)``, ``E_s(W)``, ``E(W^2)``, ``E_s(W^2)`` for one ``(m, phi)``."""
    ap, bp = population_law(m, phi, swap)
    as_, bs = sampled_law(m, phi)
    out = {"E(W)": 1.0 + beta_prime_moment(ap, bp),
           "E_s(W)": 1.0 + beta_prime_moment(as_, bs)}
    if bp > 2:
        out["E(W^2)"] = beta_prime_moment(ap, bp, 2, 1.0)
    if bs > 2:
        out["E_s(W^2)"] = beta_prime_moment(as_, bs, 2, 1.0)
    return out


def random_admissible(k=200, seed=0, min_mphi=1.05):
    """``k`` random ``(m, phi)`` with ``m phi > min_mphi``."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < k:
        m = rng.uniform(0.01, 0.99)
        phi = np.exp(rng.uniform(np.log(2.0), np.log(2000.0)))
        if m * phi > min_mphi:
            out.append((m, phi))
    return out


def check_moment_identities(k=200, seed=0, swap=False, rtol=1e-8) -> Check:
    worst = 0.0
    for m, phi in random_admissible(k, seed):
        model = wm.BetaWeightModel(np.array([np.log(m / (1 - m))]), phi, terms="")
        x, y = np.zeros((1, 1)), np.zeros(1)
        num = moment_oracle(m, phi, swap)
        e_pop = float(model.expected_weight(x, y)[0])
        e_s = float(model.expected_weight_sampled(x, y)[0])
        err = max(abs(e_pop / num["E(W)"] - 1), abs(e_s / num["E_s(W)"] - 1))
        worst = err if not np.isfinite(err) else max(worst, err)
    return Check("moment identities E(W|x,y), E_s(W|x,y)", worst <= rtol,
                 f"max relative error {worst:.2e} over {k} draws")


def check_mixture_moments(seed=1, rtol=1e-8) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        H = 3
        ms = rng.uniform(0.05, 0.6, H)
        phis = np.exp(rng.uniform(np.log(20), np.log(500), H))
        alpha = rng.normal(0, 1, (H - 1, 2))
        comps = tuple(wm.BetaWeightModel(np.array([np.log(m / (1 - m))]), p, "") for m, p in zip(ms, phis))
        model = wm.MixtureWeightModel(alpha, comps, "y")
        x, y = np.zeros((1, 1)), rng.normal(size=1)
        p = model.proportions(x, y)[0]
        e_pop = sum(p[h] * moment_oracle(ms[h], phis[h])["E(W)"] for h in range(H))
        # sampled mixture: component posterior given delta = 1 is proportional to p_h m_h
        post = p * ms / np.sum(p * ms)
        e_s = sum(post[h] * moment_oracle(ms[h], phis[h])["E_s(W)"] for h in range(H))
        worst = max(worst, abs(model.expected_weight(x, y)[0] / e_pop - 1),
                    abs(model.expected_weight_sampled(x, y)[0] / e_s - 1))
    return Check("mixture moments", worst <= rtol, f"max relative error {worst:.2e}")


def check_length_bias(k=50, seed=2, rtol=1e-6) -> Check:
    """``E_s(W) E(W) = E_s(W^2)`` (sampling with probability ``1/w``)."""
    worst = 0.0
    for m, phi in random_admissible(k, seed, min_mphi=1.5):
        num = moment_oracle(m, phi)
        err = abs(num["E_s(W)"] * num["E(W)"] / num["E_s(W^2)"] - 1)
        worst = err if not np.isfinite(err) else max(worst, err)
    return Check("length-bias identity E_s(W)E(W) = E_s(W^2)", worst <= rtol,
                 f"max relative error {worst:.2e}")


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------


def normal_moment(k, mu, s2):
    """Raw moment ``E Y^k`` of ``N(mu, s2)`` via the binomial expansion."""
    from math import comb

    sd = np.sqrt(s2)
    total = 0.0
    for j in range(0, k + 1, 2):
        dfact = float(np.prod(np.arange(j - 1, 0, -2, dtype=float))) if j else 1.0
        total += comb(k, j) * mu ** (k - j) * sd**j * dfact
    return total


def check_quadrature_exactness(Q=20, rtol=1e-10) -> Check:
    wmod = NormalLinearWorkingModel(np.array([0.3, 0.5]), 0.7)
    x = np.array([[0.4]])
    mu = 0.3 + 0.5 * 0.4
    worst = 0.0
    for k in range(2 * Q):
        got = cond_expect(lambda X, y: y**k, x, wmod, gauss_hermite(Q))[0]
        ref = normal_moment(k, mu, 0.7)
        worst = max(worst, abs(got - ref) / max(abs(ref), 1e-300))
    return Check(f"Gauss-Hermite exactness (Q={Q}, degree <= {2 * Q - 1})", worst <= rtol,
                 f"max relative error {worst:.2e}")


def scenario_models():
    """True weight models of S1, S2, S4 and a fitted analysis model for S3."""
    from .simulation import ScenarioSpec, draw_sample, fit_weight_model, generate_population, rng_for

    s1 = wm.BetaWeightModel(np.array([-3.2, 0.0, 0.0]), 2500.0, "xy")
    s2 = wm.BetaWeightModel(np.array([-3.4, 0.3, 0.5]), 2500.0, "xy")
    spec = ScenarioSpec("S3", 25000, seed=0)
    s3, _ = fit_weight_model(spec, draw_sample(generate_population(spec), rng_for(0, 0, 1)))
    comps = tuple(wm.BetaWeightModel(np.array([np.log(m / (1 - m))]), p, "")
                  for m, p in zip((0.01, 0.02, 0.2), (30000.0, 10000.0, 5000.0)))
    s4 = wm.MixtureWeightModel(np.array([[12.0, -8.0], [10.0, -4.0]]), comps, "y")
    return {"S1": s1, "S2": s2, "S3": s3, "S4": s4}


def check_quadrature_convergence(Q=20, tol=1e-6, scenarios=("S1", "S2", "S3", "S4")):
    """``E{E(W | x, Y) Y | x}`` at ``Q`` vs ``2Q`` nodes, ``Y | x ~ N(x, 1)``.

    One check per scenario weight model, on a grid of ``x`` covering the
    covariate law; the difference is absolute, relative to ``max(|value|, 1)``.
    """
    xs = np.linspace(-2.0, 2.0, 41)[:, None]
    work = NormalLinearWorkingModel(np.array([0.0, 1.0]), 1.0)
    models = scenario_models()
    out = []
    for sid in scenarios:
        model = models[sid]

        def h(X, y, model=model):
            return y / model.pi_bar(X, y, clamp=True)

        a = cond_expect(h, xs, work, gauss_hermite(Q))
        b = cond_expect(h, xs, work, gauss_hermite(2 * Q))
        err = np.abs(a - b) / np.maximum(np.abs(b), 1.0)
        i = int(np.argmax(err))
        out.append(Check(f"quadrature convergence {sid} Q={Q} vs {2 * Q}", bool(err[i] <= tol),
                         f"max relative difference {err[i]:.2e} at x={xs[i, 0]:+.1f}"))
    return out


# ---------------------------------------------------------------------------
# Score unbiasedness (smoke scale)
# ---------------------------------------------------------------------------


def check_score_unbiasedness(n_pop=100_000, seed=5, Q=20) -> Check:
    """Mean of each efficient score at the truth is within 3 MC SEs of zero (S2 law)."""
    from .estimators import efficient_components, efficient_score
    from .simulation import ScenarioSpec, draw_sample, generate_population, rng_for

    spec = ScenarioSpec("S2", n_pop, seed=seed)
    data = draw_sample(generate_population(spec), rng_for(seed, 0, 1))
    wmod = wm.BetaWeightModel(np.array([-3.4, 0.3, 0.5]), 2500.0, "xy")
    work = NormalLinearWorkingModel(np.array([0.0, 1.0]), 1.0)
    rule = gauss_hermite(Q)
    worst = 0.0
    for target, theta in ((linear_regression_target(1), np.array([0.0, 1.0])),
                          (normal_linear_target(1), np.array([0.0, 1.0, 1.0]))):
        for variant in ("n_unknown", "setting2", "setting1"):
            d = {"n_unknown": data.as_setting2(False), "setting2": data.as_setting2(True),
                 "setting1": data}[variant]
            comp = efficient_components(d, target, variant, wmod, work, rule)
            c = efficient_score(comp, d).contributions(theta)
            z = population_z(c.values, c.counts, n_pop)
            worst = max(worst, float(np.max(np.abs(z))))
    return Check("efficient-score unbiasedness (S2, 6 variants)", worst <= 3.0,
                 f"max |mean / SE| = {worst:.2f}")


def population_z(values, counts, N):
    """z-statistics of the per-unit mean score over ``N`` population units."""
    tot = counts @ values
    sq = counts @ values**2
    mean = tot / N
    var = sq / N - mean**2
    return mean / np.sqrt(var / N)


def run_all(Q=20, swap_beta_order=False, quick=False):
    checks = [
        check_moment_identities(k=50 if quick else 200, swap=swap_beta_order),
        check_mixture_moments(),
        check_length_bias(k=20 if quick else 50),
        check_quadrature_exactness(Q),
        *check_quadrature_convergence(Q),
        check_score_unbiasedness(n_pop=20_000 if quick else 100_000, Q=Q),
    ]
    return checks
