"""Acceptance criteria 1-10.

Criteria 1-4 read 1000-replication studies (seed 1) from the Monte Carlo
cache (``ISAMP_MC_CACHE``, default ``.mc_cache``); missing replications are
computed and appended.  Criterion 10 needs the user-supplied workplace survey
CSV named by ``ISAMP_WES_CSV``.
"""

import functools
import json
import math
import os

import numpy as np
import pytest
from conftest import MC_CACHE, record_criterion
from scipy import integrate, optimize, stats
from scipy.special import expit

from isamp import cli
from isamp import estimators as est
from isamp import validation
from isamp import weight_model as wm
from isamp.core import (OutcomeDensityTarget, SurveyData, linear_regression_target, mean_target,
                        normal_linear_target)
from isamp.outcome_model import DiscreteWorkingModel, NormalLinearWorkingModel
from isamp.simulation import (ROSTER, ScenarioSpec, draw_sample, generate_population, rng_for,
                              run_study)

REPS = 1000
EFF = ("eff-reg-00", "eff-reg-10", "eff-reg-11", "eff-out-00", "eff-out-10", "eff-out-11")
REFERENCE_COVERAGE = {
    ("S1", 5000): (0.933, 0.939, 0.930, 0.934, 0.940, 0.934),
    ("S1", 25000): (0.956, 0.959, 0.964, 0.954, 0.961, 0.954),
    ("S2", 5000): (0.928, 0.919, 0.944, 0.959, 0.957, 0.955),
    ("S2", 25000): (0.939, 0.941, 0.942, 0.957, 0.952, 0.937),
    ("S3", 5000): (0.942, 0.942, 0.945, 0.948, 0.943, 0.949),
    ("S3", 25000): (0.949, 0.951, 0.953, 0.955, 0.953, 0.938),
    ("S4", 10000): (0.931, 0.933, 0.939, 0.944, 0.946, 0.929),
    ("S4", 50000): (0.938, 0.935, 0.941, 0.954, 0.951, 0.948),
}
S2_MODEL = wm.BetaWeightModel(np.array([-3.4, 0.3, 0.5]), 2500.0, "xy")
S1_MODEL = wm.BetaWeightModel(np.array([-3.2, 0.0, 0.0]), 2500.0, "xy")
TRUE_WORK = NormalLinearWorkingModel(np.array([0.0, 1.0]), 1.0)


@functools.lru_cache(maxsize=None)
def study(sid, N):
    return run_study(ScenarioSpec(sid, N, seed=1), REPS, ROSTER, 20,
                     threads=os.cpu_count() or 1, cache_dir=MC_CACHE)


def variants_of(data):
    return (("n_unknown", data.as_setting2(False)), ("setting2", data.as_setting2(True)),
            ("setting1", data))


# ---------------------------------------------------------------------------
# 1-4: Monte Carlo study
# ---------------------------------------------------------------------------


def test_criterion_1_reference_coverage():
    misses, worst = [], 0.0
    for (sid, N), ref in REFERENCE_COVERAGE.items():
        s = study(sid, N)
        for e, target in zip(EFF, ref):
            cov = s.get(e, "b")["coverage"]
            diff = abs(cov - target)
            worst = max(worst, diff)
            if diff > 0.025:
                misses.append(f"{sid}/{N} {e} {cov:.3f} vs {target:.3f}")
    detail = f"max |coverage - reference| = {worst:.3f} over 48 cells"
    if misses:
        detail += "; outside 0.025: " + ", ".join(misses)
    record_criterion(1, not misses, detail)
    assert not misses, detail


def test_criterion_2_s3_robustness():
    s = study("S3", 25000)
    bias = {e: s.get(e, "b")["bias"] for e in EFF + ("ht",)}
    worst = max(abs(v) for v in bias.values())
    cml = s.get("cml", "b")
    z = cml["bias"] / (cml["sd"] / math.sqrt(cml["reps"]))
    ok = worst <= 0.02 and abs(z) >= 3
    detail = f"max |bias b| (eff, HT) = {worst:.4f}; CML bias {cml['bias']:+.4f} = {z:+.1f} MC SE"
    record_criterion(2, ok, detail)
    assert ok, detail


def test_criterion_3_s2_efficiency_ordering():
    s = study("S2", 25000)
    var = {e: s.get(e, "b")["sd"] ** 2 for e in EFF + ("ht",)}
    bad, parts = [], []
    for kind in ("reg", "out"):
        chain = [f"eff-{kind}-11", f"eff-{kind}-10", f"eff-{kind}-00", "ht"]
        parts.append(" <= ".join(f"{var[e]:.3e}" for e in chain))
        for lo, hi in zip(chain[:-1], chain[1:]):
            if var[lo] > 1.05 * var[hi]:
                bad.append(f"{lo} > {hi}")
    detail = f"var(b): reg {parts[0]}; out {parts[1]}" + (f"; violated: {bad}" if bad else "")
    record_criterion(3, not bad, detail)
    assert not bad, detail


def test_criterion_4_s1_equivalence():
    ratios = {}
    for N in (5000, 25000):
        s = study("S1", N)
        sds = [s.get(e, "b")["sd"] for e in ROSTER]
        ratios[N] = max(sds) / min(sds)
    ok = all(r <= 1.10 for r in ratios.values())
    detail = ", ".join(f"S1/{N} max/min SD(b) = {r:.3f}" for N, r in ratios.items())
    record_criterion(4, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 5: closed-form weight moments against numerical integration
# ---------------------------------------------------------------------------


def test_criterion_5_moment_oracle():
    single = validation.check_moment_identities(k=200, seed=0)
    mixture = validation.check_mixture_moments()
    worst_stated = worst_tilt = 0.0
    for m, phi in validation.random_admissible(50, seed=2, min_mphi=1.5):
        num = validation.moment_oracle(m, phi)
        if "E(W^2)" not in num:
            continue
        stated = num["E_s(W)"] * num["E(W)"] / num["E(W^2)"] - 1
        tilt = num["E_s(W)"] * num["E(W)"] / num["E_s(W^2)"] - 1
        worst_stated = max(worst_stated, abs(stated))
        worst_tilt = max(worst_tilt, abs(tilt))
    ok = single.passed and mixture.passed and worst_stated <= 1e-6
    detail = (f"single {single.detail}; mixture {mixture.detail}; "
              f"E_s(W)E(W) = E(W^2) max rel error {worst_stated:.2e} (tolerance 1e-6); "
              f"tilted form E_s(W)E(W) = E_s(W^2) max rel error {worst_tilt:.2e}")
    record_criterion(5, ok, detail)
    assert single.passed and mixture.passed, detail
    assert worst_tilt <= 1e-6, detail
    assert worst_stated <= 1e-6, detail


# ---------------------------------------------------------------------------
# 6: unbiasedness of every efficient score
# ---------------------------------------------------------------------------


def _max_z(data, wmod, variants_targets, truth):
    out = {}
    for target, name in variants_targets:
        for variant, d in variants_of(data) if name != "ni" else (("non_informative", data),):
            comp = est.efficient_components(d, target, variant, wmod, TRUE_WORK)
            c = est.efficient_score(comp, d).contributions(truth[target.kind])
            z = validation.population_z(c.values, c.counts, d.N if d.N else data.N)
            out[f"{target.kind}-{variant}"] = float(np.max(np.abs(z)))
    return out


def test_criterion_6_score_unbiasedness():
    N = 100_000
    truth = {"ee": np.array([0.0]), "reg": np.array([0.0, 1.0]), "out": np.array([0.0, 1.0, 1.0])}
    targets = [(mean_target(), ""), (linear_regression_target(), ""), (normal_linear_target(), "")]
    d2 = draw_sample(generate_population(ScenarioSpec("S2", N, seed=61)), rng_for(61, 0, 1))
    z = _max_z(d2, S2_MODEL, targets, truth)
    d1 = draw_sample(generate_population(ScenarioSpec("S1", N, seed=62)), rng_for(62, 0, 1))
    z.update(_max_z(d1, S1_MODEL, [(t, "ni") for t, _ in targets], truth))

    rng = np.random.default_rng(63)
    comp = est.efficient_components(d2, normal_linear_target(), "setting1", S2_MODEL)
    worst_q = 0.0
    for _ in range(50):
        x = np.array([[rng.uniform(-2, 2)]])
        th = np.array([rng.normal(0, 0.3), rng.normal(1, 0.3), rng.uniform(0.5, 2.0)])
        mu, sd = th[0] + th[1] * x[0, 0], math.sqrt(th[2])
        for j in range(3):
            f = lambda y: comp.D(th, x, np.array([y]))[0, j] * stats.norm.pdf(y, mu, sd)
            val = integrate.quad(f, mu - 12 * sd, mu + 12 * sd, epsabs=1e-13, limit=200)[0]
            worst_q = max(worst_q, abs(val))
    worst_z = max(z.values())
    ok = worst_z <= 3 and worst_q <= 1e-8
    detail = (f"max |mean/SE| = {worst_z:.2f} over {len(z)} variants "
              f"({max(z, key=z.get)}); max |E(D|x;theta)| (out, setting 1) = {worst_q:.1e}")
    record_criterion(6, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 7: EM monotonicity and the one-component collapse
# ---------------------------------------------------------------------------


def test_criterion_7_em_monotone():
    rng = np.random.default_rng(71)
    worst_drop, fails = 0.0, []
    for k in range(100):
        N = int(rng.integers(8000, 30001))
        seed = int(rng.integers(2**31))
        d = draw_sample(generate_population(ScenarioSpec("S4", N, seed=seed)), rng_for(seed, 0, 1))
        _, diag = wm.em_fit_mixture(d.w, d.X, d.y, H=3, seed=k)
        drops = -np.diff(diag.loglik_trace)
        worst_drop = max(worst_drop, float(drops.max(initial=0.0)))
        if np.any(drops > 1e-10):
            fails.append(k)
    collapse = 0.0
    for seed in range(5):
        d = draw_sample(generate_population(ScenarioSpec("S2", 5000, seed=seed)), rng_for(seed, 0, 1))
        mix, _ = wm.em_fit_mixture(d.w, d.X, d.y, H=1, comp_terms="xy")
        ref, _ = wm.fit_single(d.w, d.X, d.y, terms="xy")
        c = mix.components[0]
        collapse = max(collapse, float(np.max(np.abs(c.beta - ref.beta))),
                       abs(math.log(c.phi) - math.log(ref.phi)))
    ok = not fails and collapse <= 1e-8
    detail = (f"largest log-likelihood decrease {worst_drop:.1e} over 100 datasets"
              f"{' (failing: ' + str(fails) + ')' if fails else ''}; "
              f"H=1 vs single fit max parameter difference {collapse:.1e}")
    record_criterion(7, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 8: sandwich against the inverse score outer product
# ---------------------------------------------------------------------------


def test_criterion_8_sandwich_validity():
    R = 100
    names = {"reg": ["a", "b"], "out": ["a", "b", "sigma2"]}
    acc = {}
    for rep in range(R):
        spec = ScenarioSpec("S2", 25000, seed=81)
        data = draw_sample(generate_population(spec, rep), rng_for(81, rep, 1))
        for kind, target in (("reg", linear_regression_target()), ("out", normal_linear_target())):
            for variant, d in variants_of(data):
                comp = est.efficient_components(d, target, variant, S2_MODEL, TRUE_WORK)
                sf = est.efficient_score(comp, d)
                th, diag = est.solve_estimating_equation(
                    sf, est.estimate_ht(d, target).theta_hat, scale=sf.n_eff)
                c = sf.contributions(th)
                B = np.einsum("k,ki,kj->ij", c.counts, c.values, c.values)
                V = est.sandwich_variance(sf, th)
                key = (kind, variant)
                sv, sb = acc.get(key, (0.0, 0.0))
                acc[key] = (sv + V / R, sb + B / R)
    worst, where = 0.0, ""
    for (kind, variant), (V, B) in acc.items():
        ratio = np.diag(V) / np.diag(np.linalg.inv(B))
        j = int(np.argmax(np.abs(ratio - 1)))
        if abs(ratio[j] - 1) > worst:
            worst, where = abs(ratio[j] - 1), f"{kind}/{variant}/{names[kind][j]}"
    ok = worst <= 0.10
    detail = (f"mean sandwich vs inverse of mean score outer product over {R} S2/25000 "
              f"samples: max relative difference {worst:.3f} ({where})")
    record_criterion(8, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 9: discrete toy by exact enumeration
# ---------------------------------------------------------------------------

SUPPORT = (-1.0, 0.0, 1.0)
WVALS = (2.0, 4.0)
THETA_C = (0.2, 0.5)


def toy_pmf(th, x):
    e = [math.exp((th[0] + th[1] * x) * s) for s in SUPPORT]
    t = sum(e)
    return [v / t for v in e]


def toy_q(x, y):
    return 1.0 / (1.0 + math.exp(-(-0.5 + 0.8 * y + 0.3 * x)))


def toy_pw(x, y):
    q = toy_q(x, y)
    return {2.0: 1.0 - q, 4.0: q}


def _np_pmf(th, X):
    eta = (th[0] + th[1] * X[:, 0])[:, None] * np.array(SUPPORT)[None, :]
    p = np.exp(eta - eta.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


def _toy_outcome_target():
    sup = np.array(SUPPORT)

    def law(th, X, rule):
        p = _np_pmf(th, X)
        return np.broadcast_to(sup, p.shape), p

    def score(y, X, th):
        mean = _np_pmf(th, X) @ sup
        x = X[:, 0]
        if y.ndim == 2:
            mean, x = mean[:, None], x[:, None]
        r = y - mean
        return np.stack([r, r * np.broadcast_to(x, r.shape)], axis=-1)

    def logf(y, X, th):
        p = _np_pmf(th, X)
        idx = np.searchsorted(sup, y)
        return np.log(np.take_along_axis(p, idx.reshape(p.shape[0], -1), 1)).reshape(y.shape)

    return OutcomeDensityTarget(logf, score, law, 2, ["t0", "t1"])


def _toy_models():
    work = DiscreteWorkingModel(np.array(SUPPORT), lambda X: _np_pmf(THETA_C, X))

    def probs(X, y):
        x = X[:, 0] if y.ndim == 1 else X[:, :1]
        q = expit(-0.5 + 0.8 * y + 0.3 * x)
        return np.stack([1 - q, q], axis=-1)

    return work, wm.DiscreteWeightModel(np.array(WVALS), probs)


def _toy_data():
    rng = np.random.default_rng(91)
    N = 3000
    x = (rng.random(N) < 0.4).astype(float)
    y = np.array([rng.choice(SUPPORT, p=toy_pmf(THETA_C, xi)) for xi in x])
    w = np.where(rng.random(N) < [toy_q(a, b) for a, b in zip(x, y)], 4.0, 2.0)
    d = rng.random(N) < 1 / w
    return SurveyData(x[d][:, None], y[d], w[d], x[~d][:, None])


# enumeration of every conditional expectation, scalar python arithmetic


def enum_mean(th, x):
    ew1 = ewu = 0.0
    for y, fy in zip(SUPPORT, toy_pmf(THETA_C, x)):
        for w, pw in toy_pw(x, y).items():
            ew1 += fy * pw * (w - 1)
            ewu += fy * pw * (w - 1) * (th[0] - y)
    return {"E(W-1|x)": ew1, "E{(W-1)U|x}": ewu}


def enum_reg(th, x):
    mu = th[0] + th[1] * x
    out = {"E(W-1|x)": 0.0, "E(W eps|x)": 0.0, "E(W eps^2|x)": 0.0}
    for y, fy in zip(SUPPORT, toy_pmf(THETA_C, x)):
        for w, pw in toy_pw(x, y).items():
            out["E(W-1|x)"] += fy * pw * (w - 1)
            out["E(W eps|x)"] += fy * pw * w * (y - mu)
            out["E(W eps^2|x)"] += fy * pw * w * (y - mu) ** 2
    return out


def enum_out(th, x):
    f = toy_pmf(th, x)
    mean = sum(s * p for s, p in zip(SUPPORT, f))
    e_pi, e_piS = 0.0, [0.0, 0.0]
    for y, fy in zip(SUPPORT, f):
        pib = 1.0 / sum(pw * w for w, pw in toy_pw(x, y).items())
        e_pi += fy * pib
        e_piS[0] += fy * pib * (y - mean)
        e_piS[1] += fy * pib * (y - mean) * x
    return {"E(pi|x)": e_pi, "E(pi S|x)": e_piS}


def enum_parts(kind, variant, th, data):
    """Per-unit D, C(x) and the Setting 2 constant, all by enumeration."""
    mudot = lambda x: [1.0, x]
    xs = data.X[:, 0]
    if variant == "setting2":
        wo = data.w / data.w.sum()
    const = None
    if kind == "ee":
        def D(x, y):
            return [th[0] - y]

        def C1(x):
            m = enum_mean(th, x)
            return [m["E{(W-1)U|x}"] / m["E(W-1|x)"]]
        if variant == "setting2":
            r = [w * (w - 1) for w in data.w]
            const = [sum(ri * (th[0] - yi) for ri, yi in zip(r, data.y)) / sum(r)]
    elif kind == "reg":
        def C1(x):
            m = enum_reg(th, x)
            ratio = m["E(W eps|x)"] / m["E(W eps^2|x)"]
            den = m["E(W-1|x)"] - ratio * m["E(W eps|x)"]
            return [ratio / den * v for v in mudot(x)]
        if variant == "setting2":
            num, den = [0.0, 0.0], 0.0
            for x, a in zip(xs, wo):
                m = enum_reg(th, x)
                ratio = m["E(W eps|x)"] / m["E(W eps^2|x)"]
                den += a * (m["E(W-1|x)"] - ratio * m["E(W eps|x)"])
                num = [n + a * ratio * v for n, v in zip(num, mudot(x))]
            const = [n / den for n in num]

        def D(x, y):
            m = enum_reg(th, x)
            cx = {"setting1": C1(x), "setting2": const}.get(variant, [0.0, 0.0])
            eps = y - th[0] - th[1] * x
            return [(m["E(W eps|x)"] * c + v) / m["E(W eps^2|x)"] * eps
                    for c, v in zip(cx, mudot(x))]
    else:
        def C1(x):
            m = enum_out(th, x)
            return [v / (m["E(pi|x)"] - 1.0) for v in m["E(pi S|x)"]]
        if variant == "setting2":
            num, inv = [0.0, 0.0], 0.0
            for x, a in zip(xs, wo):
                m = enum_out(th, x)
                num = [n + a * v / m["E(pi|x)"] for n, v in zip(num, m["E(pi S|x)"])]
                inv += a / m["E(pi|x)"]
            const = [n / (1.0 - inv) for n in num]

        def D(x, y):
            m = enum_out(th, x)
            f = toy_pmf(th, x)
            mean = sum(s * p for s, p in zip(SUPPORT, f))
            S = [y - mean, (y - mean) * x]
            pib = 1.0 / sum(pw * w for w, pw in toy_pw(x, y).items())
            k = [v / m["E(pi|x)"] for v in m["E(pi S|x)"]]
            cx = {"setting1": C1(x), "setting2": const}.get(variant, [0.0, 0.0])
            return [pib * (s - kk) + (1 - pib / m["E(pi|x)"]) * c for s, kk, c in zip(S, k, cx)]
    return D, C1, const


def enum_score(kind, variant, th, data):
    D, C1, const = enum_parts(kind, variant, th, data)
    q = len(D(data.X[0, 0], data.y[0]))
    total = [0.0] * q
    for x, y, w in zip(data.X[:, 0], data.y, data.w):
        d = D(x, y)
        c = C1(x) if variant == "setting1" else (const if variant == "setting2" else [0.0] * q)
        total = [t + w * a + (1 - w) * b for t, a, b in zip(total, d, c)]
    if variant == "setting1":
        for x in data.X_out[:, 0]:
            total = [t + b for t, b in zip(total, C1(x))]
    elif variant == "setting2":
        total = [t + (data.N - data.n) * b for t, b in zip(total, const)]
    return np.array(total)


def test_criterion_9_discrete_exact_oracle():
    data = _toy_data()
    work, wmod = _toy_models()
    targets = {"ee": mean_target(), "reg": linear_regression_target(), "out": _toy_outcome_target()}
    thetas = {"ee": [np.array([0.1])], "reg": [np.array([0.05, 0.3])],
              "out": [np.array([0.2, 0.5]), np.array([-0.3, 0.9])]}
    enum = {"ee": enum_mean, "reg": enum_reg, "out": enum_out}
    X2 = np.array([[0.0], [1.0]])
    worst_e = worst_t = 0.0
    for kind, target in targets.items():
        for variant, d in variants_of(data):
            comp = est.efficient_components(d, target, variant, wmod, work)
            for th in thetas[kind]:
                got = comp.cond_moments(th, X2)
                for i, x in enumerate((0.0, 1.0)):
                    ref = enum[kind](th, x)
                    for key, val in ref.items():
                        diff = np.abs(np.atleast_1d(got[key][i]) - np.atleast_1d(val))
                        worst_e = max(worst_e, float(np.max(diff)))
                Dref, C1, const = enum_parts(kind, variant, th, d)
                Dgot = comp.D(th, d.X, d.y)
                for r in range(0, d.n, 37):
                    worst_e = max(worst_e, float(np.max(np.abs(Dgot[r] - Dref(d.X[r, 0], d.y[r])))))
                Cgot = comp.C(th, X2)
                for i, x in enumerate((0.0, 1.0)):
                    cref = C1(x) if variant == "setting1" else (
                        const if variant == "setting2" else [0.0] * target.q)
                    worst_e = max(worst_e, float(np.max(np.abs(Cgot[i] - cref))))
            res = est.estimate_efficient(d, target, variant, wmod, work)
            sol = optimize.root(lambda t: enum_score(kind, variant, t, d) / d.n_hat,
                                res.theta_hat + 0.01, method="hybr", options={"xtol": 1e-13})
            # hybr may stop on "no progress" at roundoff level; the residual decides
            assert np.max(np.abs(sol.fun)) <= 1e-12, (kind, variant, sol.message, sol.fun)
            worst_t = max(worst_t, float(np.max(np.abs(sol.x - res.theta_hat))))
    ok = worst_e <= 1e-12 and worst_t <= 1e-10
    detail = (f"max |implementation - enumeration| over expectations, D and C = {worst_e:.1e}; "
              f"max |theta (solver) - theta (enumeration root)| = {worst_t:.1e} "
              f"(3 targets x 3 variants)")
    record_criterion(9, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 10: workplace survey table (user-supplied data)
# ---------------------------------------------------------------------------

SURVEY_REFERENCE = {  # estimator -> parameter -> (estimate, se)
    "cc": {"a": (13.082, 0.049), "b": (0.907, 0.033), "sigma2": (0.316, 0.044)},
    "ht": {"a": (12.889, 0.113), "b": (0.931, 0.054), "sigma2": (0.299, 0.070)},
    "cml": {"a": (12.827, 0.059), "b": (0.847, 0.035), "sigma2": (0.309, 0.042)},
    "eff-reg": {"a": (12.895, 0.099), "b": (0.935, 0.047)},
    "eff-out": {"a": (12.886, 0.094), "b": (0.930, 0.044), "sigma2": (0.298, 0.068)},
}


def test_criterion_10_real_data(tmp_path):
    path = os.environ.get("ISAMP_WES_CSV")
    if not path:
        record_criterion(10, None, "ISAMP_WES_CSV not set; the survey file is not redistributed")
        pytest.skip("ISAMP_WES_CSV not set")
    code = cli.main(["fit", "--data", path, "--target", "out", "--estimators",
                     "cc,ht,cml,eff-reg,eff-out", "--setting", "2", "--n-known", "false",
                     "--strata", "3", "--out", str(tmp_path)])
    rep = json.loads((tmp_path / "estimates.json").read_text())
    got = {e["label"]: dict(zip(e["names"], zip(e["theta_hat"], e["se"])))
           for e in rep["estimates"]}
    bad = []
    for e, params in SURVEY_REFERENCE.items():
        tol_p, tol_s = (0.001, 0.001) if e in ("cc", "ht") else (0.02, 0.01)
        for p, (v, s) in params.items():
            if e not in got:
                bad.append(f"{e} missing")
                break
            gv, gs = got[e][p]
            if abs(gv - v) > tol_p or abs(gs - s) > tol_s:
                bad.append(f"{e}/{p} {gv:.3f} ({gs:.3f}) vs {v:.3f} ({s:.3f})")
    ok = code == cli.EXIT_OK and not bad
    detail = "reference estimates reproduced" if ok else f"exit {code}; mismatches: {bad}"
    record_criterion(10, ok, detail)
    assert ok, detail
