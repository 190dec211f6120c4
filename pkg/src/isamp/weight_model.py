"""Beta-prime working models for the survey-weight distribution.

The inverse weight ``W^{-1}`` given ``(x, y)`` is modelled as
``Beta(m phi, (1 - m) phi)`` with a logistic mean ``m(x, y; beta)``.  The
odds ``O = W - 1`` of a *sampled* unit then follow
``Beta'((1 - m) phi, m phi + 1)``, which is what the likelihood is built on.
For stratified designs a finite mixture of such components is fitted by EM,
treating the stratum as latent.

Models expose ``expected_weight`` (population ``E(W | x, y)``),
``expected_weight_sampled`` (``E_s(W | x, y)``), ``pi_bar`` and
``inclusion_prob``; all accept ``y`` of shape ``(n,)`` or ``(n, K)``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import betaln, digamma, expit, logsumexp, polygamma, softmax

from .core import (EPS_PI, BoundaryHit, ComponentCollapse, DegenerateResponsibility,
                   DomainError, InfiniteMoment, NonConvergence, _bcast)

SCHEMA_VERSION = 1
PHI_MAX = 1e7
EPS_RESP = 0.5
NEWTON_DECREMENT_TOL = 1e-8
ACCEL_AFTER = 20


def design_terms(X, y, terms: str) -> np.ndarray:
    """Columns ``1``, ``x`` (if ``'x' in terms``) and ``y`` (if ``'y' in terms``)."""
    y = np.asarray(y, dtype=float)
    cols = [np.ones(y.shape[0])]
    if "x" in terms:
        X = np.asarray(X, dtype=float).reshape(y.shape[0], -1)
        cols.extend(X.T)
    if "y" in terms:
        cols.append(y)
    return np.column_stack(cols)


def linear_predictor(coef, X, y, terms: str):
    """``coef' (1, x, y)`` allowing ``y`` with a node axis."""
    coef = np.asarray(coef, dtype=float)
    y = np.asarray(y, dtype=float)
    eta = np.full(y.shape, coef[0])
    j = 1
    if "x" in terms:
        X = np.asarray(X, dtype=float)
        X = X.reshape(y.shape[0], -1)
        p = X.shape[1]
        eta = eta + _bcast(X @ coef[j:j + p], y)
        j += p
    if "y" in terms:
        eta = eta + coef[j] * y
        j += 1
    if j != coef.shape[0]:
        raise ValueError(f"coefficient length {coef.shape[0]} does not match terms {terms!r}")
    return eta


def n_coef(terms: str, p: int) -> int:
    return 1 + (p if "x" in terms else 0) + (1 if "y" in terms else 0)


# ---------------------------------------------------------------------------
# Beta-prime density of the sampled odds
# ---------------------------------------------------------------------------


def logdensity_sampled_odds(o, m, phi):
    """Log-density of ``Beta'((1 - m) phi, m phi + 1)`` at ``o``."""
    o = np.asarray(o, dtype=float)
    m = np.asarray(m, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if np.any(o <= 0) or np.any((m <= 0) | (m >= 1)) or np.any(phi <= 0):
        raise DomainError("need o > 0, 0 < m < 1, phi > 0")
    a = (1 - m) * phi
    b = m * phi + 1
    with np.errstate(divide="ignore"):
        return (a - 1) * np.log(o) - (phi + 1) * np.log1p(o) - betaln(a, b)


def _odds_derivs(lo, l1o, m, phi, order=1):
    """Derivatives of the sampled odds log-density in ``(m, phi)``.

    ``lo = log o`` and ``l1o = log(1 + o)`` are passed precomputed.
    """
    a = (1 - m) * phi
    b = m * phi + 1
    da, db, dab = digamma(a), digamma(b), digamma(phi + 1)
    Lm = phi * (da - db - lo)
    Lp = (1 - m) * lo - l1o - (1 - m) * da - m * db + dab
    if order == 1:
        return Lm, Lp
    ta, tb, tab = polygamma(1, a), polygamma(1, b), polygamma(1, phi + 1)
    Lmm = -phi**2 * (ta + tb)
    Lmp = (da - db - lo) + phi * ((1 - m) * ta - m * tb)
    Lpp = -(1 - m) ** 2 * ta - m**2 * tb + tab
    return Lm, Lp, Lmm, Lmp, Lpp


def score_sampled_odds(o, m, phi):
    """Analytic gradient of :func:`logdensity_sampled_odds` in ``(o, m, phi)``."""
    o = np.asarray(o, dtype=float)
    a = (1 - m) * phi
    Lo = (a - 1) / o - (phi + 1) / (1 + o)
    Lm, Lp = _odds_derivs(np.log(o), np.log1p(o), m, phi)
    return Lo, Lm, Lp


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitDiagnostics:
    loglik_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    gradient_norm: float = float("nan")
    message: str = ""
    restarts: int = 0
    boundary: bool = False


def _pi_from_moment(m, phi):
    """``1 / E(W | x, y) = (m phi - 1) / (phi - 1)``; non-positive when infinite."""
    return (m * phi - 1.0) / (phi - 1.0)


@dataclass(frozen=True)
class BetaWeightModel:
    """Single beta-prime working model with logistic mean ``m(x, y; beta)``."""

    beta: np.ndarray
    phi: float
    terms: str = "xy"

    def __post_init__(self):
        b = np.array(self.beta, dtype=float).ravel()
        b.setflags(write=False)
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "phi", float(self.phi))
        if not self.phi > 0:
            raise DomainError("phi must be positive")

    H = 1

    def m(self, X, y):
        return expit(linear_predictor(self.beta, X, y, self.terms))

    def inclusion_prob(self, X, y):
        """``P(delta = 1 | x, y) = 1 / E_s(W | x, y) = m``."""
        return self.m(X, y)

    def expected_weight(self, X, y):
        m = self.m(X, y)
        if np.any(m * self.phi <= 1.0):
            raise InfiniteMoment("E(W | x, y) is infinite where m * phi <= 1")
        return (self.phi - 1.0) / (m * self.phi - 1.0)

    def expected_weight_sampled(self, X, y):
        return 1.0 / self.m(X, y)

    def pi_bar(self, X, y, clamp: bool = False):
        if not clamp:
            return 1.0 / self.expected_weight(X, y)
        return np.clip(_pi_from_moment(self.m(X, y), self.phi), EPS_PI, 1.0)

    def loglik(self, X, y, w):
        return float(np.sum(logdensity_sampled_odds(np.asarray(w) - 1.0, self.m(X, y), self.phi)))

    def to_dict(self):
        return {"version": SCHEMA_VERSION, "type": "single", "terms": self.terms,
                "beta": [_fmt(v) for v in self.beta], "phi": _fmt(self.phi)}


@dataclass(frozen=True)
class MixtureWeightModel:
    """H-component mixture; component ``g`` has proportion ``p_g(alpha)``.

    ``alpha`` has shape ``(H - 1, k)``: logit coefficients of components
    ``2..H`` against component 1 on the columns selected by ``prop_terms``.
    """

    alpha: np.ndarray
    components: tuple
    prop_terms: str = "y"

    def __post_init__(self):
        comps = tuple(self.components)
        a = np.array(self.alpha, dtype=float).reshape(len(comps) - 1, -1) if len(comps) > 1 \
            else np.zeros((0, n_coef(self.prop_terms, 1)))
        a.setflags(write=False)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "components", comps)

    @property
    def H(self):
        return len(self.components)

    @property
    def m(self):
        """Component means (covariate-free components only)."""
        return np.array([c.m(np.zeros((1, 1)), np.zeros(1))[0] for c in self.components])

    @property
    def phi(self):
        return np.array([c.phi for c in self.components])

    def log_proportions(self, X, y):
        y = np.asarray(y, dtype=float)
        eta = [np.zeros(y.shape)] + [linear_predictor(a, X, y, self.prop_terms) for a in self.alpha]
        eta = np.stack(eta, axis=-1)
        return eta - logsumexp(eta, axis=-1, keepdims=True)

    def _prop_list(self, X, y):
        """Proportions as a list of ``H`` arrays (avoids short trailing-axis reductions)."""
        y = np.asarray(y, dtype=float)
        eta = [np.zeros(y.shape)] + [linear_predictor(a, X, y, self.prop_terms) for a in self.alpha]
        top = eta[0]
        for e in eta[1:]:
            top = np.maximum(top, e)
        ex = [np.exp(e - top) for e in eta]
        tot = ex[0]
        for e in ex[1:]:
            tot = tot + e
        return [e / tot for e in ex]

    def proportions(self, X, y):
        return np.stack(self._prop_list(X, y), axis=-1)

    def component_m(self, X, y):
        return np.stack([c.m(X, y) for c in self.components], axis=-1)

    def _sum(self, terms):
        out = terms[0]
        for t in terms[1:]:
            out = out + t
        return out

    def inclusion_prob(self, X, y):
        ps = self._prop_list(X, y)
        return self._sum([p * c.m(X, y) for p, c in zip(ps, self.components)])

    def expected_weight(self, X, y):
        ps = self._prop_list(X, y)
        terms = []
        for p, c in zip(ps, self.components):
            m = c.m(X, y)
            if np.any(m * c.phi <= 1.0):
                raise InfiniteMoment("E(W | x, y) is infinite where m_g * phi_g <= 1")
            terms.append(p * (c.phi - 1.0) / (m * c.phi - 1.0))
        return self._sum(terms)

    def expected_weight_sampled(self, X, y):
        # P(G = h | x, y, delta = 1) is proportional to p_h m_h
        return 1.0 / self.inclusion_prob(X, y)

    def pi_bar(self, X, y, clamp: bool = False):
        if not clamp:
            return 1.0 / self.expected_weight(X, y)
        ps = self._prop_list(X, y)
        terms = []
        for p, c in zip(ps, self.components):
            pis = _pi_from_moment(c.m(X, y), c.phi)
            terms.append(p / np.clip(pis, 1e-300, None))
        return np.clip(1.0 / self._sum(terms), EPS_PI, 1.0)

    def sampled_component_posterior(self, X, y):
        r = self.proportions(X, y) * self.component_m(X, y)
        return r / r.sum(axis=-1, keepdims=True)

    def loglik(self, X, y, w):
        return float(np.sum(_mixture_loglik_terms(self, X, y, w)))

    def to_dict(self):
        return {"version": SCHEMA_VERSION, "type": "mixture", "prop_terms": self.prop_terms,
                "alpha": [[_fmt(v) for v in row] for row in self.alpha],
                "components": [c.to_dict() for c in self.components]}


@dataclass(frozen=True)
class DiscreteWeightModel:
    """Weight law with finite support: ``P(W = values[j] | x, y) = probs(X, y)[..., j]``."""

    values: np.ndarray
    probs: object

    def _p(self, X, y):
        return np.asarray(self.probs(X, np.asarray(y, dtype=float)), dtype=float)

    def expected_weight(self, X, y):
        return self._p(X, y) @ np.asarray(self.values, dtype=float)

    def inclusion_prob(self, X, y):
        return self._p(X, y) @ (1.0 / np.asarray(self.values, dtype=float))

    def expected_weight_sampled(self, X, y):
        return 1.0 / self.inclusion_prob(X, y)

    def pi_bar(self, X, y, clamp: bool = False):
        return 1.0 / self.expected_weight(X, y)


# module-level function forms --------------------------------------------------


def expected_weight_population(X, y, model):
    return model.expected_weight(X, y)


def expected_weight_sampled(X, y, model):
    return model.expected_weight_sampled(X, y)


def pi_bar(X, y, model, clamp: bool = False):
    return model.pi_bar(X, y, clamp=clamp)


# ---------------------------------------------------------------------------
# Single-model maximum likelihood
# ---------------------------------------------------------------------------


def _single_objective(params, Z, lo, l1o, cw, order=2):
    beta, tau = params[:-1], params[-1]
    phi = np.exp(tau)
    m = expit(Z @ beta)
    a = (1 - m) * phi
    b = m * phi + 1
    ll = (a - 1) * lo - (phi + 1) * l1o - betaln(a, b)
    f = -float(cw @ ll)
    if order == 0:
        return f
    g = m * (1 - m)
    if order == 1:
        Lm, Lp = _odds_derivs(lo, l1o, m, phi)
    else:
        Lm, Lp, Lmm, Lmp, Lpp = _odds_derivs(lo, l1o, m, phi, order=2)
    grad = -np.append(Z.T @ (cw * Lm * g), cw @ (Lp * phi))
    if order == 1:
        return f, grad
    h_ee = cw * (Lmm * g**2 + Lm * g * (1 - 2 * m))
    h_et = cw * (Lmp * g * phi)
    h_tt = cw @ (Lpp * phi**2 + Lp * phi)
    k = Z.shape[1]
    hess = np.empty((k + 1, k + 1))
    hess[:k, :k] = Z.T @ (h_ee[:, None] * Z)
    hess[:k, k] = hess[k, :k] = Z.T @ h_et
    hess[k, k] = h_tt
    return f, grad, -hess


def _moment_start(w, Z, cw):
    u = 1.0 / w
    lu = np.log(u / (1 - u))
    beta = np.linalg.lstsq(Z * np.sqrt(cw)[:, None], lu * np.sqrt(cw), rcond=None)[0]
    m = expit(Z @ beta)
    # sampled odds variance: (1 - m) / (m^2 (m phi - 1))
    o = w - 1
    resid2 = np.average((o - (1 - m) / m) ** 2, weights=cw)
    mm = np.average(m, weights=cw)
    phi = (1 + (1 - mm) / (mm**2 * max(resid2, 1e-12))) / mm
    return np.append(beta, np.log(np.clip(phi, 2.0, PHI_MAX / 10)))


def fit_single(w, X=None, y=None, terms: str = "xy", case_weights=None, start=None,
               tol: float = 1e-9, max_iter: int = 500, check_boundary: bool = True):
    """Maximum likelihood fit of :class:`BetaWeightModel` from sampled units.

    The fit runs over ``(beta, log phi)`` with the analytic Hessian
    (trust-region Newton).  Returns ``(model, FitDiagnostics)``.
    """
    w = np.asarray(w, dtype=float)
    if np.any(w <= 1):
        raise DomainError("all sampled weights must exceed 1")
    n = w.shape[0]
    if y is None:
        y = np.zeros(n)
    if X is None:
        X = np.zeros((n, 1))
    Z = design_terms(X, y, terms)
    if n < Z.shape[1] + 1:
        raise DomainError(f"need at least {Z.shape[1] + 1} sampled units")
    cw = np.ones(n) if case_weights is None else np.asarray(case_weights, dtype=float)
    lo, l1o = np.log(w - 1), np.log(w)
    x0 = _moment_start(w, Z, cw) if start is None else np.asarray(start, dtype=float)
    fun = lambda p: _single_objective(p, Z, lo, l1o, cw, order=1)
    hess = lambda p: _single_objective(p, Z, lo, l1o, cw, order=2)[2]
    res = optimize.minimize(fun, x0, jac=True, hess=hess, method="trust-exact",
                            options={"gtol": tol, "maxiter": max_iter})
    if not np.all(np.isfinite(res.x)):
        raise NonConvergence("beta-prime fit diverged")
    # the raw gradient carries roundoff of order phi * n; the Newton decrement
    # (predicted log-likelihood gain) is the scale-free test.  A few full
    # Newton steps polish the root once inside the quadratic region.
    x, decrement = res.x, np.inf
    for _ in range(4):
        _, grad = fun(x)
        try:
            step = np.linalg.solve(hess(x), grad)
        except np.linalg.LinAlgError:
            break
        dec = float(grad @ step)
        if not 0.0 <= dec < decrement:
            break
        decrement = dec
        if dec > NEWTON_DECREMENT_TOL:
            break
        x = x - step
    _, grad = fun(x)
    gnorm = float(np.max(np.abs(grad)))
    converged = bool(res.success) or 0.0 <= decrement <= NEWTON_DECREMENT_TOL
    model = BetaWeightModel(x[:-1], float(np.exp(x[-1])), terms)
    boundary = bool(np.any(model.m(X, y) * model.phi <= 1.0))
    diag = FitDiagnostics([-float(res.fun)], int(res.nit), converged, gnorm, str(res.message),
                          boundary=boundary)
    if not converged:
        raise NonConvergence(f"beta-prime fit did not converge: {res.message}")
    if boundary and check_boundary:
        raise BoundaryHit("fitted m * phi <= 1 at a sampled unit; population moment undefined")
    return model, diag


# ---------------------------------------------------------------------------
# Mixture: E-step, M-step, EM driver
# ---------------------------------------------------------------------------


def _component_logdens(model: MixtureWeightModel, X, y, w):
    o = np.asarray(w, dtype=float) - 1.0
    m = model.component_m(X, y)
    return logdensity_sampled_odds(o[:, None], m, model.phi[None, :])


def _log_joint(model, X, y, w):
    """``log{p_g m_g / sum_h p_h m_h} + log f_s(w | g)`` for each unit and component."""
    logp = model.log_proportions(X, y)
    logm = np.log(model.component_m(X, y))
    log_r = logp + logm
    log_r = log_r - logsumexp(log_r, axis=-1, keepdims=True)
    return log_r + _component_logdens(model, X, y, w)


def _mixture_loglik_terms(model, X, y, w):
    return logsumexp(_log_joint(model, X, y, w), axis=-1)


def posterior_responsibility(w, X, y, model) -> np.ndarray:
    """``P(G = g | w, x, y, delta = 1)`` for each sampled unit, shape ``(n, H)``."""
    w = np.atleast_1d(np.asarray(w, dtype=float))
    if np.any(w <= 1):
        raise DomainError("weights must exceed 1")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if X is None:
        X = np.zeros((w.shape[0], 1))
    if isinstance(model, BetaWeightModel):
        return np.ones((w.shape[0], 1))
    lj = _log_joint(model, X, y, w)
    tot = logsumexp(lj, axis=-1, keepdims=True)
    if np.any(~np.isfinite(tot)):
        raise DegenerateResponsibility("all component densities vanish for some unit")
    return np.exp(lj - tot)


class _Layout:
    """Packs mixture parameters into a flat vector."""

    def __init__(self, H, k_prop, k_comp):
        self.H, self.kp, self.kc = H, k_prop, k_comp

    def unpack(self, v):
        na = (self.H - 1) * self.kp
        alpha = v[:na].reshape(self.H - 1, self.kp)
        rest = v[na:].reshape(self.H, self.kc + 1)
        return alpha, rest[:, :-1], rest[:, -1]

    def pack(self, alpha, betas, taus):
        return np.concatenate([np.ravel(alpha), np.column_stack([betas, taus]).ravel()])


def _build_mixture(layout, v, prop_terms, comp_terms):
    alpha, betas, taus = layout.unpack(v)
    comps = tuple(BetaWeightModel(b, np.exp(t), comp_terms) for b, t in zip(betas, taus))
    return MixtureWeightModel(alpha, comps, prop_terms)


def _q_function(v, layout, Zp, Zc, lo, l1o, resp):
    """Negative expected complete sampled log-likelihood and its gradient."""
    alpha, betas, taus = layout.unpack(v)
    n = Zp.shape[0]
    eta_p = np.column_stack([np.zeros(n)] + [Zp @ a for a in alpha]) if layout.H > 1 \
        else np.zeros((n, 1))
    logp = eta_p - logsumexp(eta_p, axis=1, keepdims=True)
    p = np.exp(logp)
    eta_c = Zc @ betas.T
    m = expit(eta_c)
    phi = np.exp(taus)[None, :]
    a = (1 - m) * phi
    b = m * phi + 1
    logf = (a - 1) * lo[:, None] - (phi + 1) * l1o[:, None] - betaln(a, b)
    log_pm = logp + np.log(m)
    lse = logsumexp(log_pm, axis=1, keepdims=True)
    r = np.exp(log_pm - lse)
    q = np.sum(resp * (log_pm - lse + logf))
    Lm, Lp = _odds_derivs(lo[:, None], l1o[:, None], m, phi)
    g_alpha = ((resp - r)[:, 1:]).T @ Zp
    g_eta = resp * (1 - m) - r * (1 - m) + resp * Lm * m * (1 - m)
    g_beta = g_eta.T @ Zc
    g_tau = np.sum(resp * Lp * phi, axis=0)
    grad = layout.pack(g_alpha, g_beta, g_tau)
    return -q, -grad


def _kmeans_1d(v, H, init_centers, iters=100):
    c = np.sort(np.asarray(init_centers, dtype=float))
    for _ in range(iters):
        lab = np.argmin(np.abs(v[:, None] - c[None, :]), axis=1)
        new = np.array([v[lab == h].mean() if np.any(lab == h) else c[h] for h in range(H)])
        if np.allclose(new, c):
            break
        c = new
    lab = np.argmin(np.abs(v[:, None] - c[None, :]), axis=1)
    return lab, float(np.sum((v - c[lab]) ** 2))


def initial_partition(w, H):
    """Seed groups for EM from ``log w``.

    Quantile split and largest-gap split of ``log w`` are both refined by
    one-dimensional k-means; the partition with smaller within-group sum of
    squares is kept.
    """
    v = np.log(np.asarray(w, dtype=float))
    if H == 1:
        return np.zeros(v.shape[0], dtype=int)
    qs = np.quantile(v, (np.arange(H) + 0.5) / H)
    s = np.sort(v)
    cut = np.sort(np.argsort(np.diff(s))[-(H - 1):])
    edges = np.concatenate([[0], cut + 1, [s.shape[0]]])
    gap_centers = [s[edges[h]:edges[h + 1]].mean() for h in range(H)]
    best = min((_kmeans_1d(v, H, c) for c in (qs, gap_centers)), key=lambda t: t[1])
    return best[0]


def _init_params(w, Zp, Zc, labels, H, layout, comp_terms, rng=None, perturb=0.0):
    betas, taus, freq, mg = [], [], [], []
    for h in range(H):
        sel = labels == h
        if sel.sum() < 2:
            sel = np.ones_like(sel)
        start = _moment_start(w[sel], Zc[sel], np.ones(sel.sum()))
        betas.append(start[:-1])
        taus.append(start[-1])
        freq.append(max(np.mean(labels == h), 1.0 / len(w)))
        mg.append(np.mean(1.0 / w[sel]))
    betas, taus = np.array(betas), np.array(taus)
    # sampled frequency r_g is proportional to p_g m_g
    p = np.array(freq) / np.array(mg)
    alpha = np.zeros((H - 1, layout.kp))
    alpha[:, 0] = np.log(p[1:] / p[0])
    if perturb and rng is not None:
        betas = betas + rng.normal(0, perturb, betas.shape)
        taus = taus + rng.normal(0, perturb, taus.shape)
        alpha = alpha + rng.normal(0, perturb, alpha.shape)
    return layout.pack(alpha, betas, taus)


def _align(model: MixtureWeightModel, X, y):
    """Relabel components by ascending mean ``m_g``; component 1 stays baseline."""
    mbar = np.array([np.mean(c.m(X, y)) for c in model.components])
    order = np.argsort(mbar, kind="stable")
    if np.all(order == np.arange(model.H)):
        return model
    full = np.vstack([np.zeros(model.alpha.shape[1]), model.alpha])[order]
    alpha = full[1:] - full[0]
    return MixtureWeightModel(alpha, tuple(model.components[h] for h in order), model.prop_terms)


def em_fit_mixture(w, X=None, y=None, H: int = 3, prop_terms: str = "y", comp_terms: str = "",
                   init=None, strata=None, observed_labels: bool = False, tol: float = 1e-8,
                   max_iter: int = 500, restarts: int = 5, seed: int = 0):
    """Fit :class:`MixtureWeightModel` by EM with the stratum treated as latent.

    With ``observed_labels=True`` the E-step uses the known ``strata`` as
    hard responsibilities.  ``init`` may be a starting ``MixtureWeightModel``
    or an integer label vector.  Returns ``(model, FitDiagnostics)``.
    """
    w = np.asarray(w, dtype=float)
    n = w.shape[0]
    if np.any(w <= 1):
        raise DomainError("all sampled weights must exceed 1")
    if H < 1:
        raise ValueError("H must be >= 1")
    X = np.zeros((n, 1)) if X is None else np.asarray(X, dtype=float).reshape(n, -1)
    y = np.zeros(n) if y is None else np.asarray(y, dtype=float)
    if H == 1:
        single, diag = fit_single(w, X, y, comp_terms, tol=tol)
        return MixtureWeightModel(np.zeros((0, n_coef(prop_terms, X.shape[1]))), (single,),
                                  prop_terms), diag
    Zp = design_terms(X, y, prop_terms)
    Zc = design_terms(X, y, comp_terms)
    layout = _Layout(H, Zp.shape[1], Zc.shape[1])
    lo, l1o = np.log(w - 1), np.log(w)
    bounds = ([(None, None)] * ((H - 1) * layout.kp)
              + ([(None, None)] * layout.kc + [(np.log(1.0 + 1e-6), np.log(PHI_MAX))]) * H)
    rng = np.random.default_rng(seed)

    if observed_labels:
        if strata is None:
            raise ValueError("observed_labels requires strata")
        labels = np.unique(strata, return_inverse=True)[1]
        if labels.max() + 1 != H:
            raise ValueError("number of observed strata differs from H")
        hard = np.eye(H)[labels]
    else:
        hard = None

    if isinstance(init, MixtureWeightModel):
        base_labels = None
        v_init = layout.pack(init.alpha, np.array([c.beta for c in init.components]),
                             np.log(init.phi))
    else:
        if init is not None:
            base_labels = np.asarray(init, dtype=int)
        elif strata is not None and observed_labels:
            base_labels = np.unique(strata, return_inverse=True)[1]
        else:
            base_labels = initial_partition(w, H)
        v_init = None

    last_error = None
    for attempt in range(restarts + 1):
        if attempt == 0 and v_init is not None:
            v = v_init.copy()
        else:
            v = _init_params(w, Zp, Zc, base_labels if base_labels is not None
                             else initial_partition(w, H), H, layout, comp_terms,
                             rng=rng, perturb=0.0 if attempt == 0 else 0.3)
        try:
            model, diag = _em_loop(v, layout, Zp, Zc, lo, l1o, X, y, w, prop_terms, comp_terms,
                                   hard, bounds, tol, max_iter)
        except ComponentCollapse as exc:
            last_error = exc
            continue
        model = _align(model, X, y)
        return model, FitDiagnostics(diag.loglik_trace, diag.iterations, diag.converged,
                                     diag.gradient_norm, diag.message, attempt, diag.boundary)
    raise ComponentCollapse(f"component collapsed after {restarts} restarts: {last_error}")


def _observed_objective(v, layout, Zp, Zc, lo, l1o, X, y, w, prop_terms, comp_terms):
    """Negative observed-data log-likelihood; its gradient is the Q-gradient at the
    posterior responsibilities of ``v`` (Fisher's identity)."""
    model = _build_mixture(layout, v, prop_terms, comp_terms)
    lj = _log_joint(model, X, y, w)
    tot = logsumexp(lj, axis=-1, keepdims=True)
    if not np.all(np.isfinite(tot)):
        return np.inf, np.zeros_like(v)
    resp = np.exp(lj - tot)
    _, g = _q_function(v, layout, Zp, Zc, lo, l1o, resp)
    return -float(tot.sum()), g


def _em_loop(v, layout, Zp, Zc, lo, l1o, X, y, w, prop_terms, comp_terms, hard, bounds, tol,
             max_iter, accel_after=ACCEL_AFTER):
    model = _build_mixture(layout, v, prop_terms, comp_terms)
    ll = model.loglik(X, y, w)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if hard is None and it == accel_after + 1:
            # EM crawls along flat ridges; one quasi-Newton ascent on the observed
            # log-likelihood, kept only if it improves, preserves monotonicity
            res = optimize.minimize(_observed_objective, v, jac=True, method="L-BFGS-B",
                                    bounds=bounds,
                                    args=(layout, Zp, Zc, lo, l1o, X, y, w, prop_terms,
                                          comp_terms),
                                    options={"maxiter": 2000, "ftol": 1e-15, "gtol": 1e-9})
            if np.all(np.isfinite(res.x)) and -res.fun > ll:
                v = res.x
                model = _build_mixture(layout, v, prop_terms, comp_terms)
                ll = model.loglik(X, y, w)
                trace.append(ll)
        resp = hard if hard is not None else posterior_responsibility(w, X, y, model)
        mass = resp.sum(axis=0)
        if np.any(mass < EPS_RESP):
            raise ComponentCollapse(f"responsibility mass {mass.min():.3g} < {EPS_RESP}")
        q0, _ = _q_function(v, layout, Zp, Zc, lo, l1o, resp)
        res = optimize.minimize(_q_function, v, args=(layout, Zp, Zc, lo, l1o, resp), jac=True,
                                method="L-BFGS-B", bounds=bounds,
                                options={"maxiter": 500, "ftol": 1e-15, "gtol": 1e-10})
        if np.all(np.isfinite(res.x)) and res.fun <= q0:
            v = res.x
        model = _build_mixture(layout, v, prop_terms, comp_terms)
        new_ll = model.loglik(X, y, w)
        trace.append(new_ll)
        if hard is not None or new_ll - ll < tol:
            converged = True
            ll = new_ll
            break
        ll = new_ll
    resp = hard if hard is not None else posterior_responsibility(w, X, y, model)
    _, g = _q_function(v, layout, Zp, Zc, lo, l1o, resp)
    taus = layout.unpack(v)[2]
    boundary = bool(np.any(taus >= np.log(PHI_MAX) - 1e-8))
    if not converged:
        warnings.warn("EM reached max_iter without meeting tolerance", RuntimeWarning)
    return model, FitDiagnostics(trace, it, converged, float(np.max(np.abs(g))), "",
                                 boundary=boundary)


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    return format(float(v), ".17g")


def model_to_json(model, diagnostics: FitDiagnostics | None = None) -> str:
    doc = model.to_dict()
    if diagnostics is not None:
        doc["diagnostics"] = {"loglik_trace": [_fmt(v) for v in diagnostics.loglik_trace],
                              "iterations": diagnostics.iterations,
                              "converged": diagnostics.converged,
                              "gradient_norm": _fmt(diagnostics.gradient_norm),
                              "restarts": diagnostics.restarts,
                              "boundary": diagnostics.boundary}
    return json.dumps(doc, indent=2)


def _from_dict(doc):
    if doc.get("version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported weight-model schema version {doc.get('version')!r}")
    if doc["type"] == "single":
        return BetaWeightModel([float(v) for v in doc["beta"]], float(doc["phi"]), doc["terms"])
    if doc["type"] == "mixture":
        comps = tuple(_from_dict(c) for c in doc["components"])
        alpha = np.array([[float(v) for v in row] for row in doc["alpha"]])
        return MixtureWeightModel(alpha, comps, doc["prop_terms"])
    raise ValueError(f"unknown model type {doc['type']!r}")


def model_from_json(text: str):
    return _from_dict(json.loads(text))
