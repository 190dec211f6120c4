"""Estimators: complete-case, Horvitz-Thompson, conditional ML and the
semiparametric efficient adaptive estimators, with sandwich variances.

Every estimator is the root of a sum of per-unit contributions.  A
:class:`ScoreFunction` returns those contributions as a
:class:`Contributions` block (rows with multiplicities), so the same object
drives the Newton solver and the sandwich variance.

Efficient scores have the form

    sum_i  delta_i W_i D(theta; x_i, y_i) + (1 - delta_i W_i) C(theta; x_i)

where the pair ``(D, C)`` depends on the target and on the variant:
``"setting1"`` (population covariates and ``N`` known), ``"setting2"``
(``N`` known, covariates of sampled units only), ``"n_unknown"`` and
``"non_informative"`` (both with ``C = 0``).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import (EPS_DEN, EPS_PI, CauchySchwarzDegeneracy, DegenerateDenominator,
                   EstimateResult, NonInformativeDegeneracy, SingularBread, SingularJacobian,
                   SurveyData, design_with_intercept, score_variant)
from .outcome_model import expect, gauss_hermite

VARIANTS = ("setting1", "setting2", "n_unknown", "non_informative")
VARIANT_CODES = {"n_unknown": "00", "setting2": "10", "setting1": "11",
                 "non_informative": "ni"}


# ---------------------------------------------------------------------------
# Score functions and the root finder
# ---------------------------------------------------------------------------


@dataclass
class Contributions:
    """Per-unit score contributions: ``values[r]`` occurs ``counts[r]`` times."""

    values: np.ndarray
    counts: np.ndarray

    def total(self) -> np.ndarray:
        return self.counts @ self.values


@dataclass
class ScoreFunction:
    """Estimating function ``theta -> Contributions``.

    ``jac``, when given, returns the per-unit derivative ``(k, q, q)`` of the
    contribution rows; otherwise derivatives are taken by forward differences.
    """

    contributions: Callable
    q: int
    n_eff: float = 1.0
    label: str = ""
    jac: Callable | None = None
    info: dict = field(default_factory=dict)

    def __call__(self, theta) -> np.ndarray:
        return self.contributions(np.asarray(theta, dtype=float)).total()


@dataclass
class SolverDiagnostics:
    iterations: int
    converged: bool
    score_norm: float
    message: str = ""


def fd_step(theta):
    # powers of two keep theta + h and the difference quotient free of representation error
    h = np.maximum(1e-6, 1e-6 * np.abs(theta))
    return np.exp2(np.round(np.log2(h)))


def _fd_jacobian(F, theta, f0):
    h = fd_step(theta)
    J = np.empty((f0.shape[0], theta.shape[0]))
    for j in range(theta.shape[0]):
        t = theta.copy()
        t[j] += h[j]
        J[:, j] = (np.asarray(F(t)) - f0) / h[j]
    return J


def solve_estimating_equation(score: Callable, theta0, scale: float = 1.0, tol: float = 1e-10,
                              step_tol: float = 1e-12, max_iter: int = 100):
    """Damped Newton with a forward-difference Jacobian.

    Stops when ``||score|| / scale <= tol`` or when the full Newton step is
    below ``step_tol``.  Failure to converge is reported through the returned
    diagnostics (with the best iterate), not raised.
    """
    F = (lambda t: np.atleast_1d(np.asarray(score(t), dtype=float)))
    theta = np.atleast_1d(np.array(theta0, dtype=float))
    f = F(theta)
    if not np.all(np.isfinite(f)):
        raise ValueError("score is not finite at the starting value")
    norm = float(np.linalg.norm(f))
    message = "max_iter reached"
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if norm / scale <= tol:
            converged, message = True, "score tolerance"
            it -= 1
            break
        J = _fd_jacobian(F, theta, f)
        if not np.all(np.isfinite(J)) or np.linalg.cond(J) > 1e14:
            raise SingularJacobian("Jacobian of the estimating function is singular")
        step = np.linalg.solve(J, -f)
        if np.linalg.norm(step) <= step_tol * (1.0 + np.linalg.norm(theta)):
            converged, message = True, "step tolerance"
            break
        t = 1.0
        while t > 2.0**-40:
            cand = theta + t * step
            try:
                fc = F(cand)
            except (ValueError, FloatingPointError, ArithmeticError):
                fc = None
            if fc is not None and np.all(np.isfinite(fc)) and np.linalg.norm(fc) < norm:
                break
            t *= 0.5
        else:
            message = "line search failed"
            break
        theta, f = cand, fc
        norm = float(np.linalg.norm(f))
    if not converged and norm / scale <= tol:
        converged, message = True, "score tolerance"
    return theta, SolverDiagnostics(it, converged, norm, message)


def sandwich_variance(score: ScoreFunction, theta_hat) -> np.ndarray:
    """``A^{-1} B A^{-T}`` with ``A = sum d(contrib)/d theta``, ``B = sum contrib contrib'``.

    Sums run over all ``N`` units (rows carry multiplicities), which equals
    the mean-based form divided by ``N``.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    c0 = score.contributions(theta_hat)
    q = theta_hat.shape[0]
    if score.jac is not None:
        dv = np.asarray(score.jac(theta_hat))
    else:
        h = fd_step(theta_hat)
        dv = np.empty(c0.values.shape + (q,))
        for j in range(q):
            t = theta_hat.copy()
            t[j] += h[j]
            dv[..., j] = (score.contributions(t).values - c0.values) / h[j]
    A = np.einsum("k,kij->ij", c0.counts, dv)
    B = np.einsum("k,ki,kj->ij", c0.counts, c0.values, c0.values)
    if not np.all(np.isfinite(A)) or np.linalg.matrix_rank(A) < q:
        raise SingularBread("bread matrix is rank-deficient")
    Ainv = np.linalg.inv(A)
    V = Ainv @ B @ Ainv.T
    return 0.5 * (V + V.T)


def _finish(label, score: ScoreFunction, theta, diag: SolverDiagnostics, names, info=None):
    V = sandwich_variance(score, theta)
    res = EstimateResult(label, np.asarray(theta, dtype=float), V, diag.iterations,
                         diag.converged, diag.score_norm, list(names), score.n_eff,
                         dict(score.info))
    if info:
        res.info.update(info)
    res.info["solver"] = diag.message
    return res


def _n_eff(data: SurveyData) -> float:
    return float(data.N) if data.N is not None else data.n_hat


def _solve(score: ScoreFunction, theta0):
    return solve_estimating_equation(score, theta0, scale=max(score.n_eff, 1.0))


# ---------------------------------------------------------------------------
# Weighting estimators
# ---------------------------------------------------------------------------


def kernel_jac(target, theta, X, y):
    """Analytic per-unit derivative of the weighting kernel, or ``None``."""
    th = np.asarray(theta, dtype=float)
    name = getattr(target, "names", None)
    if target.kind == "ee" and name == ["mean"]:
        return np.ones((y.shape[0], 1, 1))
    if target.kind == "reg" and getattr(target, "_linear", False):
        Z = design_with_intercept(X)
        return -Z[:, :, None] * Z[:, None, :]
    if target.kind == "out" and getattr(target, "_normal_linear", False):
        Z = design_with_intercept(X)
        s2 = th[-1]
        r = y - Z @ th[:-1]
        q = th.shape[0]
        J = np.zeros((y.shape[0], q, q))
        J[:, :-1, :-1] = -Z[:, :, None] * Z[:, None, :] / s2
        J[:, :-1, -1] = -(r / s2**2)[:, None] * Z
        J[:, -1, :-1] = -(r / s2**2)[:, None] * Z
        J[:, -1, -1] = 0.5 / s2**2 - r**2 / s2**3
        return J
    return None


def weighted_score(data: SurveyData, target, weights, label="") -> ScoreFunction:
    """``sum_i weights_i * kernel(theta; x_i, y_i)``."""
    wts = np.asarray(weights, dtype=float)
    ones = np.ones(data.n)

    def contrib(theta):
        return Contributions(wts[:, None] * target.kernel(theta, data.X, data.y), ones)

    jac = None
    if kernel_jac(target, np.ones(target.q), data.X[:1], data.y[:1]) is not None:
        jac = lambda th: wts[:, None, None] * kernel_jac(target, th, data.X, data.y)
    return ScoreFunction(contrib, target.q, float(wts.sum()), label, jac)


def estimate_cc(data: SurveyData, target) -> EstimateResult:
    """Unweighted (complete-case) estimating equation over sampled units."""
    sf = weighted_score(data, target, np.ones(data.n), "cc")
    theta0 = target.initial(data.X, data.y, np.ones(data.n))
    theta, diag = _solve(sf, theta0)
    return _finish("cc", sf, theta, diag, target.names)


def estimate_ht(data: SurveyData, target) -> EstimateResult:
    """Horvitz-Thompson weighted estimating equation ``sum delta W kernel = 0``."""
    sf = weighted_score(data, target, data.w, "ht")
    sf.n_eff = _n_eff(data)
    theta0 = target.initial(data.X, data.y, data.w)
    theta, diag = _solve(sf, theta0)
    return _finish("ht", sf, theta, diag, target.names)


# ---------------------------------------------------------------------------
# Conditional maximum likelihood
# ---------------------------------------------------------------------------


def cml_score(data: SurveyData, target, weight_model, rule=None) -> ScoreFunction:
    if target.kind != "out":
        raise TypeError("conditional ML needs an outcome-density target")
    rule = rule or gauss_hermite()
    ones = np.ones(data.n)

    def contrib(theta):
        nodes, probs = target.law(theta, data.X, rule)
        pi = weight_model.inclusion_prob(data.X, nodes)
        e_pi = expect(pi, probs)
        if np.any(e_pi < EPS_PI):
            raise DegenerateDenominator("E(pi | x) below tolerance")
        S_nodes = target.score(theta, data.X, nodes)
        e_piS = expect(pi[..., None] * S_nodes, probs)
        S = target.score(theta, data.X, data.y)
        return Contributions(S - e_piS / e_pi[:, None], ones)

    return ScoreFunction(contrib, target.q, float(data.n), "cml")


def estimate_cml(data: SurveyData, target, weight_model, rule=None, theta0=None) -> EstimateResult:
    """Conditional (sample-likelihood) ML with ``pi(x, y) = 1 / E_s(W | x, y)``."""
    sf = cml_score(data, target, weight_model, rule)
    if theta0 is None:
        theta0 = estimate_ht(data, target).theta_hat
    theta, diag = _solve(sf, theta0)
    return _finish("cml", sf, theta, diag, target.names)


# ---------------------------------------------------------------------------
# Efficient components
# ---------------------------------------------------------------------------


def _outer_sample(data: SurveyData):
    """Covariates and weights for the outer expectations of the Setting 2 constants."""
    if data.X_out is not None:
        Xp = data.X_pop
        return Xp, np.full(Xp.shape[0], 1.0 / Xp.shape[0])
    return data.X, data.w / data.w.sum()


class EfficientComponents:
    """The pair ``(D, C)`` of an efficient score for one target and variant.

    ``D(theta, X, y)`` is the sampled-unit kernel, ``C(theta, X)`` the
    augmentation evaluated at covariates ``X`` (constant in ``X`` for
    ``setting2``, zero for ``n_unknown`` / ``non_informative``).
    """

    def __init__(self, variant: str, target, q: int):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.target = target
        self.q = q
        self.clamped = 0
        self.warnings: list[str] = []

    @property
    def has_augmentation(self) -> bool:
        return self.variant in ("setting1", "setting2")

    def D(self, theta, X, y):
        raise NotImplementedError

    def C(self, theta, X):
        raise NotImplementedError


class _WeightNodes:
    """Caches ``E(W | x, node)`` for a fixed covariate array and working model."""

    def __init__(self, weight_model, working_model, rule):
        self.weight_model = weight_model
        self.working_model = working_model
        self.rule = rule
        self._cache = {}
        self.clamped = 0

    def get(self, X):
        key = id(X)
        hit = self._cache.get(key)
        if hit is not None and hit[0] is X:
            return hit[1]
        nodes, probs = self.working_model.law(X, self.rule)
        pi = self.weight_model.pi_bar(X, nodes, clamp=True)
        self.clamped += int(np.sum(pi <= EPS_PI))
        val = (nodes, probs, 1.0 / pi)
        if len(self._cache) > 8:
            self._cache.clear()
        self._cache[key] = (X, val)
        return val


class MeanComponents(EfficientComponents):
    """Target defined by ``E{U(theta; X, Y)} = 0`` (population mean for ``U = theta - y``)."""

    def __init__(self, variant, target, data: SurveyData, weight_model=None, working_model=None,
                 rule=None):
        super().__init__(variant, target, target.q)
        self.data = data
        self._nodes = None
        if weight_model is not None and working_model is not None:
            self._nodes = _WeightNodes(weight_model, working_model, rule or gauss_hermite())
        if variant == "setting1" and self._nodes is None:
            raise ValueError("Setting 1 needs weight and working models")
        if variant == "setting2":
            w = data.w
            self._ratio_w = w * (w - 1)
            if self._ratio_w.sum() / w.sum() < EPS_DEN:
                warnings.warn("weights are all close to 1; augmentation set to zero",
                              NonInformativeDegeneracy)
                self.warnings.append("NonInformativeDegeneracy")
                self.variant = "n_unknown"

    def D(self, theta, X, y):
        return self.target.u(theta, X, y)

    def cond_moments(self, theta, X):
        nodes, probs, ew = self._nodes.get(X)
        U = self.target.u(theta, X, nodes)
        num = expect((ew - 1.0)[..., None] * U, probs)
        den = expect(ew - 1.0, probs)
        return {"E(W-1|x)": den, "E{(W-1)U|x}": num}

    def C(self, theta, X):
        n = X.shape[0]
        if self.variant == "setting1":
            mom = self.cond_moments(theta, X)
            den = mom["E(W-1|x)"]
            if np.any(den < EPS_DEN):
                raise DegenerateDenominator("E(W - 1 | x) vanishes")
            return mom["E{(W-1)U|x}"] / den[:, None]
        if self.variant == "setting2":
            d = self.data
            U = self.target.u(theta, d.X, d.y)
            c = self._ratio_w @ U / self._ratio_w.sum()
            return np.broadcast_to(c, (n, self.q))
        return np.zeros((n, self.q))


class RegressionComponents(EfficientComponents):
    """Target ``mu(x; theta) = E(Y | x)``; moments against the working model."""

    def __init__(self, variant, target, data: SurveyData, weight_model, working_model, rule=None):
        super().__init__(variant, target, target.q)
        self.data = data
        self._nodes = _WeightNodes(weight_model, working_model, rule or gauss_hermite())
        self._base_cache = {}
        if variant == "setting2":
            self._outer = _outer_sample(data)

    def _base(self, X):
        """theta-free moments of ``W`` around the working-model mean ``c(x)``."""
        key = id(X)
        hit = self._base_cache.get(key)
        if hit is not None and hit[0] is X:
            return hit[1]
        nodes, probs, ew = self._nodes.get(X)
        c = expect(nodes, probs)
        yc = nodes - c[:, None]
        pe = probs * ew
        val = (c, expect(ew - 1.0, probs), pe.sum(axis=1), np.einsum("nk,nk->n", pe, yc),
               np.einsum("nk,nk->n", pe, yc * yc))
        self._base_cache[key] = (X, val)
        return val

    def cond_moments(self, theta, X):
        # eps = (y - c) - d with d = mu - c, so the node sums are computed once
        c, ew1, M0, M1, M2 = self._base(X)
        d = self.target.mu(theta, X) - c
        return {"E(W-1|x)": ew1,
                "E(W eps|x)": M1 - d * M0,
                "E(W eps^2|x)": M2 - 2.0 * d * M1 + d * d * M0}

    def _constant(self, theta):
        Xo, wo = self._outer
        mom = self.cond_moments(theta, Xo)
        ratio = mom["E(W eps|x)"] / mom["E(W eps^2|x)"]
        den = wo @ mom["E(W-1|x)"] - wo @ (ratio * mom["E(W eps|x)"])
        if den <= EPS_DEN:
            raise CauchySchwarzDegeneracy(f"Setting 2 denominator {den:.3g} is not positive")
        return (wo @ (ratio[:, None] * self.target.mu_dot(theta, Xo))) / den

    def _augment(self, theta, X, mom):
        n = X.shape[0]
        if self.variant == "setting1":
            ratio = mom["E(W eps|x)"] / mom["E(W eps^2|x)"]
            den = mom["E(W-1|x)"] - ratio * mom["E(W eps|x)"]
            bad = den <= EPS_DEN
            if np.any(bad):
                raise CauchySchwarzDegeneracy(
                    f"E(W-1|x) - E(W eps|x)^2 / E(W eps^2|x) <= {EPS_DEN} at x={X[bad][0]}",
                    x=X[bad][0])
            return (ratio / den)[:, None] * self.target.mu_dot(theta, X)
        if self.variant == "setting2":
            return np.broadcast_to(self._constant(theta), (n, self.q))
        return np.zeros((n, self.q))

    def A(self, theta, X):
        mom = self.cond_moments(theta, X)
        Cx = self._augment(theta, X, mom)
        mu_dot = self.target.mu_dot(theta, X)
        return (mom["E(W eps|x)"][:, None] * Cx + mu_dot) / mom["E(W eps^2|x)"][:, None]

    def D(self, theta, X, y):
        eps = y - self.target.mu(theta, X)
        return self.A(theta, X) * eps[:, None]

    def C(self, theta, X):
        if self.variant == "setting2":
            return np.broadcast_to(self._constant(theta), (X.shape[0], self.q))
        if self.variant == "setting1":
            return self._augment(theta, X, self.cond_moments(theta, X))
        return np.zeros((X.shape[0], self.q))


class OutcomeComponents(EfficientComponents):
    """Target ``f(y | x; theta)``; conditional moments taken at the current ``theta``."""

    def __init__(self, variant, target, data: SurveyData, weight_model, rule=None):
        super().__init__(variant, target, target.q)
        self.data = data
        self.weight_model = weight_model
        self.rule = rule or gauss_hermite()
        self._memo = {}
        if variant == "setting2":
            self._outer = _outer_sample(data)

    def pi(self, X, y):
        pi = self.weight_model.pi_bar(X, y, clamp=True)
        self.clamped += int(np.sum(pi <= EPS_PI))
        return pi

    def cond_moments(self, theta, X):
        key = (np.asarray(theta, dtype=float).tobytes(), id(X))
        hit = self._memo.get(key)
        if hit is not None and hit[0] is X:
            return hit[1]
        mom = self._cond_moments(theta, X)
        if len(self._memo) > 16:
            self._memo.clear()
        self._memo[key] = (X, mom)
        return mom

    def _cond_moments(self, theta, X):
        nodes, probs = self.target.law(theta, X, self.rule)
        pi = self.pi(X, nodes)
        S = self.target.score(theta, X, nodes)
        e_pi = expect(pi, probs)
        e_piS = expect(pi[..., None] * S, probs)
        if self.variant in ("setting1", "setting2") and np.any(np.abs(e_pi - 1.0) < EPS_DEN):
            warnings.warn("E(pi_bar | x) is 1; using the non-informative score",
                          NonInformativeDegeneracy)
            self.warnings.append("DegenerateDenominator")
            self.variant = "non_informative"
        return {"E(pi|x)": e_pi, "E(pi S|x)": e_piS}

    def _constant(self, theta):
        Xo, wo = self._outer
        mom = self.cond_moments(theta, Xo)
        k = mom["E(pi S|x)"] / mom["E(pi|x)"][:, None]
        den = 1.0 - wo @ (1.0 / mom["E(pi|x)"])
        if abs(den) < EPS_DEN:
            raise DegenerateDenominator("Setting 2 denominator vanishes")
        return (wo @ k) / den

    def _C_from(self, theta, X, mom):
        if self.variant == "setting1":
            return mom["E(pi S|x)"] / (mom["E(pi|x)"] - 1.0)[:, None]
        if self.variant == "setting2":
            return np.broadcast_to(self._constant(theta), (X.shape[0], self.q))
        return np.zeros((X.shape[0], self.q))

    def D(self, theta, X, y):
        S = self.target.score(theta, X, y)
        pi = self.pi(X, y)[:, None]
        if self.variant == "non_informative":
            return pi * S
        mom = self.cond_moments(theta, X)
        if self.variant == "non_informative":  # degenerate moments switch the variant
            return pi * S
        e_pi = mom["E(pi|x)"][:, None]
        out = pi * (S - mom["E(pi S|x)"] / e_pi)
        if self.variant in ("setting1", "setting2"):
            out = out + (1.0 - pi / e_pi) * self._C_from(theta, X, mom)
        return out

    def C(self, theta, X):
        if self.variant == "setting1":
            return self._C_from(theta, X, self.cond_moments(theta, X))
        if self.variant == "setting2":
            return np.broadcast_to(self._constant(theta), (X.shape[0], self.q))
        return np.zeros((X.shape[0], self.q))


def efficient_components_mean(data, target, variant, weight_model=None, working_model=None,
                              rule=None) -> MeanComponents:
    return MeanComponents(variant, target, data, weight_model, working_model, rule)


def efficient_components_regression(data, target, variant, weight_model, working_model,
                                    rule=None) -> RegressionComponents:
    return RegressionComponents(variant, target, data, weight_model, working_model, rule)


def efficient_components_outcome(data, target, variant, weight_model,
                                 rule=None) -> OutcomeComponents:
    return OutcomeComponents(variant, target, data, weight_model, rule)


def efficient_components(data, target, variant, weight_model=None, working_model=None, rule=None):
    if target.kind == "ee":
        return efficient_components_mean(data, target, variant, weight_model, working_model, rule)
    if target.kind == "reg":
        return efficient_components_regression(data, target, variant, weight_model,
                                               working_model, rule)
    return efficient_components_outcome(data, target, variant, weight_model, rule)


def efficient_score(comp: EfficientComponents, data: SurveyData, label="") -> ScoreFunction:
    """Assemble ``sum delta W D + (1 - delta W) C`` over the ``N`` units."""
    w = data.w[:, None]
    if comp.variant == "setting1" and data.X_out is None:
        raise ValueError("Setting 1 score needs the covariates of non-sampled units")
    if comp.variant in ("setting1", "setting2") and data.N is None:
        raise ValueError("augmented score needs N")

    def contrib(theta):
        D = comp.D(theta, data.X, data.y)
        v = comp.variant
        if v == "setting1":
            rows = np.vstack([w * D + (1 - w) * comp.C(theta, data.X), comp.C(theta, data.X_out)])
            return Contributions(rows, np.ones(rows.shape[0]))
        if v == "setting2":
            c = np.asarray(comp.C(theta, data.X[:1]))[0]
            rows = np.vstack([w * D + (1 - w) * c, c[None, :]])
            counts = np.append(np.ones(data.n), data.N - data.n)
            return Contributions(rows, counts)
        return Contributions(w * D, np.ones(data.n))

    n_eff = float(data.N) if comp.has_augmentation else data.n_hat
    return ScoreFunction(contrib, comp.q, n_eff, label)


def efficient_label(target, variant) -> str:
    kind = {"ee": "mean", "reg": "reg", "out": "out"}[target.kind]
    return f"eff-{kind}-{VARIANT_CODES[variant]}"


def estimate_efficient(data: SurveyData, target, variant: str, weight_model=None,
                       working_model=None, rule=None, theta0=None, label=None) -> EstimateResult:
    """Root of the efficient score for ``target`` under ``variant``."""
    comp = efficient_components(data, target, variant, weight_model, working_model, rule)
    label = label or efficient_label(target, variant)
    sf = efficient_score(comp, data, label)
    if theta0 is None:
        theta0 = estimate_ht(data, target).theta_hat
    theta, diag = _solve(sf, theta0)
    nodes = getattr(comp, "_nodes", None)
    clamped = comp.clamped + (nodes.clamped if nodes is not None else 0)
    info = {"variant": comp.variant, "clamped_nodes": int(clamped)}
    if comp.warnings:
        info["warnings"] = list(comp.warnings)
    return _finish(label, sf, theta, diag, target.names, info)


def estimate_mean_efficient(data: SurveyData, variant: str, weight_model=None,
                            working_model=None, rule=None) -> float:
    """Closed-form efficient mean estimators.

    ``n_unknown`` / ``non_informative`` give the Hajek (HT) mean; ``setting2``
    uses the sample ratio ``sum W(W-1) y / sum W(W-1)``; ``setting1`` integrates
    ``E(W | x, y)`` against the working model for every population unit.
    """
    w, y = data.w, data.y
    if variant in ("n_unknown", "non_informative"):
        return float(w @ y / w.sum())
    N = data.N
    if variant == "setting2":
        r = w * (w - 1)
        if r.sum() / w.sum() < EPS_DEN:
            return float(w @ y / w.sum())
        fill = r @ y / r.sum()
        return float((w @ y + (N - w.sum()) * fill) / N)
    rule = rule or gauss_hermite()

    def ratio(X):
        nodes, probs = working_model.law(X, rule)
        ew1 = 1.0 / weight_model.pi_bar(X, nodes, clamp=True) - 1.0
        return expect(ew1 * nodes, probs) / expect(ew1, probs)

    rs, ro = ratio(data.X), ratio(data.X_out)
    return float((w @ y + (1 - w) @ rs + ro.sum()) / N)


# ---------------------------------------------------------------------------
# Estimator dispatch by name
# ---------------------------------------------------------------------------


def variant_from_flags(setting: int, n_known: bool, informative: bool = True) -> str:
    return score_variant(setting, n_known, informative)
