"""Data model, validation and weighted empirical moments.

A survey sample is stored as a :class:`SurveyData` object holding the
sampled units (covariates ``X``, response ``y``, design weight ``w``) and,
when the population covariates are known (Setting 1), the covariates of the
non-sampled units.  The finite population size ``N`` is carried explicitly
and is never inferred from the number of records.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

EPS_DEN = 1e-8
EPS_PI = 1e-10


# ---------------------------------------------------------------------------
# Exceptions
# ---------------------------------------------------------------------------


class IsampError(Exception):
    """Base class for every error raised by the package."""


class ValidationError(IsampError):
    """Dataset or design failed validation.

    ``violations`` holds every problem found, as ``(kind, unit_index, message)``.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        msg = "; ".join(f"{k} at unit {i}: {m}" for k, i, m in self.violations[:10])
        if len(self.violations) > 10:
            msg += f" (+{len(self.violations) - 10} more)"
        super().__init__(msg)


class MissingField(ValidationError):
    pass


class WeightOutOfRange(ValidationError):
    pass


class SettingMismatch(ValidationError):
    pass


class EmptySample(IsampError):
    pass


class DomainError(IsampError, ValueError):
    pass


class NumericalError(IsampError):
    """Base class for numeric failures (CLI exit code 3)."""


class NonConvergence(NumericalError):
    pass


class SingularDesign(NumericalError):
    pass


class SingularJacobian(NumericalError):
    pass


class SingularBread(NumericalError):
    pass


class BoundaryHit(NumericalError):
    pass


class ComponentCollapse(NumericalError):
    pass


class DegenerateResponsibility(NumericalError):
    pass


class InfiniteMoment(NumericalError):
    pass


class NonFiniteIntegrand(NumericalError):
    pass


class DegenerateDenominator(NumericalError):
    pass


class CauchySchwarzDegeneracy(NumericalError):
    def __init__(self, msg, x=None):
        super().__init__(msg)
        self.x = x


class NonInformativeDegeneracy(UserWarning):
    """Weights carry no information; augmentation falls back to zero."""


# ---------------------------------------------------------------------------
# Records and design
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UnitRecord:
    """One population or sample unit.

    ``y`` and ``w`` are required when ``delta == 1``.  ``x`` may be ``None``
    for non-sampled units in Setting 2.
    """

    x: tuple | None
    y: float | None
    w: float | None
    delta: int
    stratum: int | None = None


POISSON = "poisson"
STRATIFIED = "stratified"


@dataclass(frozen=True)
class StudyDesign:
    setting: int = 2
    n_known: bool = False
    N: int | None = None
    target: object | None = None
    mechanism: str = POISSON
    H: int = 1
    informative: bool = True

    def __post_init__(self):
        if self.setting not in (1, 2):
            raise ValueError("setting must be 1 or 2")
        if self.setting == 1 and not self.n_known:
            raise ValueError("Setting 1 implies N is known")
        if self.mechanism not in (POISSON, STRATIFIED):
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        if self.mechanism == STRATIFIED and self.H < 1:
            raise ValueError("stratified design requires H >= 1")
        if self.N is not None and self.N <= 0:
            raise ValueError("N must be positive")

    @property
    def variant(self) -> str:
        """Efficient-score variant implied by the design."""
        return score_variant(self.setting, self.n_known, self.informative)


def score_variant(setting: int, n_known: bool, informative: bool = True) -> str:
    if not informative:
        return "non_informative"
    if not n_known:
        return "n_unknown"
    return "setting1" if setting == 1 else "setting2"


def _frozen(a):
    if a is None:
        return None
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SurveyData:
    """Validated survey sample.

    Attributes
    ----------
    X, y, w : arrays for the ``n`` sampled units (``X`` is ``(n, p)``).
    X_out : covariates of the ``N - n`` non-sampled units, or ``None`` when
        they are unavailable (Setting 2).
    N : population size, or ``None`` when unknown.
    strata : optional integer stratum labels of sampled units.
    """

    X: np.ndarray
    y: np.ndarray
    w: np.ndarray
    X_out: np.ndarray | None = None
    N: int | None = None
    strata: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "y", _frozen(np.ravel(self.y)))
        object.__setattr__(self, "w", _frozen(np.ravel(self.w)))
        if self.X_out is not None:
            Xo = np.asarray(self.X_out, dtype=float)
            if Xo.ndim == 1:
                Xo = Xo.reshape(-1, X.shape[1])
            object.__setattr__(self, "X_out", _frozen(Xo))
            if self.N is None:
                object.__setattr__(self, "N", X.shape[0] + Xo.shape[0])
        if self.strata is not None:
            s = np.asarray(self.strata, dtype=int)
            s.setflags(write=False)
            object.__setattr__(self, "strata", s)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def setting(self) -> int:
        return 1 if self.X_out is not None else 2

    @property
    def n_known(self) -> bool:
        return self.N is not None

    @property
    def n_hat(self) -> float:
        """Horvitz-Thompson estimate of the population size."""
        return float(self.w.sum())

    @property
    def X_pop(self) -> np.ndarray | None:
        if self.X_out is None:
            return None
        return np.vstack([self.X, self.X_out])

    def as_setting2(self, n_known: bool = True) -> "SurveyData":
        """Drop the non-sampled covariates (and optionally ``N``)."""
        return SurveyData(self.X, self.y, self.w, None, self.N if n_known else None,
                          self.strata, dict(self.extra))

    def with_weights(self, w) -> "SurveyData":
        return SurveyData(self.X, self.y, w, self.X_out, self.N, self.strata, dict(self.extra))

    def __eq__(self, other):
        if not isinstance(other, SurveyData):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is b
            return a.shape == b.shape and np.array_equal(a, b)

        return (same(self.X, other.X) and same(self.y, other.y) and same(self.w, other.w)
                and same(self.X_out, other.X_out) and self.N == other.N
                and same(self.strata, other.strata))


def validate_dataset(records: Iterable[UnitRecord] | SurveyData,
                     design: StudyDesign | None = None) -> SurveyData:
    """Check records against the data-model invariants and pack them.

    Raises a :class:`ValidationError` subclass (chosen by the first problem)
    carrying the full list of violations.  Validating a :class:`SurveyData`
    re-checks it and returns an equal object.
    """
    if isinstance(records, SurveyData):
        records = list(to_records(records))
    records = list(records)
    if not records:
        raise EmptySample("no records")
    setting = design.setting if design is not None else None
    violations = []
    Xs, ys, ws, Xo, strata = [], [], [], [], []
    n_out = 0
    for i, r in enumerate(records):
        if r.delta not in (0, 1):
            violations.append(("MissingField", i, f"delta must be 0/1, got {r.delta!r}"))
            continue
        if r.delta == 1:
            bad = False
            for name in ("x", "y", "w"):
                v = getattr(r, name)
                if v is None or (np.ndim(v) == 0 and not np.isfinite(v)):
                    violations.append(("MissingField", i, f"sampled unit lacks {name}"))
                    bad = True
            if bad:
                continue
            if not r.w > 1.0:
                violations.append(("WeightOutOfRange", i, f"w={r.w} must exceed 1"))
                continue
            Xs.append(np.atleast_1d(np.asarray(r.x, dtype=float)))
            ys.append(float(r.y))
            ws.append(float(r.w))
            strata.append(r.stratum)
        else:
            n_out += 1
            if r.x is None:
                if setting == 1:
                    violations.append(("SettingMismatch", i, "Setting 1 requires x for every unit"))
            else:
                Xo.append(np.atleast_1d(np.asarray(r.x, dtype=float)))
    if violations:
        kinds = {"MissingField": MissingField, "WeightOutOfRange": WeightOutOfRange,
                 "SettingMismatch": SettingMismatch}
        raise kinds[violations[0][0]](violations)
    n = len(ys)
    if n == 0:
        raise EmptySample("no sampled units")
    p = {len(x) for x in Xs + Xo}
    if len(p) > 1:
        raise MissingField([("MissingField", -1, f"inconsistent covariate dimension {sorted(p)}")])
    if Xo and len(Xo) != n_out:
        if setting == 1:
            raise SettingMismatch([("SettingMismatch", -1, "partial population covariates")])
        Xo = []
    if setting == 2:
        Xo = []
    N = None
    if design is not None and design.n_known:
        N = design.N if design.N is not None else n + n_out
    elif design is None and n_out:
        N = n + n_out
    if N is not None and N < n:
        raise ValidationError([("SettingMismatch", -1, f"N={N} smaller than n={n}")])
    if Xo and N is not None and N != n + len(Xo):
        raise SettingMismatch([("SettingMismatch", -1, "N disagrees with record count")])
    st = None if any(s is None for s in strata) else np.array(strata, dtype=int)
    return SurveyData(np.array(Xs), np.array(ys), np.array(ws),
                      np.array(Xo) if Xo else None, N, st)


def to_records(data: SurveyData):
    """Yield :class:`UnitRecord` objects for a dataset in stable order."""
    for i in range(data.n):
        st = None if data.strata is None else int(data.strata[i])
        yield UnitRecord(tuple(data.X[i]), float(data.y[i]), float(data.w[i]), 1, st)
    if data.X_out is not None:
        for x in data.X_out:
            yield UnitRecord(tuple(x), None, None, 0)
    elif data.N is not None:
        for _ in range(data.N - data.n):
            yield UnitRecord(None, None, None, 0)


def ht_moment(h: Callable, data: SurveyData, use_known_N: bool = True) -> np.ndarray:
    """Horvitz-Thompson moment ``(1/D) sum_i delta_i W_i h(x_i, y_i)``.

    ``D`` is ``N`` when ``use_known_N`` (and ``N`` is available), otherwise
    the estimated population size ``sum_i delta_i W_i``.
    """
    if data.n == 0:
        raise EmptySample("no sampled units")
    vals = np.asarray(h(data.X, data.y), dtype=float)
    if vals.ndim == 0:
        vals = np.full(data.n, float(vals))
    vals = vals.reshape(data.n, -1)
    if use_known_N:
        if data.N is None:
            raise ValueError("N is unknown")
        denom = float(data.N)
    else:
        denom = data.n_hat
    return data.w @ vals / denom


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------


def _bcast(a, y):
    """Reshape a per-unit array ``(n, ...)`` so it broadcasts against ``y``."""
    a = np.asarray(a)
    y = np.asarray(y)
    if y.ndim <= 1:
        return a
    return a.reshape(a.shape[:1] + (1,) * (y.ndim - 1) + a.shape[1:])


class EstimatingEquationTarget:
    """Parameter defined through ``E{U(theta; X, Y)} = 0``."""

    kind = "ee"

    def __init__(self, u: Callable, q: int, names: Sequence[str] | None = None,
                 initial: Callable | None = None):
        self._u = u
        self.q = q
        self.names = list(names) if names else [f"theta{j}" for j in range(q)]
        self._initial = initial

    def u(self, theta, X, y):
        out = np.asarray(self._u(np.asarray(theta, dtype=float), X, np.asarray(y, dtype=float)))
        if out.shape[-1] != self.q or out.ndim != np.ndim(y) + 1:
            raise ValueError(f"U returned shape {out.shape}, expected trailing dim {self.q}")
        return out

    kernel = u

    def initial(self, X, y, w):
        if self._initial is not None:
            return np.asarray(self._initial(X, y, w), dtype=float)
        return np.zeros(self.q)


class RegressionTarget:
    """Parameter of a regression mean ``E(Y | x) = mu(x; theta)``."""

    kind = "reg"

    def __init__(self, mu: Callable, mu_dot: Callable, q: int,
                 names: Sequence[str] | None = None, initial: Callable | None = None):
        self._mu = mu
        self._mu_dot = mu_dot
        self.q = q
        self.names = list(names) if names else [f"theta{j}" for j in range(q)]
        self._initial = initial

    def mu(self, theta, X):
        return np.asarray(self._mu(X, np.asarray(theta, dtype=float)), dtype=float)

    def mu_dot(self, theta, X):
        out = np.asarray(self._mu_dot(X, np.asarray(theta, dtype=float)), dtype=float)
        if out.shape != (X.shape[0], self.q):
            raise ValueError(f"mu_dot returned shape {out.shape}, expected {(X.shape[0], self.q)}")
        return out

    def kernel(self, theta, X, y):
        eps = y - _bcast(self.mu(theta, X), y)
        return _bcast(self.mu_dot(theta, X), y) * eps[..., None]

    def initial(self, X, y, w):
        if self._initial is not None:
            return np.asarray(self._initial(X, y, w), dtype=float)
        return np.zeros(self.q)


class OutcomeDensityTarget:
    """Parameter of an outcome density ``f(y | x; theta)``.

    ``law(theta, X, rule)`` returns ``(nodes, probs)`` arrays of shape
    ``(n, K)`` representing ``f(. | x_i; theta)`` for quadrature.
    """

    kind = "out"

    def __init__(self, logf: Callable, score: Callable, law: Callable, q: int,
                 names: Sequence[str] | None = None, initial: Callable | None = None):
        self._logf = logf
        self._score = score
        self._law = law
        self.q = q
        self.names = list(names) if names else [f"theta{j}" for j in range(q)]
        self._initial = initial

    def logf(self, theta, X, y):
        return np.asarray(self._logf(y, X, np.asarray(theta, dtype=float)))

    def score(self, theta, X, y):
        out = np.asarray(self._score(np.asarray(y, dtype=float), X, np.asarray(theta, dtype=float)))
        if out.shape[-1] != self.q:
            raise ValueError(f"score returned trailing dim {out.shape[-1]}, expected {self.q}")
        return out

    kernel = score

    def law(self, theta, X, rule=None):
        return self._law(np.asarray(theta, dtype=float), X, rule)

    def initial(self, X, y, w):
        if self._initial is not None:
            return np.asarray(self._initial(X, y, w), dtype=float)
        return np.zeros(self.q)


def design_with_intercept(X):
    X = np.asarray(X, dtype=float)
    return np.column_stack([np.ones(X.shape[0]), X])


def weighted_ls(X, y, w):
    """Weighted least squares with intercept: ``(coef, sigma2)``."""
    Z = design_with_intercept(X)
    G = Z.T @ (w[:, None] * Z)
    if np.linalg.matrix_rank(G) < G.shape[0]:
        raise SingularDesign("weighted Gram matrix is rank-deficient")
    coef = np.linalg.solve(G, Z.T @ (w * y))
    r = y - Z @ coef
    return coef, float(w @ r**2 / w.sum())


def mean_target() -> EstimatingEquationTarget:
    """Population mean of ``Y``, with ``U = theta - y``."""
    return EstimatingEquationTarget(
        lambda th, X, y: (th[0] - y)[..., None], 1, ["mean"],
        initial=lambda X, y, w: np.array([w @ y / w.sum()]))


def linear_regression_target(p: int = 1) -> RegressionTarget:
    """``mu(x; theta) = theta_0 + x' theta_{1:}``."""
    names = ["a", "b"] if p == 1 else ["a"] + [f"b{j + 1}" for j in range(p)]
    t = RegressionTarget(
        lambda X, th: th[0] + X @ th[1:],
        lambda X, th: design_with_intercept(X),
        p + 1, names,
        initial=lambda X, y, w: weighted_ls(X, y, w)[0])
    t._linear = True
    return t


def normal_linear_target(p: int = 1) -> OutcomeDensityTarget:
    """``Y | x ~ Normal(theta_0 + x' theta_{1:p}, theta_{p+1})``."""
    from .outcome_model import normal_law

    def logf(y, X, th):
        mu = _bcast(th[0] + X @ th[1:-1], y)
        s2 = th[-1]
        return -0.5 * np.log(2 * np.pi * s2) - 0.5 * (y - mu) ** 2 / s2

    def score(y, X, th):
        Z = design_with_intercept(X)
        mu = _bcast(Z @ th[:-1], y)
        s2 = th[-1]
        r = y - mu
        lin = _bcast(Z, y) * (r / s2)[..., None]
        var = (-0.5 / s2 + 0.5 * r**2 / s2**2)[..., None]
        return np.concatenate([lin, var], axis=-1)

    def law(th, X, rule):
        if th[-1] <= 0:
            raise DomainError("variance parameter must be positive")
        return normal_law(th[0] + X @ th[1:-1], th[-1], rule)

    def initial(X, y, w):
        coef, s2 = weighted_ls(X, y, w)
        return np.append(coef, s2)

    names = (["a", "b"] if p == 1 else ["a"] + [f"b{j + 1}" for j in range(p)]) + ["sigma2"]
    t = OutcomeDensityTarget(logf, score, law, p + 2, names, initial=initial)
    t._normal_linear = True
    return t


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass
class EstimateResult:
    label: str
    theta_hat: np.ndarray
    vcov: np.ndarray
    iterations: int = 0
    converged: bool = True
    score_norm: float = 0.0
    names: list = field(default_factory=list)
    n_eff: float = float("nan")
    info: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    def as_dict(self) -> dict:
        return {
            "label": self.label,
            "names": list(self.names),
            "theta_hat": [float(v) for v in self.theta_hat],
            "se": [float(v) for v in self.se],
            "vcov": [[float(v) for v in row] for row in self.vcov],
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "score_norm": float(self.score_norm),
            "n_eff": float(self.n_eff),
            "info": {k: v for k, v in self.info.items()},
        }
