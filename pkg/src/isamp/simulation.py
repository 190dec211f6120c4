"""Monte Carlo scenarios S1-S4 and the replicated-study harness.

Populations follow ``x, z ~ N(0, 1/2)``, ``y | x, z ~ N(x - z, 1/2)`` (so
``Y | x ~ N(x, 1)`` and ``theta = (0, 1, 1)``) with ``1/w ~ Beta(m phi,
(1 - m) phi)``.  Each replication has its own counter-based random stream
derived from ``(seed, rep)``, so replications are order independent.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import weight_model as wm
from .core import (IsampError, NumericalError, SurveyData, linear_regression_target,
                   normal_linear_target)
from .estimators import estimate_cc, estimate_cml, estimate_efficient, estimate_ht
from .outcome_model import fit_gamma_ht, gauss_hermite

log = logging.getLogger(__name__)

SCENARIOS = ("S1", "S2", "S3", "S4")
DEFAULT_N = {"S1": (5000, 25000), "S2": (5000, 25000), "S3": (5000, 25000), "S4": (10000, 50000)}
ROSTER = ("cc", "ht", "cml", "eff-reg-00", "eff-reg-10", "eff-reg-11",
          "eff-out-00", "eff-out-10", "eff-out-11")
EFFICIENT = ROSTER[3:]
TRUTH = {"a": 0.0, "b": 1.0, "sigma2": 1.0}
MAX_FAILURE_RATE = 0.10
_VARIANT = {"00": "n_unknown", "10": "setting2", "11": "setting1"}


class StudyAborted(NumericalError):
    """More than 10% of the replications failed for some estimator."""


@dataclass(frozen=True)
class ScenarioSpec:
    id: str
    N: int
    seed: int = 0
    phi: float = 2500.0
    alpha: tuple = (12.0, -8.0, 10.0, -4.0)
    m_strata: tuple = (0.01, 0.02, 0.2)
    phi_strata: tuple = (30000.0, 10000.0, 5000.0)

    def __post_init__(self):
        if self.id not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.id!r}")
        if self.N <= 0:
            raise ValueError("N must be positive")

    def logit_m(self, x, y, z):
        if self.id == "S1":
            return np.full_like(x, -3.2)
        if self.id == "S2":
            return -3.4 + 0.3 * x + 0.5 * y
        return -3.4 + 0.25 * x + 0.25 * z + 0.1 * y**2

    def stratum_probs(self, y):
        """S4 mixture proportions ``P(G = g | y)``, shape ``(n, 3)``."""
        a20, a21, a30, a31 = self.alpha
        eta = np.stack([np.zeros_like(y), a20 + a21 * y, a30 + a31 * y], axis=-1)
        eta -= eta.max(axis=-1, keepdims=True)
        p = np.exp(eta)
        return p / p.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class Population:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    w: np.ndarray
    stratum: np.ndarray | None = None


def rng_for(seed: int, rep: int, stream: int = 0) -> np.random.Generator:
    """Philox generator for replication ``rep`` (and sub-stream ``stream``)."""
    ss = np.random.SeedSequence(seed, spawn_key=(rep, stream))
    return np.random.Generator(np.random.Philox(ss))


def beta_variates(rng, a, b):
    """Beta(a, b) through two gamma draws."""
    g1 = rng.standard_gamma(a)
    g2 = rng.standard_gamma(b)
    return g1 / (g1 + g2)


def generate_population(spec: ScenarioSpec, rep: int = 0) -> Population:
    rng = rng_for(spec.seed, rep, 0)
    N = spec.N
    sd = np.sqrt(0.5)
    x = rng.normal(0.0, sd, N)
    z = rng.normal(0.0, sd, N)
    y = rng.normal(x - z, sd)
    stratum = None
    if spec.id == "S4":
        cum = np.cumsum(spec.stratum_probs(y), axis=1)
        stratum = (rng.random(N)[:, None] > cum[:, :-1]).sum(axis=1)
        m = np.asarray(spec.m_strata)[stratum]
        phi = np.asarray(spec.phi_strata)[stratum]
    else:
        m = 1.0 / (1.0 + np.exp(-spec.logit_m(x, y, z)))
        phi = np.full(N, spec.phi)
    u = beta_variates(rng, m * phi, (1.0 - m) * phi)
    u = np.minimum(u, np.nextafter(1.0, 0.0))
    return Population(x, y, z, 1.0 / u, None if stratum is None else stratum + 1)


def draw_sample(pop: Population, rng: np.random.Generator, setting: int = 1) -> SurveyData:
    """Poisson sample with inclusion probability ``1/w``.

    Setting 1 keeps the covariates of non-sampled units; Setting 2 keeps only
    ``N``.
    """
    delta = rng.random(pop.w.shape[0]) < 1.0 / pop.w
    strata = None if pop.stratum is None else pop.stratum[delta]
    X_out = pop.x[~delta][:, None] if setting == 1 else None
    return SurveyData(pop.x[delta][:, None], pop.y[delta], pop.w[delta], X_out,
                      int(pop.w.shape[0]), strata)


def fit_weight_model(spec: ScenarioSpec, data: SurveyData):
    """Analysis weight model: beta-prime with ``logit m = b0 + b1 x + b2 y`` (S1-S3), a
    3-component mixture with proportions in ``y`` (S4)."""
    if spec.id == "S4":
        return wm.em_fit_mixture(data.w, data.X, data.y, H=3, prop_terms="y", comp_terms="")
    return wm.fit_single(data.w, data.X, data.y, terms="xy")


def run_replication(spec: ScenarioSpec, rep: int, estimators=ROSTER, quad_nodes: int = 20):
    """One replication; returns a list of row dicts (one per estimator)."""
    pop = generate_population(spec, rep)
    data = draw_sample(pop, rng_for(spec.seed, rep, 1), setting=1)
    rows = []
    base = {"rep": rep, "n": data.n}
    try:
        wmod, _ = fit_weight_model(spec, data)
        work = fit_gamma_ht(data)
    except IsampError as exc:
        for est in estimators:
            rows.append(dict(base, estimator=est, ok=False, error=type(exc).__name__))
        return rows
    rule = gauss_hermite(quad_nodes)
    out_t, reg_t = normal_linear_target(1), linear_regression_target(1)
    ht_out = None
    for est in estimators:
        row = dict(base, estimator=est)
        try:
            if est == "cc":
                res = estimate_cc(data, out_t)
            elif est == "ht":
                res = ht_out = estimate_ht(data, out_t)
            elif est == "cml":
                ht_out = ht_out or estimate_ht(data, out_t)
                res = estimate_cml(data, out_t, wmod, rule, theta0=ht_out.theta_hat)
            else:
                _, kind, code = est.split("-")
                variant = _VARIANT[code]
                d = {"n_unknown": data.as_setting2(False), "setting2": data.as_setting2(True),
                     "setting1": data}[variant]
                if kind == "reg":
                    res = estimate_efficient(d, reg_t, variant, wmod, work, rule, label=est)
                else:
                    ht_out = ht_out or estimate_ht(data, out_t)
                    res = estimate_efficient(d, out_t, variant, wmod, work, rule,
                                             theta0=ht_out.theta_hat, label=est)
            if not res.converged:
                raise NumericalError(f"not converged: {res.info.get('solver')}")
            row["ok"] = True
            for name, v, s in zip(res.names, res.theta_hat, res.se):
                row[name] = float(v)
                row[f"se_{name}"] = float(s)
        except (IsampError, np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
            log.warning("rep %d %s failed: %s", rep, est, exc)
            row.update(ok=False, error=type(exc).__name__)
        rows.append(row)
    return rows


REP_COLUMNS = ["rep", "estimator", "n", "ok", "error", "a", "b", "sigma2",
               "se_a", "se_b", "se_sigma2"]
SUMMARY_COLUMNS = ["estimator", "component", "reps", "failures", "truth", "mean", "bias", "sd",
                   "mean_se", "coverage"]


@dataclass
class StudySummary:
    spec: ScenarioSpec
    reps: int
    rows: list = field(default_factory=list)
    table: list = field(default_factory=list)

    def get(self, estimator, component="b"):
        for r in self.table:
            if r["estimator"] == estimator and r["component"] == component:
                return r
        raise KeyError((estimator, component))

    def values(self, estimator, component="b"):
        return np.array([r[component] for r in self.rows
                         if r["estimator"] == estimator and r.get("ok")], dtype=float)

    def ses(self, estimator, component="b"):
        return np.array([r[f"se_{component}"] for r in self.rows
                         if r["estimator"] == estimator and r.get("ok")], dtype=float)


def summarize(spec: ScenarioSpec, reps: int, rows, estimators=ROSTER) -> StudySummary:
    table = []
    for est in estimators:
        mine = [r for r in rows if r["estimator"] == est]
        good = [r for r in mine if r.get("ok")]
        fails = len(mine) - len(good)
        comps = ["a", "b"] if est.startswith("eff-reg") else ["a", "b", "sigma2"]
        for c in comps:
            v = np.array([r[c] for r in good], dtype=float)
            s = np.array([r[f"se_{c}"] for r in good], dtype=float)
            t = TRUTH[c]
            k = v.shape[0]
            mean = float(v.mean()) if k else float("nan")
            table.append({
                "estimator": est, "component": c, "reps": k, "failures": fails, "truth": t,
                "mean": mean, "bias": mean - t,
                "sd": float(v.std(ddof=1)) if k > 1 else 0.0,
                "mean_se": float(s.mean()) if k else float("nan"),
                "coverage": float(np.mean(np.abs(v - t) <= 1.96 * s)) if k else float("nan"),
            })
    return StudySummary(spec, reps, list(rows), table)


def config_hash(spec: ScenarioSpec, reps: int, estimators, quad_nodes: int) -> str:
    doc = json.dumps({"spec": asdict(spec), "estimators": list(estimators),
                      "quad_nodes": quad_nodes, "version": 1}, sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".17g")
    if v is None:
        return ""
    return str(v)


def _parse_row(r):
    out = {"rep": int(r["rep"]), "estimator": r["estimator"], "n": int(r["n"]),
           "ok": r["ok"] == "True"}
    if r.get("error"):
        out["error"] = r["error"]
    for c in REP_COLUMNS[5:]:
        if r.get(c):
            out[c] = float(r[c])
    return out


def read_reps_csv(path):
    with open(path, newline="") as fh:
        return [_parse_row(r) for r in csv.DictReader(fh)]


def write_reps_csv(path, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(REP_COLUMNS)
        for r in rows:
            wr.writerow([_fmt(r.get(c)) for c in REP_COLUMNS])


def write_summary_csv(path, summary: StudySummary):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(SUMMARY_COLUMNS)
        for r in summary.table:
            wr.writerow([_fmt(r[c]) for c in SUMMARY_COLUMNS])


def _rep_job(args):
    spec, rep, estimators, quad_nodes = args
    return run_replication(spec, rep, estimators, quad_nodes)


def run_study(spec: ScenarioSpec, reps: int, estimators=ROSTER, quad_nodes: int = 20,
              threads: int = 1, cache_dir: str | None = None, progress=None) -> StudySummary:
    """Run ``reps`` replications and aggregate them.

    With ``cache_dir`` the per-replication rows are checkpointed in a CSV
    named after a hash of the configuration, so an interrupted study resumes
    where it stopped and a finished one is read back without recomputation.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    estimators = tuple(estimators)
    done = {}
    cache = None
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        cache = os.path.join(cache_dir, f"{spec.id}_{spec.N}_{config_hash(spec, reps, estimators, quad_nodes)}.csv")
        if os.path.exists(cache):
            for r in read_reps_csv(cache):
                done.setdefault(r["rep"], []).append(r)
    todo = [r for r in range(reps) if r not in done]
    fh = None
    if cache and todo:
        new = not os.path.exists(cache)
        fh = open(cache, "a", newline="")
        wr = csv.writer(fh, lineterminator="\n")
        if new:
            wr.writerow(REP_COLUMNS)
    try:
        jobs = [(spec, r, estimators, quad_nodes) for r in todo]
        if threads > 1 and len(jobs) > 1:
            pool = ProcessPoolExecutor(max_workers=threads)
            results = pool.map(_rep_job, jobs)
        else:
            pool = None
            results = map(_rep_job, jobs)
        for rows in results:
            rep = rows[0]["rep"]
            done[rep] = rows
            if fh is not None:
                for r in rows:
                    wr.writerow([_fmt(r.get(c)) for c in REP_COLUMNS])
                fh.flush()
            if progress:
                progress(rep, rows)
        if pool is not None:
            pool.shutdown()
    finally:
        if fh is not None:
            fh.close()
    rows = [r for rep in range(reps) for r in done[rep]]
    summary = summarize(spec, reps, rows, estimators)
    for r in summary.table:
        if r["failures"] > MAX_FAILURE_RATE * reps:
            raise StudyAborted(f"{r['estimator']}: {r['failures']} of {reps} replications failed")
    return summary
