"""Command-line interface: ``isamp validate | fit | simulate``.

Exit codes: 0 success, 1 failed validation oracle, 2 input error,
3 numerical failure (partial results are still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from . import weight_model as wm
from .core import (IsampError, NumericalError, StudyDesign, UnitRecord, ValidationError,
                   linear_regression_target, mean_target, normal_linear_target, validate_dataset)
from .estimators import (estimate_cc, estimate_cml, estimate_efficient, estimate_ht)
from .outcome_model import fit_gamma_ht, gauss_hermite

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
ESTIMATORS = ("cc", "ht", "cml", "eff-mean", "eff-reg", "eff-out")

log = logging.getLogger("isamp")


def _bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("true", "1", "yes", "y"):
        return True
    if v in ("false", "0", "no", "n"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {s!r}")


def _fmt(v) -> str:
    return format(float(v), ".17g")


@dataclass
class RunConfig:
    command: str
    data: str | None = None
    pop_x: str | None = None
    target: str = "out"
    estimators: list = field(default_factory=lambda: ["cc", "ht"])
    setting: int = 2
    n_known: bool = False
    N: int | None = None
    informative: bool = True
    strata: int = 1
    weight_terms: str = "xy"
    prop_terms: str = "y"
    quad_nodes: int = 20
    seed: int = 0
    out: str = "."
    scenario: str | None = None
    reps: int = 1
    threads: int = 1
    inject_fault: str | None = None
    quick: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def _cell(v):
    v = (v or "").strip()
    return None if v == "" else float(v)


def read_dataset_csv(path: str, pop_x: str | None = None):
    """Records from the dataset CSV (columns ``x1..xp, y, w, delta, stratum``).

    A single covariate column may be named ``x``.  A missing ``delta``
    column means every row is sampled.  ``pop_x`` adds the covariates of
    the non-sampled units as ``delta = 0`` records.
    """
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames is None:
            raise ValidationError([("MissingField", -1, f"{path}: empty file or missing header")])
        cols = [c.strip() for c in rd.fieldnames]
        xcols = sorted((c for c in cols if c.startswith("x") and c[1:].isdigit()),
                       key=lambda c: int(c[1:])) or (["x"] if "x" in cols else [])
        missing = [c for c in ("y", "w") if c not in cols]
        if not xcols:
            missing.append("x1")
        if missing:
            raise ValidationError([("MissingField", -1, f"{path}: missing column(s) {missing}")])
        records = []
        for row in rd:
            row = {k.strip(): v for k, v in row.items() if k is not None}
            xs = [_cell(row.get(c)) for c in xcols]
            x = None if any(v is None for v in xs) else tuple(xs)
            d = _cell(row.get("delta"))
            st = _cell(row.get("stratum"))
            records.append(UnitRecord(x, _cell(row.get("y")), _cell(row.get("w")),
                                      1 if d is None else int(d), None if st is None else int(st)))
    if pop_x:
        with open(pop_x, newline="") as fh:
            rd = csv.DictReader(fh)
            pcols = sorted((c for c in rd.fieldnames or [] if c.strip().startswith("x")),
                           key=lambda c: c)
            for row in rd:
                records.append(UnitRecord(tuple(_cell(row[c]) for c in pcols), None, None, 0))
    return records


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def _targets(p):
    return {"mean": mean_target(), "reg": linear_regression_target(p),
            "out": normal_linear_target(p)}


def _fit_weight_model(cfg: RunConfig, data):
    if cfg.strata > 1:
        model, diag = wm.em_fit_mixture(data.w, data.X, data.y, H=cfg.strata,
                                        prop_terms=cfg.prop_terms, comp_terms="", seed=cfg.seed)
    else:
        model, diag = wm.fit_single(data.w, data.X, data.y, terms=cfg.weight_terms)
    return model, diag


def _describe_weight_model(model) -> str:
    if isinstance(model, wm.MixtureWeightModel):
        return (f"alpha = {np.round(model.alpha.ravel(), 3).tolist()}, "
                f"m = {np.round(model.m, 5).tolist()}, phi = {np.round(model.phi, 2).tolist()}")
    return f"beta = {np.round(model.beta, 4).tolist()}, phi = {model.phi:.2f}"


def cmd_fit(cfg: RunConfig) -> int:
    bad = [e for e in cfg.estimators if e not in ESTIMATORS]
    if bad:
        raise ValidationError([("MissingField", -1, f"unknown estimator(s) {bad}")])
    if cfg.setting == 1 and not cfg.pop_x:
        raise ValidationError([("SettingMismatch", -1, "Setting 1 needs --pop-x")])
    design = StudyDesign(setting=cfg.setting, n_known=cfg.n_known, N=cfg.N,
                         informative=cfg.informative,
                         mechanism="stratified" if cfg.strata > 1 else "poisson", H=cfg.strata)
    records = read_dataset_csv(cfg.data, cfg.pop_x if cfg.setting == 1 else None)
    data = validate_dataset(records, design)
    if not cfg.n_known:
        data = data.as_setting2(False)
    variant = design.variant
    rule = gauss_hermite(cfg.quad_nodes)
    targets = _targets(data.p)
    os.makedirs(cfg.out, exist_ok=True)

    results, errors = [], {}
    wmod = work = None
    needs_models = any(e in ("cml", "eff-reg", "eff-out") for e in cfg.estimators) or (
        "eff-mean" in cfg.estimators and variant == "setting1")
    report = {"config": asdict(cfg), "version": __version__, "n": data.n,
              "N": data.N, "variant": variant}
    status = EXIT_OK
    if needs_models:
        try:
            wmod, wdiag = _fit_weight_model(cfg, data)
            report["weight_model"] = json.loads(wm.model_to_json(wmod, wdiag))
            print(f"weight model: {_describe_weight_model(wmod)}")
            work = fit_gamma_ht(data)
            report["working_model"] = {"coef": [_fmt(v) for v in work.coef],
                                       "sigma2": _fmt(work.sigma2)}
        except NumericalError as exc:
            errors["weight_model"] = f"{type(exc).__name__}: {exc}"
            status = EXIT_NUMERIC
    for est in cfg.estimators:
        try:
            if est == "cc":
                res = estimate_cc(data, targets[cfg.target])
            elif est == "ht":
                res = estimate_ht(data, targets[cfg.target])
            elif wmod is None and (est != "eff-mean" or variant == "setting1"):
                raise NumericalError("weight model unavailable")
            elif est == "cml":
                res = estimate_cml(data, targets["out"], wmod, rule)
            else:
                tgt = targets[est.split("-")[1]]
                res = estimate_efficient(data, tgt, variant, wmod, work, rule, label=est)
            if not res.converged:
                status = EXIT_NUMERIC
            results.append(res)
        except NumericalError as exc:
            errors[est] = f"{type(exc).__name__}: {exc}"
            status = EXIT_NUMERIC
    report["estimates"] = [r.as_dict() for r in results]
    report["errors"] = errors
    with open(os.path.join(cfg.out, "estimates.json"), "w") as fh:
        json.dump(_json_numbers(report), fh, indent=2)
        fh.write("\n")
    write_estimates_csv(os.path.join(cfg.out, "estimates.csv"), results, cfg.estimators)
    for r in results:
        body = ", ".join(f"{n}={v:.4f} ({s:.4f})" for n, v, s in zip(r.names, r.theta_hat, r.se))
        flag = "" if r.converged else "  [not converged]"
        print(f"{r.label:>9}: {body}{flag}")
    for k, v in errors.items():
        print(f"{k:>9}: FAILED {v}", file=sys.stderr)
    return status


def _json_numbers(obj):
    """Floats as 17-significant-digit numbers (JSON keeps them exact)."""
    if isinstance(obj, dict):
        return {k: _json_numbers(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_numbers(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return float(_fmt(v)) if np.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_estimates_csv(path, results, order):
    """Rows ``parameter x {estimate, se}``, one column per estimator (``NA`` if absent)."""
    params = []
    for r in results:
        for n in r.names:
            if n not in params:
                params.append(n)
    labels = [r.label for r in results]
    by = {r.label: dict(zip(r.names, zip(r.theta_hat, r.se))) for r in results}
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["parameter", "stat"] + labels)
        for p in params:
            for k, stat in enumerate(("estimate", "se")):
                wr.writerow([p, stat] + [_fmt(by[l][p][k]) if p in by[l] else "NA" for l in labels])


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> int:
    from .simulation import (ROSTER, ScenarioSpec, StudyAborted, run_study, write_reps_csv,
                             write_summary_csv)

    if cfg.scenario is None or cfg.N is None:
        raise ValidationError([("MissingField", -1, "--scenario and --N are required")])
    spec = ScenarioSpec(cfg.scenario, cfg.N, seed=cfg.seed)
    roster = tuple(cfg.estimators) if cfg.estimators else ROSTER
    os.makedirs(cfg.out, exist_ok=True)
    manifest = {"config": asdict(cfg), "scenario": asdict(spec), "estimators": list(roster),
                "versions": {"isamp": __version__, "numpy": np.__version__,
                             "scipy": _scipy_version(), "python": platform.python_version()}}
    try:
        summary = run_study(spec, cfg.reps, roster, cfg.quad_nodes, threads=cfg.threads)
    except StudyAborted as exc:
        manifest["aborted"] = str(exc)
        _write_manifest(cfg.out, manifest)
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    write_reps_csv(os.path.join(cfg.out, "reps.csv"), summary.rows)
    write_summary_csv(os.path.join(cfg.out, "summary.csv"), summary)
    _write_manifest(cfg.out, manifest)
    for r in summary.table:
        if r["component"] == "b":
            print(f"{r['estimator']:>11}  mean={r['mean']:.4f}  sd={r['sd']:.4f}  "
                  f"se={r['mean_se']:.4f}  cover={r['coverage']:.3f}  fail={r['failures']}")
    return EXIT_OK


def _scipy_version():
    import scipy

    return scipy.__version__


def _write_manifest(out, manifest):
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(_json_numbers(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def cmd_validate(cfg: RunConfig) -> int:
    from .validation import run_all

    checks = run_all(Q=cfg.quad_nodes, swap_beta_order=cfg.inject_fault == "swap-beta",
                     quick=cfg.quick)
    width = max(len(c.name) for c in checks)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:<{width}}  {c.detail}")
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_CHECK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isamp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"isamp {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="run the oracle suite")
    v.add_argument("--quad-nodes", type=int, default=20)
    v.add_argument("--inject-fault", choices=["swap-beta"], default=None,
                   help="deliberately reverse the Beta parameter order in the moment oracle")
    v.add_argument("--quick", action="store_true", help="fewer random draws")

    f = sub.add_parser("fit", help="estimate from a dataset CSV")
    f.add_argument("--data", required=True)
    f.add_argument("--pop-x", default=None, help="covariates of non-sampled units (Setting 1)")
    f.add_argument("--target", choices=["mean", "reg", "out"], default="out",
                   help="target used by cc/ht (default: out)")
    f.add_argument("--estimators", default="cc,ht",
                   help=f"comma/space separated subset of {','.join(ESTIMATORS)}")
    f.add_argument("--setting", type=int, choices=[1, 2], default=2)
    f.add_argument("--n-known", type=_bool, default=False)
    f.add_argument("--N", type=int, default=None)
    f.add_argument("--informative", type=_bool, default=True)
    f.add_argument("--strata", type=int, default=1, help="mixture components H (1 = single model)")
    f.add_argument("--weight-terms", default="xy", help="mean-link terms of the single model")
    f.add_argument("--prop-terms", default="y", help="mixture-proportion terms")
    f.add_argument("--quad-nodes", type=int, default=20)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)

    s = sub.add_parser("simulate", help="Monte Carlo study for a scenario")
    s.add_argument("--scenario", choices=["S1", "S2", "S3", "S4"], required=True)
    s.add_argument("--N", type=int, required=True)
    s.add_argument("--reps", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--estimators", default="", help="subset of the roster (default: all)")
    s.add_argument("--quad-nodes", type=int, default=20)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out", required=True)
    return p


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    d = {k: v for k, v in vars(ns).items() if k not in ("verbose",)}
    if "estimators" in d:
        d["estimators"] = [e for e in d["estimators"].replace(",", " ").split() if e]
    return RunConfig.from_dict(d)


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    if not ns.verbose:
        warnings.simplefilter("ignore", RuntimeWarning)
    cfg = config_from_args(ns)
    try:
        if cfg.command == "validate":
            return cmd_validate(cfg)
        if cfg.command == "fit":
            return cmd_fit(cfg)
        return cmd_simulate(cfg)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (IsampError, ValueError) as exc:
        if isinstance(exc, NumericalError):
            print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
