"""Command-line interface: ``dynspca {simulate,fit,tune,evaluate,export,study}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every output file is rendered in memory first and written only when the
command succeeds.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import io
from .errors import DataError, DegenerateWindow, DimensionError, DynspcaError, WrongDesign
from .estimator import DpcaConfig, FveRule, fit_trajectory
from .manpg import ManPGParams
from .simbench import (
    GroundTruth,
    SimDesign,
    common_setting,
    generate_panel,
    mise,
    run_study,
    setting,
    squared_distances,
    study_config,
    tpr_tnr,
)
from .tuning import TuningGrids, TuningReport, tune

logger = logging.getLogger("dynspca")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "DYNSPCA_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- arguments


def _floats(text: str):
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}")


def _dim(text: str):
    """``d`` is an integer or ``fve:<threshold>``."""
    if text.lower().startswith("fve:"):
        try:
            return FveRule(float(text[4:]))
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc))
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"d must be an integer or fve:<threshold>, got {text!r}")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value file; command-line flags override it")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help=f"worker threads (default: ${THREADS_ENV} or all cores)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("-q", "--quiet", action="store_true")


def _design_args(p):
    p.add_argument("--setting", default="common",
                   help="'common' or an irregular setting number 1..6")
    p.add_argument("--p", type=int, default=100)
    p.add_argument("--n", type=int, default=None, help="subjects (common design; default 100)")
    p.add_argument("--m", type=int, default=100, help="grid size of the common design")
    p.add_argument("--sigma2", type=float, default=0.1)
    p.add_argument("--seed", type=int, required=True)


def _fit_args(p):
    p.add_argument("--d", type=_dim, default=3)
    p.add_argument("--bandwidth", type=float, default=0.1)
    p.add_argument("--kernel", choices=["epanechnikov", "gaussian", "uniform"], default="epanechnikov")
    p.add_argument("--rho", type=_floats, default=[0.0], help="scalar or one value per grid point")
    p.add_argument("--gamma", type=_floats, default=[0.0], help="scalar or one value per grid point")
    p.add_argument("--grid-size", type=_positive_int, default=100)
    p.add_argument("--covariance", choices=["auto", "pooled", "common"], default="auto")
    p.add_argument("--center", type=_bool, default=True)
    p.add_argument("--max-outer", type=int, default=None)
    p.add_argument("--tol", type=float, default=None, help="ManPG stopping tolerance on ||D||")


def _tuning_args(p):
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--epsilon", type=float, default=TuningGrids.epsilon_gamma)
    p.add_argument("--bandwidths", type=_floats, default=None)
    p.add_argument("--rhos", type=_floats, default=None)
    p.add_argument("--gammas", type=_floats, default=None)
    p.add_argument("--validation-subsample", type=int, default=TuningGrids.validation_subsample)
    p.add_argument("--cv-points", type=int, default=TuningGrids.cv_points)
    p.add_argument("--rho-mode", choices=["shared", "per_point"], default="shared")
    p.add_argument("--gamma-mode", choices=["shared", "per_point"], default="shared")
    p.add_argument("--tune-max-outer", type=int, default=TuningGrids.max_outer)
    p.add_argument("--tune-tol", type=float, default=TuningGrids.tol_rel,
                   help="relative ManPG tolerance inside cross-validation solves")


def _data_args(p):
    p.add_argument("--data", required=True, help="panel CSV (long or wide)")
    p.add_argument("--format", choices=["auto", "long", "wide"], default="auto")
    p.add_argument("--normalize", choices=["auto", "always", "never"], default="auto")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dynspca", description="Dynamic sparse principal subspace estimation.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="draw a simulated panel and its ground truth")
    _common(p)
    _design_args(p)
    p.add_argument("--replication", type=int, default=0)
    p.add_argument("--out", required=True, help="dataset CSV")
    p.add_argument("--truth", required=True, help="ground-truth JSON sidecar")
    p.add_argument("--out-format", choices=["wide", "long"], default="wide")

    p = sub.add_parser("fit", help="fit the two-step estimator over a time grid")
    _common(p)
    _data_args(p)
    _fit_args(p)
    p.add_argument("--tuning", help="tuning report JSON whose h, rho and gamma override the flags")
    p.add_argument("--out", required=True, help="fit JSON")
    p.add_argument("--diag-out", help="CSV of projection diagonals over (t, j)")

    p = sub.add_parser("tune", help="select bandwidth, sparsity and threshold by cross-validation")
    _common(p)
    _data_args(p)
    _fit_args(p)
    _tuning_args(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="tuning report JSON")
    p.add_argument("--curves-prefix", help="write <prefix>_bandwidth.csv, _rho.csv, _gamma.csv")

    p = sub.add_parser("evaluate", help="score a fit against a ground-truth sidecar")
    _common(p)
    p.add_argument("--fit", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True, help="per-time metrics CSV")
    p.add_argument("--summary-out", help="one-row summary CSV")

    p = sub.add_parser("export", help="convert a result JSON to plot-ready CSV")
    _common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--table", choices=["auto", "diag", "bandwidth", "rho", "gamma", "summary", "curves"],
                   default="auto")

    p = sub.add_parser("study", help="run a seeded replication study")
    _common(p)
    _design_args(p)
    _tuning_args(p)
    p.add_argument("--replications", type=_positive_int, default=10)
    p.add_argument("--tune", type=_bool, default=False)
    p.add_argument("--bandwidth", type=float, default=0.1)
    p.add_argument("--rho", type=float, default=0.0)
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--grid-size", type=_positive_int, default=100)
    p.add_argument("--out", required=True, help="study JSON")
    p.add_argument("--table-out", help="summary CSV")
    return parser


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys use dashes or underscores."""
    out = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}")
    with fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise UsageError(f"{path}:{lineno}: empty key")
            out[key.replace("-", "_")] = value
    return out


def _apply_config(subparser: argparse.ArgumentParser, cfg: dict):
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, value in cfg.items():
        act = actions.get(key)
        if act is None or key in ("config", "help"):
            raise UsageError(f"unknown config key {key!r}")
        try:
            conv = act.type(value) if act.type else value
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"config key {key!r}: {exc}")
        if act.choices is not None and conv not in act.choices:
            raise UsageError(f"config key {key!r}: {conv!r} not in {sorted(act.choices)}")
        defaults[key] = conv
        act.required = False
    subparser.set_defaults(**defaults)


def _prescan(argv):
    """The subcommand and ``--config`` path, found before full parsing."""
    command = next((a for a in argv if not a.startswith("-")), None)
    path = None
    for k, a in enumerate(argv):
        if a == "--config" and k + 1 < len(argv):
            path = argv[k + 1]
        elif a.startswith("--config="):
            path = a.split("=", 1)[1]
    return command, path


def parse_args(argv):
    parser = build_parser()
    command, path = _prescan(argv)
    subs = parser._subparsers._group_actions[0].choices
    if path is not None and command in subs:
        _apply_config(subs[command], read_config(path))
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("dynspca: a subcommand is required (simulate, fit, tune, evaluate, export, study)")
    return args


def thread_count(flag):
    if flag is not None:
        return flag
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            v = int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be a positive integer, got {env!r}")
        if v < 1:
            raise UsageError(f"{THREADS_ENV} must be a positive integer, got {env!r}")
        return v
    return os.cpu_count() or 1


def _check_paths(inputs=(), outputs=()):
    for path in inputs:
        if path is not None and not os.path.isfile(path):
            raise UsageError(f"input file not found: {path}")
    for path in outputs:
        if path is None:
            continue
        d = os.path.dirname(os.path.abspath(path))
        if not os.path.isdir(d):
            raise UsageError(f"output directory does not exist: {d}")


# ---------------------------------------------------------------- commands


def _design(args) -> SimDesign:
    kw = dict(sigma2=args.sigma2, seed=args.seed)
    try:
        if str(args.setting).lower() == "common":
            return common_setting(args.m, p=args.p, n=args.n or 100, **kw)
        k = int(args.setting)
    except ValueError:
        raise UsageError(f"--setting must be 'common' or 1..6, got {args.setting!r}")
    d = setting(k, p=args.p, **kw)
    if args.n is not None:
        from dataclasses import replace

        d = replace(d, n=args.n)
    return d


def _solver(args) -> ManPGParams:
    kw = {}
    if args.max_outer is not None:
        kw["max_outer"] = args.max_outer
    if args.tol is not None:
        kw["tol_D"] = args.tol
    return ManPGParams(**kw)


def _config(args) -> DpcaConfig:
    grid = np.linspace(0.0, 1.0, args.grid_size)

    def scalar_or_list(v):
        return v[0] if len(v) == 1 else v

    try:
        return DpcaConfig(d=args.d, bandwidth=args.bandwidth, kernel=args.kernel,
                          rho=scalar_or_list(args.rho), gamma=scalar_or_list(args.gamma),
                          grid=grid, center=args.center, covariance=args.covariance,
                          solver=_solver(args))
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc))


def _grids(args) -> TuningGrids:
    try:
        return TuningGrids(A1=args.bandwidths, A2=args.rhos, A3=args.gammas, k=args.folds,
                           epsilon_gamma=args.epsilon, validation_subsample=args.validation_subsample,
                           cv_points=args.cv_points, rho_mode=args.rho_mode,
                           gamma_mode=args.gamma_mode, max_outer=args.tune_max_outer,
                           tol_rel=args.tune_tol)
    except ValueError as exc:
        raise UsageError(str(exc))


def cmd_simulate(args) -> dict:
    _check_paths(outputs=[args.out, args.truth])
    design = _design(args)
    data, truth = generate_panel(design, args.replication)
    side = {"schema_version": io.SCHEMA_VERSION, "kind": "truth", "design": design.to_dict(),
            "replication": args.replication, **truth.to_dict()}
    return {args.out: io.csv_text(io.panel_rows(data, args.out_format)), args.truth: io.json_text(side)}


def _load(args):
    data = io.ingest(args.data, args.format, args.normalize)
    logger.info("loaded %d subjects, p=%d, %s design", data.n, data.p, data.design.value)
    return data


def cmd_fit(args) -> dict:
    _check_paths([args.data, args.tuning], [args.out, args.diag_out])
    config = _config(args)
    if args.tuning:
        rep = io.read_json(args.tuning)
        if rep.get("kind") != "tuning":
            raise DataError(f"{args.tuning}: not a tuning report")
        report = TuningReport.from_dict(rep["report"])
        if report.grid.shape != config.grid.shape or not np.allclose(report.grid, config.grid):
            raise UsageError("tuning report grid differs from --grid-size")
        config = report.apply(config)
    data = _load(args)
    if config.covariance == "common" and data.design.value != "common":
        raise WrongDesign("--covariance common requires a common-design dataset")
    fit = fit_trajectory(data, config)
    for pt in fit.points:
        if not pt.ok:
            logger.warning("t=%.4f skipped: %s", pt.t, pt.reason)
    obj = io.fit_to_dict(fit, data)
    out = {args.out: io.json_text(obj)}
    if args.diag_out:
        out[args.diag_out] = io.csv_text(io.fit_diag_rows(fit))
    return out


def _curve_files(prefix, report: dict) -> dict:
    return {
        f"{prefix}_bandwidth.csv": io.csv_text(io.curve_rows(report["bandwidth_curve"], ["cv"])),
        f"{prefix}_rho.csv": io.csv_text(io.curve_rows(report["rho_curve"], ["ip", "l1_norm"])),
        f"{prefix}_gamma.csv": io.csv_text(io.curve_rows(report["gamma_curve"], ["ip", "support_size"])),
    }


def cmd_tune(args) -> dict:
    prefix_outs = [] if not args.curves_prefix else [f"{args.curves_prefix}_bandwidth.csv"]
    _check_paths([args.data], [args.out] + prefix_outs)
    config = _config(args)
    grids = _grids(args)
    data = _load(args)
    report = tune(data, config, grids, seed=args.seed)
    rep = report.to_dict()
    obj = {"schema_version": io.SCHEMA_VERSION, "kind": "tuning", "report": rep}
    out = {args.out: io.json_text(obj)}
    if args.curves_prefix:
        out.update(_curve_files(args.curves_prefix, rep))
    print(f"h={report.h_star:.6g} rho={report.rho_star[0]:.6g} gamma={report.gamma_star[0]:.6g}")
    return out


def _truth(obj) -> GroundTruth:
    if obj.get("kind") != "truth":
        raise DataError("not a ground-truth sidecar")
    return GroundTruth(int(obj["p"]), tuple(obj["lam"]))


def cmd_evaluate(args) -> dict:
    _check_paths([args.fit, args.truth], [args.out, args.summary_out])
    fit = io.fit_from_dict(io.read_json(args.fit))
    truth = _truth(io.read_json(args.truth))
    if fit.metadata.get("p") != truth.p:
        raise DimensionError(f"fit has p={fit.metadata.get('p')} but truth has p={truth.p}")
    sq = squared_distances(fit, truth)
    sq0 = squared_distances(fit, truth, which="U0")
    tpr, tnr = tpr_tnr(fit, truth)
    tpr0, tnr0 = tpr_tnr(fit, truth, which="U0")
    m, m0 = mise(fit, truth), mise(fit, truth, which="U0")

    def num(x):
        return "" if not np.isfinite(x) else io.fmt(x)

    rows = [["t", "sq_dist", "sq_dist_initial", "tpr", "tnr", "tpr_initial", "tnr_initial"]]
    for k, t in enumerate(fit.times):
        rows.append([io.fmt(t)] + [num(a[k]) for a in (sq, sq0, tpr, tnr, tpr0, tnr0)])
    out = {args.out: io.csv_text(rows)}
    summary = {"mise": m, "mise_initial": m0,
               "tpr_median": float(np.nanmedian(tpr)), "tnr_median": float(np.nanmedian(tnr))}
    if args.summary_out:
        out[args.summary_out] = io.csv_text([list(summary), [num(v) for v in summary.values()]])
    print(f"MISE={m:.6g} MISE_initial={m0:.6g} TPR={summary['tpr_median']:.4g} "
          f"TNR={summary['tnr_median']:.4g}")
    return out


def cmd_export(args) -> dict:
    _check_paths([args.input], [args.out])
    obj = io.read_json(args.input)
    kind = obj.get("kind")
    table = args.table
    if table == "auto":
        table = {"fit": "diag", "tuning": "gamma", "study": "summary"}.get(kind)
        if table is None:
            raise DataError(f"{args.input}: cannot export a {kind!r} result")
    if table == "diag":
        if kind != "fit":
            raise DataError("the diag table needs a fit result")
        rows = io.fit_diag_rows(obj)
    elif table in ("bandwidth", "rho", "gamma"):
        if kind != "tuning":
            raise DataError(f"the {table} table needs a tuning report")
        text = _curve_files("x", obj["report"])[f"x_{table}.csv"]
        return {args.out: text}
    elif table in ("summary", "curves"):
        if kind != "study":
            raise DataError(f"the {table} table needs a study result")
        rows = _study_rows(obj, table)
    else:
        raise UsageError(f"unknown table {table!r}")
    return {args.out: io.csv_text(rows)}


def _study_rows(obj, table):
    if table == "summary":
        row = obj["summary"]
        keys = list(row)
        return [keys, [io.fmt(row[k]) if isinstance(row[k], float) else str(row[k]) for k in keys]]
    cur = obj["curves"]
    keys = ["t", "tpr", "tnr", "tpr0", "tnr0"]
    rows = [keys]
    for k in range(len(cur["t"])):
        rows.append(["" if cur[c][k] is None else io.fmt(cur[c][k]) for c in keys])
    return rows


def cmd_study(args) -> dict:
    _check_paths(outputs=[args.out, args.table_out])
    from dataclasses import replace

    design = replace(_design(args), replications=args.replications)
    config = study_config(design, grid=np.linspace(0.0, 1.0, args.grid_size),
                          bandwidth=args.bandwidth, rho=args.rho, gamma=args.gamma)
    res = run_study(design, config, tune=args.tune, grids=_grids(args) if args.tune else None,
                    n_jobs=thread_count(args.threads), progress=not args.quiet)
    summary = res.table_row()
    obj = {
        "schema_version": io.SCHEMA_VERSION,
        "kind": "study",
        "design": design.to_dict(),
        "tuned": bool(args.tune),
        "summary": summary,
        "ise": res.ise,
        "ise_initial": res.ise0,
        "failures": {str(k): v for k, v in res.failures.items()},
        "curves": res.curves(),
        "tuning": [None if r is None else r.to_dict() for r in res.tuned],
    }
    out = {args.out: io.json_text(obj)}
    if args.table_out:
        out[args.table_out] = io.csv_text(_study_rows(io._jsonable(obj), "summary"))
    print(f"MISE={summary['mise_mean']:.6g} (sd {summary['mise_sd']:.3g}) "
          f"initial={summary['mise0_mean']:.6g} (sd {summary['mise0_sd']:.3g})")
    return out


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "tune": cmd_tune,
    "evaluate": cmd_evaluate,
    "export": cmd_export,
    "study": cmd_study,
}


def _setup_logging(args):
    level = logging.WARNING
    if getattr(args, "quiet", False):
        level = logging.ERROR
    elif getattr(args, "verbose", 0) >= 2:
        level = logging.DEBUG
    elif getattr(args, "verbose", 0) == 1:
        level = logging.INFO
    root = logging.getLogger("dynspca")
    root.handlers.clear()
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    root.addHandler(h)
    root.setLevel(level)
    root.propagate = False


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        _setup_logging(args)
        thread_count(args.threads)
        files = COMMANDS[args.command](args)
        io.write_outputs(files)
        return EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DegenerateWindow as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DimensionError, WrongDesign) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DynspcaError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
