"""Command-line entry point: ``hierflow <verb> ...``.

Failures print one JSON line on stderr and exit 2 (flags/config), 3 (data) or 4 (numerics).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import data
from .config import RECONCILERS, RunConfig, load_config
from .errors import ConfigError, DataError, HierflowError, NumericError
from .metrics import crps
from .pipeline import Checkpoint, baseline_forecast, forecast, train
from .reconcile import ForecastEnsemble, hier_e2e_projection, mint_projection, mint_weights, reconcile

log = logging.getLogger("hierflow")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D401 - argparse hook
        _fail("UsageError", message, 2)


def _fail(kind: str, message: str, code: int):
    sys.stderr.write(json.dumps({"error": kind, "exit": code, "message": message}) + "\n")
    raise SystemExit(code)


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname, "logger": record.name, "message": record.getMessage()})


def _setup_logging(quiet: bool, json_logs: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if json_logs else logging.Formatter("%(levelname)s %(message)s"))
    root = logging.getLogger("hierflow")
    root.handlers[:] = [handler]
    root.setLevel(logging.WARNING if quiet else logging.INFO)
    root.propagate = False
    logging.captureWarnings(True)
    wlog = logging.getLogger("py.warnings")
    wlog.handlers[:] = [handler]
    wlog.propagate = False


def _overrides(args, names) -> dict:
    out = {}
    for name in names:
        val = getattr(args, name, None)
        if val is not None:
            out[name] = val
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _seed(args) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = data.seed_from_env(default=-1)
    return None if env == -1 else env


# verbs -----------------------------------------------------------------------


def cmd_synth(args) -> None:
    seed = _seed(args)
    spec = data.SyntheticSpec(
        depth=args.depth,
        branching=args.branching,
        length=args.length,
        family=args.family,
        noise=args.noise,
        seed=0 if seed is None else seed,
        period=args.period,
    )
    paths = data.generate_synthetic(spec, args.out, holdout=args.holdout)
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))


def _run_config(args, names) -> RunConfig:
    over = _overrides(args, names)
    seed = _seed(args)
    if seed is not None and "seed" not in over:
        over["seed"] = seed
    return load_config(args.config, over)


def cmd_train(args) -> None:
    cfg = _run_config(args, ["hierarchy", "panel", "checkpoint", "log", "epochs", "season_period"])
    cfg.require("hierarchy", "panel", "checkpoint", must_exist=("hierarchy", "panel"))
    panel = data.load_panel(cfg.hierarchy, cfg.panel, season_period=cfg.season_period)
    ck = train(panel, cfg.train, cfg.model, log_path=cfg.log)
    ck.save(cfg.checkpoint)
    log.info("saved checkpoint %s (%d epochs logged)", cfg.checkpoint, len({r[0] for r in ck.log}))


def cmd_forecast(args) -> None:
    cfg = _run_config(
        args, ["hierarchy", "panel", "checkpoint", "horizon", "reconciler", "season_period"]
    )
    if args.samples is not None:
        cfg.train.sample_count = args.samples
    cfg.require("hierarchy", "panel", must_exist=("hierarchy", "panel", "checkpoint"))
    panel = data.load_panel(cfg.hierarchy, cfg.panel, season_period=cfg.season_period)
    horizon = cfg.horizon or cfg.train.prediction_length
    if cfg.reconciler == "cnf":
        cfg.require("checkpoint")
        ck = Checkpoint.load(cfg.checkpoint)
        seed = _seed(args)
        ens = forecast(panel, ck, horizon, cfg.train.sample_count, seed=seed)
    else:
        ens = baseline_forecast(panel, horizon, cfg.reconciler, cfg.season_period)
    data.write_ensemble(args.out, ens)
    log.info("wrote %d x %d ensemble to %s (coherency %.2e)", ens.count, ens.horizon,
             args.out, ens.coherency_error())


def cmd_evaluate(args) -> None:
    tree = data.read_hierarchy(args.hierarchy)
    samples = data.read_ensemble(args.ensemble, tree)
    actual_panel = data.load_panel(tree, args.actuals)
    if actual_panel.T != samples.shape[1]:
        raise DataError(
            f"horizon mismatch: ensemble has {samples.shape[1]} steps, actuals have {actual_panel.T}"
        )
    report = crps(ForecastEnsemble(samples, tree), actual_panel.values)
    data.write_report(report, args.out, args.csv)
    log.info("crps=%.6g crps_normalized=%.6g", report.crps, report.crps_normalized)


def _read_base(path, tree) -> np.ndarray:
    return data.read_ensemble(path, tree)


def cmd_reconcile(args) -> None:
    tree = data.read_hierarchy(args.hierarchy)
    base = _read_base(args.base, tree)
    resid = data.read_residuals(args.residuals, tree) if args.residuals else None
    out = reconcile(base, tree, args.method, resid)
    data.write_ensemble(args.out, ForecastEnsemble(out, tree))


def cmd_dump_matrices(args) -> None:
    tree = data.read_hierarchy(args.hierarchy)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    S, A = tree.S(), tree.A()
    if args.residuals:
        W = mint_weights(data.read_residuals(args.residuals, tree), "shr")
    else:
        W = np.eye(tree.n)
    P = mint_projection(S, W)
    M = hier_e2e_projection(A)
    nodes, leaves = tree.nodes, tree.leaves
    data.write_matrix(out / "S.csv", S, nodes, leaves)
    data.write_matrix(out / "A.csv", A, tree.upper, nodes)
    data.write_matrix(out / "M.csv", M, nodes, nodes)
    data.write_matrix(out / "P.csv", P, leaves, nodes)
    log.info("wrote S, A, M, P to %s", out)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", help="only warnings and errors")
    common.add_argument("--json-logs", action="store_true", help="one JSON object per log line")

    p = _Parser(prog="hierflow", description="Hierarchical forecasting with a transformer-conditioned flow.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic hierarchical dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--depth", type=int, default=2)
    s.add_argument("--branching", type=int, default=2)
    s.add_argument("--length", type=int, default=200)
    s.add_argument("--family", choices=data.FAMILIES, default="gaussian-ar1")
    s.add_argument("--noise", type=float, default=1.0)
    s.add_argument("--period", type=int, default=12)
    s.add_argument("--holdout", type=int, default=0, help="also write train.csv/test.csv")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    def run_opts(q):
        q.add_argument("--config", help="flat key = value file")
        q.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        q.add_argument("--hierarchy")
        q.add_argument("--panel")
        q.add_argument("--checkpoint")
        q.add_argument("--seed", type=int)
        q.add_argument("--season-period", dest="season_period", type=int)

    t = sub.add_parser("train", parents=[common], help="fit the model, write checkpoint + log")
    run_opts(t)
    t.add_argument("--log", help="training log CSV")
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("forecast", parents=[common], help="sample a coherent forecast ensemble")
    run_opts(f)
    f.add_argument("--horizon", type=int)
    f.add_argument("--samples", type=int)
    f.add_argument("--reconciler", choices=RECONCILERS)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_forecast)

    e = sub.add_parser("evaluate", parents=[common], help="score an ensemble against actuals")
    e.add_argument("--hierarchy", required=True)
    e.add_argument("--ensemble", required=True)
    e.add_argument("--actuals", required=True, help="panel-format CSV covering the horizon")
    e.add_argument("--out", required=True, help="report JSON")
    e.add_argument("--csv", help="flat per-series CSV")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("reconcile", parents=[common], help="reconcile external base forecasts")
    r.add_argument("--hierarchy", required=True)
    r.add_argument("--base", required=True, help="sample_id,step,node_id,value CSV")
    r.add_argument("--method", required=True, choices=RECONCILERS[1:])
    r.add_argument("--residuals", help="in-sample residuals, panel format (mint-shr)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reconcile)

    d = sub.add_parser("dump-matrices", parents=[common], help="write S, A, M and P as CSV")
    d.add_argument("--hierarchy", required=True)
    d.add_argument("--out-dir", required=True)
    d.add_argument("--residuals", help="residuals for a shrinkage P (default W = I)")
    d.set_defaults(func=cmd_dump_matrices)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.quiet, args.json_logs)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            args.func(args)
    except HierflowError as exc:
        _fail(type(exc).__name__, str(exc), exc.exit_code)
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        _fail("NumericError", str(exc), NumericError.exit_code)
    return 0


if __name__ == "__main__":
    sys.exit(main())
