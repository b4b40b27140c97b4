"""Batch command line: ``magloc run | calibrate | sweep``.

Exit codes: 0 success, 2 usage or configuration error, 1 internal error.
Simulated trial failures are results, not errors. Without ``--out`` the
output root is taken from ``$MAGLOC_OUT`` (default ``./magloc_out``).
"""
import argparse
import csv
import json
import os
import sys
import time
from dataclasses import fields, replace

import numpy as np

from .calibration import save_coefficients
from .errors import CalibrationSaturated, ConfigError, MagLocError
from .simulator import KINDS, NoiseConfig, ScenarioConfig, run_batch, run_calibration, _streams
from .solver import SolverOptions

OUT_ENV = "MAGLOC_OUT"
DEFAULT_OUT = "magloc_out"


class UsageError(Exception):
    pass


def parse_seeds(text):
    """``"a..b"`` (inclusive), ``"a,b,c"`` or a single integer."""
    text = text.strip()
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            seeds = list(range(int(a), int(b) + 1))
        else:
            seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --seeds value {text!r}") from exc
    if not seeds:
        raise UsageError(f"--seeds {text!r} selects no seeds")
    return seeds


def parse_values(values=None, span=None):
    if values:
        try:
            return [float(v) for v in values.split(",") if v.strip()]
        except ValueError as exc:
            raise UsageError(f"bad --values {values!r}") from exc
    if span:
        try:
            a, b, n = span.split(":")
            return np.linspace(float(a), float(b), int(n)).tolist()
        except ValueError as exc:
            raise UsageError(f"bad --range {span!r}; expected start:stop:count") from exc
    raise UsageError("sweep needs --values or --range")


def load_config(args):
    """Scenario config from ``--config`` (if any) with CLI overrides applied."""
    base = {}
    if args.config:
        try:
            with open(args.config) as fh:
                base = json.load(fh)
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
    if args.scenario:
        base["kind"] = args.scenario
    if getattr(args, "disable_mi", False):
        base["disable_mi"] = True
    if getattr(args, "n_cal", None) is not None:
        base["n_cal"] = args.n_cal
    kind = base.get("kind", "S1_Hover")
    try:
        defaults = ScenarioConfig.default(kind).to_dict()
        # scenario-specific defaults (setpoints, flow-only baseline) unless overridden
        for key in ("setpoints", "disable_mi"):
            base.setdefault(key, defaults[key])
        return ScenarioConfig.from_dict(base)
    except (ConfigError, TypeError, KeyError) as exc:
        raise UsageError(f"invalid scenario config: {exc}") from exc


def output_dir(args):
    return args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def cmd_run(args):
    cfg = load_config(args)
    seeds = parse_seeds(args.seeds)
    out = output_dir(args)
    if args.dry_run:
        print(f"config ok: {cfg.kind}, {len(seeds)} seed(s), output would go to {out}")
        return 0
    logs, report = run_batch(cfg, seeds, workers=args.workers)
    os.makedirs(out, exist_ok=True)
    for lg, tr in zip(logs, report.trials):
        stem = os.path.join(out, f"trial_{cfg.kind}_{lg.seed}")
        lg.write_csv(stem + ".csv")
        side = lg.sidecar()
        side["report"] = tr.to_dict()
        _write_json(stem + ".json", side)
    summary = report.to_dict()
    summary["scenario"] = cfg.kind
    summary["metadata"] = {"created": time.time()}
    _write_json(os.path.join(out, "report.json"), summary)
    with open(os.path.join(out, "report.csv"), "w") as fh:
        fh.write(report.to_csv())
    mean = "n/a" if report.mean_rmse is None else f"{100 * report.mean_rmse:.2f} cm"
    print(f"{cfg.kind}: {report.n} trials, mean RMSE {mean}, "
          f"success {100 * report.success_rate:.0f}% -> {out}")
    return 0


def cmd_calibrate(args):
    cfg = load_config(args)
    seed = parse_seeds(args.seeds)[0]
    out = output_dir(args)
    if args.dry_run:
        print(f"config ok: n_cal={cfg.n_cal}, output would go to {out}")
        return 0
    cfg = replace(cfg, seed=seed)
    try:
        coeffs = run_calibration(cfg, _streams(seed)["calibration"])
    except CalibrationSaturated as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return 1
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "calibration.json")
    save_coefficients(path, coeffs, timestamp=time.time())
    print("C = " + ", ".join(f"{c:.4f}" for c in coeffs.c) + f"  (n_cal={coeffs.n_cal})")
    if coeffs.spread is not None:
        print("relative std per frame: " + ", ".join(f"{s:.2e}" for s in coeffs.spread))
    if coeffs.n_cal == 1:
        print("note: single-frame calibration, expect higher coefficient variance")
    print(f"-> {path}")
    return 0


_NOISE_FIELDS = {f.name for f in fields(NoiseConfig)}
_SOLVER_FIELDS = {f.name for f in fields(SolverOptions)} - {"box"}


def _with_param(cfg, name, value):
    if name in _NOISE_FIELDS:
        return replace(cfg, noise=replace(cfg.noise, **{name: value}))
    cast = int if name in ("max_iters", "max_restarts") else float
    return replace(cfg, solver=replace(cfg.solver, **{name: cast(value)}))


def cmd_sweep(args):
    name = args.param
    if name not in _NOISE_FIELDS | _SOLVER_FIELDS:
        raise UsageError(
            f"unknown sweep parameter {name!r}; choose from "
            f"{sorted(_NOISE_FIELDS | _SOLVER_FIELDS)}"
        )
    cfg = load_config(args)
    seeds = parse_seeds(args.seeds)
    values = parse_values(args.values, args.range)
    try:
        cfgs = [_with_param(cfg, name, v) for v in values]
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    out = output_dir(args)
    if args.dry_run:
        print(f"config ok: sweep {name} over {len(values)} point(s) x {len(seeds)} seed(s)")
        return 0
    rows = []
    for v, c in zip(values, cfgs):
        _, report = run_batch(c, seeds, workers=args.workers)
        rows.append([name, repr(v), report.n, report.mean_rmse, report.success_rate])
        print(f"{name}={v:g}: mean RMSE {report.mean_rmse}, success {report.success_rate}")
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, f"sweep_{name}.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "value", "n_trials", "mean_rmse_3d", "success_rate"])
        w.writerows(rows)
    print(f"-> {path}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="magloc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds_default="0..9"):
        sp.add_argument("--config", help="scenario config JSON")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
        sp.add_argument("--seeds", default=seeds_default, help="a..b, a,b,c or a single seed")
        sp.add_argument("--scenario", choices=KINDS, help="override the scenario kind")
        sp.add_argument("--disable-mi", action="store_true", help="flow-only baseline")
        sp.add_argument("--dry-run", action="store_true", help="validate inputs, write nothing")
        sp.add_argument("--workers", type=int, default=1, help="parallel trial processes")

    run = sub.add_parser("run", help="run a batch of trials")
    common(run)
    run.set_defaults(func=cmd_run)

    cal = sub.add_parser("calibrate", help="static calibration episode")
    common(cal, seeds_default="0")
    cal.add_argument("--n-cal", type=int, help="number of calibration frames")
    cal.set_defaults(func=cmd_calibrate)

    sw = sub.add_parser("sweep", help="grid over one noise or solver parameter")
    common(sw)
    sw.add_argument("--param", required=True)
    sw.add_argument("--values", help="comma-separated values")
    sw.add_argument("--range", help="start:stop:count (linspace)")
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MagLocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - stable exit code for CI
        print(f"internal error: {exc!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
