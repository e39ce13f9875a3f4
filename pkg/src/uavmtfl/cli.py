"""Command line: ``uavmtfl run | compare | sweep``.

Settings come from defaults, then ``--config FILE``, then ``--set key=value``
pairs, then dedicated flags; later sources win.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import report
from .config import STRATEGIES, TIGHT_ENERGY, ConfigError, ExperimentConfig, apply_overrides, load_config
from .dataset import DataError
from .experiment import DataFallbackWarning, load_data, read_metrics, run_experiment

log = logging.getLogger("uavmtfl")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one setting")
    p.add_argument("--rounds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lam", type=float, help="trade-off between task weight and round time")
    p.add_argument("--synthetic", action="store_true", help="use generated digits")
    p.add_argument("--idx-images", help="IDX image file (e.g. the MNIST training images)")
    p.add_argument("--idx-labels", help="IDX label file")
    p.add_argument("--strict-data", action="store_true", help="fail instead of falling back to synthetic data")
    p.add_argument("--tight-energy", action="store_true", help="small energy budget that forces power cuts")
    p.add_argument("--timing-only", action="store_true", help="skip training; association and allocation only")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")


def resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    pairs = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"{item}: expected KEY=VALUE")
        k, v = item.split("=", 1)
        pairs[k] = v
    if args.tight_energy:
        pairs.update({k: str(v) for k, v in TIGHT_ENERGY.items()})
    for name in ("rounds", "seed", "lam"):
        if getattr(args, name, None) is not None:
            pairs[name] = str(getattr(args, name))
    if getattr(args, "strategy", None):
        pairs["strategy"] = args.strategy
    if args.synthetic:
        pairs["data"] = "synthetic"
    if args.idx_images or args.idx_labels:
        pairs.update(data="idx", idx_images=args.idx_images or "", idx_labels=args.idx_labels or "")
    if args.strict_data:
        pairs["strict_data"] = "true"
    if args.timing_only:
        pairs["timing_only"] = "true"
    return apply_overrides(config, pairs)


def _progress(rec) -> None:
    acc = " ".join(f"{a:.3f}" for a in rec.accuracies)
    log.info("round %3d  acc %s  T %.4g s  U %.4g", rec.round, acc, rec.t_round, rec.utility)


def cmd_run(args) -> int:
    config = resolve_config(args)
    result = run_experiment(config, args.out, figures=not args.no_figures, progress=_progress)
    s = result.summary()
    print(f"wrote {Path(args.out) / 'metrics.csv'}")
    if "final_average_accuracy" in s:
        print(f"final average accuracy {s['final_average_accuracy']:.4f}, total time {s['total_time']:.4g} s")
    else:
        print(f"total time {s['total_time']:.4g} s")
    return 0


def _summaries_from_dirs(dirs) -> list[report.RunSummary]:
    out = []
    for d in dirs:
        acc, t = read_metrics(Path(d) / "metrics.csv")
        out.append(report.RunSummary(Path(d).name, acc, t))
    return out


def cmd_compare(args) -> int:
    out = Path(args.out)
    if args.runs:
        runs = _summaries_from_dirs(args.runs)
    else:
        base = resolve_config(args)
        names = [s.strip() for s in args.strategies.split(",") if s.strip()]
        data = None if base.timing_only else load_data(base)
        runs = []
        for name in names:
            cfg = base.replace(strategy=name)
            res = run_experiment(cfg, out / name, data=data, figures=not args.no_figures, progress=_progress)
            runs.append(report.RunSummary(name, res.accuracy, res.t_rounds))
    rows = report.compare(runs, baseline=args.baseline)
    out.mkdir(parents=True, exist_ok=True)
    report.write_table(out / "compare.csv", rows)
    if not args.no_figures:
        report.plot_compare(runs, out)
    print(report.format_table(rows))
    return 0


SWEEP_COLUMNS = ["param", "value", "strategy", "seed", "final_accuracy", "average_accuracy",
                 "mean_task_variance", "total_time"]


def cmd_sweep(args) -> int:
    base = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    param = args.param
    cast = int if param == "n_uavs" else float
    values = [cast(v) for v in args.values.split(",")]
    names = [s.strip() for s in args.strategies.split(",") if s.strip()]
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = []
    data_cache = {}
    for value in values:
        for seed in seeds:
            cfg0 = apply_overrides(base, {param: str(value), "seed": str(seed)})
            data = None
            if not cfg0.timing_only:
                key = (seed, cfg0.n_samples)
                if key not in data_cache:
                    data_cache.clear()
                    data_cache[key] = load_data(cfg0)
                data = data_cache[key]
            for name in names:
                res = run_experiment(cfg0.replace(strategy=name), None, data=data)
                s = report.RunSummary(name, res.accuracy, res.t_rounds)
                rows.append([param, value, name, seed, s.final_accuracy, s.average_accuracy, s.mean_variance,
                             s.total_time])
                log.info("%s=%s %s seed %d: total time %.4g", param, value, name, seed, s.total_time)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([("" if np.isnan(v) else repr(v)) if isinstance(v, float) else v for v in r])
    if not args.no_figures:
        def series(col):
            out_s = {}
            for name in names:
                out_s[name] = [float(np.mean([r[col] for r in rows if r[2] == name and r[1] == v])) for v in values]
            return out_s

        report.plot_sweep(values, series(7), param, "total time (s)", out / "sweep_time.png")
        if not base.timing_only:
            report.plot_sweep(values, series(4), param, "final average accuracy", out / "sweep_accuracy.png")
    print(f"wrote {out / 'sweep.csv'} ({len(rows)} runs)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uavmtfl", description="UAV-assisted multi-task federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one strategy")
    _add_config_args(p)
    p.add_argument("--strategy", choices=sorted(STRATEGIES))
    p.add_argument("--out", default="runs/run", help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="compare finished runs or run several strategies")
    _add_config_args(p)
    p.add_argument("runs", nargs="*", help="run directories holding metrics.csv")
    p.add_argument("--strategies", default="proposed,s1,s2,s3", help="strategies to run when no directories are given")
    p.add_argument("--baseline", type=int, default=0, help="index of the reference run for improvements")
    p.add_argument("--out", default="runs/compare")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="grid over alpha2 or the number of UAVs")
    _add_config_args(p)
    p.add_argument("--param", choices=["alpha2", "n_uavs"], required=True)
    p.add_argument("--values", required=True, help="comma separated grid values")
    p.add_argument("--strategies", default="proposed,s1,s2,s3")
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", default="runs/sweep")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always", DataFallbackWarning)
            return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
