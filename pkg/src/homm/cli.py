"""Command-line interface: ``homm train | sweep | check | measure``.

Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from homm import __version__
from homm import checks
from homm import discrepancy as D
from homm.config import build_configs, config_pairs, format_config, load_config, parse_pairs
from homm.data import CsvFormatError, load_features_csv
from homm.moments import CapacityError, sample_indices
from homm.network import save_checkpoint
from homm.trainer import ConfigError, TrainingAborted, run_experiment

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

MANIFEST = "manifest.json"
METRICS = "metrics.jsonl"
CHECKPOINT = "model.ckpt"
SUMMARY = "summary.json"

log = logging.getLogger("homm")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def execute_run(train, data, out_dir: Path, base_dir: Path | None = None) -> dict:
    """Run one experiment into ``out_dir``; returns the summary dict."""
    source, target = data.load(base_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "library_version": __version__,
        "seed": train.seed,
        "config": config_pairs(train, data),
        "config_text": format_config(train, data),
        "dataset": data.describe(),
        "n_source": len(source),
        "n_target": len(target),
        "started_at": _now(),
    }
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    with open(out_dir / METRICS, "w", encoding="utf-8") as fh:
        def sink(record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")

        result = run_experiment(train, source, target, on_record=sink)
    save_checkpoint(result.network, out_dir / CHECKPOINT)
    summary = {
        "source_accuracy": result.source_accuracy,
        "target_accuracy": result.target_accuracy,
        "target_per_class": None if result.target_eval is None else
        {str(k): v for k, v in result.target_eval.per_class.items()},
        "steps": train.total_steps,
        "finished_at": _now(),
    }
    (out_dir / SUMMARY).write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_train(args) -> int:
    try:
        train, data = load_config(args.config)
    except ConfigError as exc:
        _err(f"invalid config: {exc}")
        return EXIT_INVALID
    try:
        summary = execute_run(train, data, Path(args.out), Path(args.config).parent)
    except (CsvFormatError, FileNotFoundError) as exc:
        _err(str(exc))
        return EXIT_INVALID
    except (TrainingAborted, CapacityError) as exc:
        _err(f"training aborted: {exc}")
        return EXIT_RUNTIME
    print(json.dumps({k: summary[k] for k in ("source_accuracy", "target_accuracy")}))
    return EXIT_OK


def parse_grid(spec: str) -> dict[str, list[str]]:
    """``"p=1,2,3; lambda_d=1e3,1e4"`` or a file with one ``key = v1,v2`` per line."""
    path = Path(spec)
    text = path.read_text(encoding="utf-8") if path.is_file() else spec.replace(";", "\n")
    grid = {}
    for key, raw in parse_pairs(text, "grid").items():
        values = [v.strip() for v in raw.split(",") if v.strip()]
        if values:
            grid[key] = values
    return grid


def cmd_sweep(args) -> int:
    try:
        base = parse_pairs(Path(args.config).read_text(encoding="utf-8"), args.config)
        build_configs(base)
        grid = parse_grid(args.grid)
    except (ConfigError, OSError) as exc:
        _err(f"invalid sweep: {exc}")
        return EXIT_INVALID
    if not grid:
        _err("empty sweep: the grid lists no parameter values")
        return EXIT_INVALID
    keys = list(grid)
    points = list(itertools.product(*(grid[k] for k in keys)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, failures = [], []
    for i, values in enumerate(points):
        point = dict(zip(keys, values))
        run_dir = out / f"point_{i:03d}"
        try:
            train, data = build_configs({**base, **point})
            summary = execute_run(train, data, run_dir, Path(args.config).parent)
        except (ConfigError, TrainingAborted, CapacityError, CsvFormatError, ValueError) as exc:
            log.warning("grid point %s failed: %s", point, exc)
            failures.append({"point": i, **point, "error": str(exc)})
            continue
        rows.append({"point": i, **point, "source_accuracy": summary["source_accuracy"],
                     "target_accuracy": summary["target_accuracy"]})
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, ["point", *keys, "source_accuracy", "target_accuracy"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    if failures:
        with open(out / "failures.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, ["point", *keys, "error"], lineterminator="\n")
            w.writeheader()
            w.writerows(failures)
        _err(f"{len(failures)} of {len(points)} grid points failed; see failures.csv")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_check(args) -> int:
    results = checks.run_all()
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("all checks passed" if ok else "some checks FAILED")
    return EXIT_OK if ok else EXIT_INVALID


MEASURE_LOSSES = D.VARIANTS + ("kmmd",)


def measure(source, target, losses, p=3, N=1000, gamma=1e-4, n_groups=1, seed=0,
            kernel_exponent=2) -> dict[str, float]:
    kernel = D.KernelConfig(gamma, kernel_exponent)
    L = source.shape[1]
    out = {}
    for name in losses:
        if name == "kmmd":
            out[name] = D.kernel_mmd(source, target, kernel)
            continue
        idx = sample_indices(L, p, N, seed) if name in ("sampled", "kernelized") else None
        out[name] = D.domain_discrepancy(name, source, target, p=p, n_groups=n_groups,
                                         idx=idx, kernel=kernel)
    return out


def cmd_measure(args) -> int:
    losses = [s.strip() for s in args.losses.split(",") if s.strip()]
    unknown = [s for s in losses if s not in MEASURE_LOSSES]
    if not losses or unknown:
        _err(f"--losses must list names from {', '.join(MEASURE_LOSSES)}"
             + (f"; unknown: {', '.join(unknown)}" if unknown else ""))
        return EXIT_INVALID
    try:
        source = load_features_csv(args.source).features
        target = load_features_csv(args.target).features
    except (CsvFormatError, ValueError, OSError) as exc:
        _err(str(exc))
        return EXIT_INVALID
    if source.shape[1] != target.shape[1]:
        _err(f"width mismatch: {args.source} has {source.shape[1]} feature columns, "
             f"{args.target} has {target.shape[1]}")
        return EXIT_INVALID
    try:
        values = measure(source, target, losses, p=args.p, N=args.N, gamma=args.gamma,
                         n_groups=args.n_groups, seed=args.seed,
                         kernel_exponent=args.kernel_exponent)
    except CapacityError as exc:
        _err(str(exc))
        return EXIT_RUNTIME
    except ValueError as exc:
        _err(str(exc))
        return EXIT_INVALID
    print(json.dumps(values))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="homm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grid search over configuration keys")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True,
                   help="'key=v1,v2; key2=...' or a file with one key per line")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("check", help="run the equivalence and gradient self-checks")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("measure", help="discrepancies between two feature CSV files")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--losses", default="full",
                   help=f"comma-separated subset of {','.join(MEASURE_LOSSES)}")
    p.add_argument("--p", type=int, default=3)
    p.add_argument("--N", type=int, default=1000)
    p.add_argument("--gamma", type=float, default=1e-4)
    p.add_argument("--n-groups", type=int, default=1)
    p.add_argument("--kernel-exponent", type=int, choices=(1, 2), default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_measure)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FloatingPointError as exc:
        _err(f"numerical failure: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
