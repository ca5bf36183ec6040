"""Command-line entry point.

Subcommands::

    hfsoftmax train CONFIG
    hfsoftmax compare CONFIG CONFIG [CONFIG ...]
    hfsoftmax ablate --axis {M,L,T,tau_cp} --values V1,V2,... CONFIG
    hfsoftmax bench --n N --d D --m M --repeats R

Exit status is 0 on success, 2 for invalid configuration or arguments and 1
when a run fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .bench import run_bench
from .config import ConfigError, load_run_spec
from .experiments import ABLATION_AXES, OUTPUT_ENV, resolve_output_dir, run_ablation, run_compare, run_train
from .trainer import TrainingError

log = logging.getLogger("hfsoftmax")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hfsoftmax", description="Selective softmax training and benchmarks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("config")
    t.add_argument("--output-dir", help=f"overrides the configured directory and ${OUTPUT_ENV}")

    c = sub.add_parser("compare", help="train several configurations on one dataset")
    c.add_argument("configs", nargs="+")
    c.add_argument("--output-dir", help=f"defaults to ${OUTPUT_ENV}/compare or runs/compare")

    a = sub.add_parser("ablate", help="sweep one parameter of a configuration")
    a.add_argument("--axis", required=True, choices=ABLATION_AXES)
    a.add_argument("--values", required=True, help="comma-separated list")
    a.add_argument("config")
    a.add_argument("--output-dir", help=f"defaults to ${OUTPUT_ENV}/<name>-ablate-<axis> or runs/...")

    b = sub.add_parser("bench", help="time one selective step against one dense step")
    b.add_argument("--n", type=int, required=True, help="number of classes")
    b.add_argument("--d", type=int, required=True, help="feature dimension")
    b.add_argument("--m", type=int, required=True, help="active classes per step")
    b.add_argument("--repeats", type=int, default=21)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--json", action="store_true", help="print the report as JSON")
    return p


def _default_dir(name: str) -> Path:
    env = os.environ.get(OUTPUT_ENV)
    return Path(env) / name if env else Path("runs") / name


def _train(args) -> int:
    spec = load_run_spec(args.config)
    out = resolve_output_dir(spec, args.output_dir)
    for o in run_train(spec, out):
        print(f"{spec.name} seed={o.seed} final_accuracy={o.result.final_accuracy:.4f} -> {o.output_dir}")
    return EXIT_OK


def _compare(args) -> int:
    specs = [load_run_spec(c) for c in args.configs]
    out = Path(args.output_dir) if args.output_dir else _default_dir("compare")
    table, _ = run_compare(specs, out)
    print(table.read_text(), end="")
    return EXIT_OK


def _ablate(args) -> int:
    spec = load_run_spec(args.config)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    try:
        values = [float(v) if args.axis == "tau_cp" else int(v) for v in values]
    except ValueError:
        raise ConfigError(f"--values must be a comma-separated list of numbers, got {args.values!r}",
                          field="--values", source="command line") from None
    out = Path(args.output_dir) if args.output_dir else _default_dir(f"{spec.name}-ablate-{args.axis}")
    table, _ = run_ablation(spec, args.axis, values, out)
    print(table.read_text(), end="")
    return EXIT_OK


def _bench(args) -> int:
    report = run_bench(args.n, args.d, args.m, args.repeats, seed=args.seed)
    if args.json:
        print(json.dumps(report.as_dict(), indent=2))
    else:
        print(f"N={report.n_classes} D={report.dim} M={report.active} repeats={report.repeats}")
        print(f"selective step: {report.selective_median_s * 1e3:.3f} ms, peak {report.selective_peak_bytes} B")
        print(f"dense step:     {report.dense_median_s * 1e3:.3f} ms, peak {report.dense_peak_bytes} B")
        print(f"speedup {report.speedup:.2f}x, memory ratio {report.memory_ratio:.4f}")
    return EXIT_OK


COMMANDS = {"train": _train, "compare": _compare, "ablate": _ablate, "bench": _bench}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
