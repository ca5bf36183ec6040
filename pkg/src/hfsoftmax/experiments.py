"""Experiment orchestration: single runs, selector comparisons and ablation sweeps.

Each training run writes three artifacts into its output directory:
``metrics.csv`` (one row per iteration), ``result.json`` (final accuracy,
timing breakdown and the resolved configuration) and ``checkpoint.dcs``
(the final parameter store).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .allocation import AllocationSchedule
from .config import RunSpec
from .data import SyntheticDataset, generate_dataset
from .diagnostics import MetricsRecord
from .param_store import ParamStore
from .trainer import RunResult, train

log = logging.getLogger(__name__)

OUTPUT_ENV = "HFSOFTMAX_OUTPUT_DIR"
ABLATION_AXES = ("M", "L", "T", "tau_cp")
COMPARE_COLUMNS = ["name", "selector", "M", "final_accuracy", "mean_select_time_us", "mean_softmax_time_us"]
ABLATION_COLUMNS = ["axis", "value", "selector", "M", "L", "T", "tau_cp", "final_accuracy",
                    "mean_overlap_optimal", "mean_select_time_us", "mean_softmax_time_us", "active_class_total"]


@dataclass
class RunOutcome:
    spec: RunSpec
    seed: int
    output_dir: Path
    result: RunResult

    @property
    def mean_select_us(self) -> float:
        return float(np.mean([r.select_time_us for r in self.result.records])) if self.result.records else 0.0

    @property
    def mean_softmax_us(self) -> float:
        return float(np.mean([r.softmax_time_us for r in self.result.records])) if self.result.records else 0.0

    @property
    def mean_overlap(self) -> float:
        vals = [r.overlap_optimal for r in self.result.records if r.overlap_optimal is not None]
        return float(np.mean(vals)) if vals else float("nan")


def resolve_output_dir(spec: RunSpec, override: str | os.PathLike | None = None) -> Path:
    """Output directory of a run.

    An explicit ``override`` wins; otherwise the ``HFSOFTMAX_OUTPUT_DIR``
    environment variable, when set, replaces the configured directory by
    ``$HFSOFTMAX_OUTPUT_DIR/<name>``.
    """
    if override is not None:
        return Path(override)
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env) / spec.name
    return spec.output_dir


def format_value(v) -> str:
    """Locale-independent CSV cell: empty for missing, ``repr`` round-trip for floats."""
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if np.isfinite(v) else ("nan" if np.isnan(v) else ("inf" if v > 0 else "-inf"))
    return str(v)


def write_metrics_csv(path: Path, records: list[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MetricsRecord.columns())
        for rec in records:
            writer.writerow([format_value(v) for v in rec.values()])


def _write_table(path: Path, columns: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(v) for v in row])


def _json_safe(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return _json_safe(float(obj))
    return obj


def run_single(spec: RunSpec, seed: int, out_dir: Path, dataset: SyntheticDataset | None = None) -> RunOutcome:
    """Train once with ``seed`` and write the run's artifacts into ``out_dir``."""
    dataset = dataset if dataset is not None else generate_dataset(spec.dataset)
    config = spec.with_seed(seed)
    store = ParamStore.initialize(spec.dataset.n_classes, spec.dataset.dim, seed=config.init_seed)
    result = train(config, dataset, store)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out_dir / "metrics.csv", result.records)
    store.save(out_dir / "checkpoint.dcs")
    summary = {
        "name": spec.name,
        "seed": seed,
        "final_accuracy": result.final_accuracy,
        "iterations": len(result.records),
        "active_class_total": result.active_class_total,
        "timings_s": result.timings,
        "epochs": [dataclasses.asdict(e) for e in result.epochs],
        "phases": [dataclasses.asdict(p) for p in result.phases],
        "config": spec.as_dict(),
    }
    (out_dir / "result.json").write_text(json.dumps(_json_safe(summary), indent=2))
    log.info("%s seed %d: final accuracy %.4f -> %s", spec.name, seed, result.final_accuracy, out_dir)
    return RunOutcome(spec, seed, out_dir, result)


def run_train(spec: RunSpec, output_dir=None, dataset: SyntheticDataset | None = None) -> list[RunOutcome]:
    """Run every seed of ``spec``; several seeds go to ``seed_<k>`` subdirectories."""
    base = resolve_output_dir(spec, output_dir)
    dataset = dataset if dataset is not None else generate_dataset(spec.dataset)
    if spec.repeats == 1:
        return [run_single(spec, spec.seeds[0], base, dataset)]
    return [run_single(spec, s, base / f"seed_{s}", dataset) for s in spec.seeds]


def run_compare(specs: list[RunSpec], output_dir) -> tuple[Path, list[RunOutcome]]:
    """Train every spec on one shared dataset and tabulate accuracy against cost.

    Raises:
        ValueError: with fewer than two specs, or when the dataset settings
            (including the seed) differ between specs.
    """
    if len(specs) < 2:
        raise ValueError("a comparison needs at least two run configurations")
    first = specs[0].dataset
    for spec in specs[1:]:
        if spec.dataset.seed != first.seed:
            raise ValueError(f"dataset seeds differ ({first.seed} vs {spec.dataset.seed} in {spec.name!r}); "
                             "comparison refused")
        if spec.dataset != first:
            raise ValueError(f"dataset settings of {spec.name!r} differ from {specs[0].name!r}; comparison refused")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("run names must be distinct within a comparison")
    out = Path(output_dir)
    dataset = generate_dataset(first)
    outcomes, rows = [], []
    for spec in specs:
        for o in run_train(spec, out / spec.name, dataset):
            outcomes.append(o)
            rows.append([spec.name if spec.repeats == 1 else f"{spec.name}/seed_{o.seed}",
                         spec.train.selector.kind, spec.train.selector.M, o.result.final_accuracy,
                         o.mean_select_us, o.mean_softmax_us])
    out.mkdir(parents=True, exist_ok=True)
    table = out / "comparison.csv"
    _write_table(table, COMPARE_COLUMNS, rows)
    return table, outcomes


def _dedupe(values: list) -> list:
    seen, out = set(), []
    for v in values:
        if v in seen:
            continue
        seen.add(v)
        out.append(v)
    if len(out) != len(values):
        warnings.warn(f"duplicate ablation values removed: {values} -> {out}", stacklevel=3)
    return out


def ablation_spec(base: RunSpec, axis: str, value) -> RunSpec:
    """``base`` with one axis set to ``value``."""
    train_cfg = base.train
    if axis in ("M", "L", "T"):
        value = int(value)
        selector = dataclasses.replace(train_cfg.selector, **{axis: value})
        train_cfg = dataclasses.replace(train_cfg, selector=selector)
    elif axis == "tau_cp":
        value = float(value)
        schedule = train_cfg.schedule or AllocationSchedule()
        schedule = dataclasses.replace(schedule, tau_start=value, tau_end=value)
        train_cfg = dataclasses.replace(train_cfg, schedule=schedule)
    else:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    return dataclasses.replace(base, name=f"{base.name}-{axis}-{value}", train=train_cfg)


def run_ablation(base: RunSpec, axis: str, values: list, output_dir) -> tuple[Path, list[RunOutcome]]:
    """Sweep one axis of ``base``, holding everything else fixed.

    Duplicate values are dropped with a warning; the order of first
    appearance is kept.
    """
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    if not values:
        raise ValueError("an ablation needs at least one value")
    cast = float if axis == "tau_cp" else int
    values = _dedupe([cast(v) for v in values])
    specs = [ablation_spec(base, axis, v) for v in values]
    out = Path(output_dir)
    dataset = generate_dataset(base.dataset)
    outcomes, rows = [], []
    for value, spec in zip(values, specs):
        for o in run_train(spec, out / f"{axis}_{value}", dataset):
            outcomes.append(o)
            sel = spec.train.selector
            sched = spec.train.schedule
            rows.append([axis, value, sel.kind, sel.M, sel.L, sel.T, sched.tau_start if sched else None,
                         o.result.final_accuracy, o.mean_overlap, o.mean_select_us, o.mean_softmax_us,
                         o.result.active_class_total])
    out.mkdir(parents=True, exist_ok=True)
    table = out / "ablation.csv"
    _write_table(table, ABLATION_COLUMNS, rows)
    return table, outcomes
