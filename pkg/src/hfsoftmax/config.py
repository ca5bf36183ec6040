"""Run configuration files.

A run is described by one YAML file::

    name: hf-m200
    output_dir: runs/hf-m200      # optional, defaults to runs/<name>
    seeds: [0, 1]                 # optional, one training run per seed
    dataset:  {n_classes: 2000, dim: 64, ...}
    selector: {kind: hf, M: 200, L: 20, T: 200, ...}
    schedule: {tau_start: 0.7, ...}   # optional, turns on adaptive allocation
    train:    {epochs: 15, batch_size: 64, learning_rate: 0.05, ...}

Every section maps onto the fields of the matching dataclass. Unknown keys,
wrongly typed values and out-of-range values are reported with the dotted
field name and the line they appear on.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .allocation import AllocationSchedule
from .data import NUISANCE_UNITS, DatasetSpec
from .extractors import EXTRACTOR_KINDS
from .hashing_forest import SPLIT_MODES
from .selectors import SELECTOR_KINDS, SelectorConfig
from .trainer import TrainConfig

TOP_LEVEL = ("name", "output_dir", "seeds", "dataset", "selector", "schedule", "train")
SECTIONS = {"dataset": DatasetSpec, "selector": SelectorConfig, "schedule": AllocationSchedule, "train": TrainConfig}
CHOICES = {
    ("selector", "kind"): SELECTOR_KINDS,
    ("selector", "split_mode"): SPLIT_MODES,
    ("train", "extractor"): EXTRACTOR_KINDS,
    ("dataset", "nuisance_by"): NUISANCE_UNITS,
}


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` is a dotted path, ``line`` is 1-based."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None, source: str = "<config>"):
        self.field = field
        self.line = line
        self.source = source
        where = source if line is None else f"{source}:{line}"
        super().__init__(f"{where}: {field}: {message}" if field else f"{where}: {message}")


@dataclass
class RunSpec:
    name: str
    dataset: DatasetSpec
    train: TrainConfig
    output_dir: Path
    seeds: list[int] = field(default_factory=list)

    @property
    def repeats(self) -> int:
        return len(self.seeds)

    def with_seed(self, seed: int) -> TrainConfig:
        return dataclasses.replace(self.train, seed=seed)

    def as_dict(self) -> dict:
        train = dataclasses.asdict(self.train)
        return {
            "name": self.name,
            "output_dir": str(self.output_dir),
            "seeds": list(self.seeds),
            "dataset": dataclasses.asdict(self.dataset),
            "selector": train.pop("selector"),
            "schedule": train.pop("schedule"),
            "train": train,
        }


def _key_lines(node) -> dict[tuple[str, ...], int]:
    """Line of every mapping key in a composed YAML document, by key path."""
    lines: dict[tuple[str, ...], int] = {}

    def walk(n, path):
        if isinstance(n, yaml.MappingNode):
            for k, v in n.value:
                key = path + (str(k.value),)
                lines[key] = k.start_mark.line + 1
                walk(v, key)

    if node is not None:
        walk(node, ())
    return lines


def _field_types(cls) -> dict[str, str]:
    return {f.name: str(f.type) for f in dataclasses.fields(cls)}


def _coerce(value: Any, type_name: str, path: str, err) -> Any:
    """Check a scalar against a dataclass annotation such as ``int | None``."""
    options = [t.strip() for t in type_name.split("|")]
    if value is None:
        if "None" in options:
            return None
        raise err(path, "must not be null")
    for opt in options:
        if opt == "bool" and isinstance(value, bool):
            return value
        if opt == "int" and isinstance(value, int) and not isinstance(value, bool):
            return value
        if opt == "float" and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if opt == "str" and isinstance(value, str):
            return value
    expected = " or ".join(o if o != "None" else "null" for o in options)
    raise err(path, f"expected {expected}, got {type(value).__name__} {value!r}")


def _section(cls, raw: Any, name: str, err, skip=()) -> Any:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise err(name, f"expected a mapping, got {type(raw).__name__}")
    types = _field_types(cls)
    kwargs = {}
    for key, value in raw.items():
        path = f"{name}.{key}"
        if key not in types or key in skip:
            raise err(path, f"unknown field (allowed: {', '.join(k for k in types if k not in skip)})")
        choices = CHOICES.get((name, key))
        if choices is not None and value not in choices:
            raise err(path, f"unknown value {value!r}; expected one of {', '.join(choices)}")
        kwargs[key] = _coerce(value, types[key], path, err)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise err(name, str(exc)) from None


def parse_run_spec(text: str, source: str = "<config>") -> RunSpec:
    """Build a ``RunSpec`` from YAML text.

    Raises:
        ConfigError: on syntax errors, unknown fields, bad types or values.
    """
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                          line=mark.line + 1 if mark else None, source=source) from None
    lines = _key_lines(node)

    def err(path: str, message: str) -> ConfigError:
        key = tuple(path.split("."))
        line = lines.get(key) or lines.get(key[:1])
        return ConfigError(message, field=path, line=line, source=source)

    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping", source=source)
    for key in raw:
        if key not in TOP_LEVEL:
            raise err(str(key), f"unknown field (allowed: {', '.join(TOP_LEVEL)})")
    name = raw.get("name")
    if not isinstance(name, str) or not name:
        raise err("name", "required non-empty string")

    dataset = _section(DatasetSpec, raw.get("dataset"), "dataset", err)
    selector = _section(SelectorConfig, raw.get("selector"), "selector", err)
    schedule = None
    if raw.get("schedule") is not None:
        schedule = _section(AllocationSchedule, raw["schedule"], "schedule", err)
    train_raw = raw.get("train") or {}
    if not isinstance(train_raw, dict):
        raise err("train", "expected a mapping")
    train = _section(TrainConfig, {**train_raw}, "train", err, skip=("selector", "schedule"))
    try:
        train = dataclasses.replace(train, selector=selector, schedule=schedule)
    except ValueError as exc:
        raise err("train", str(exc)) from None

    seeds = raw.get("seeds", [train.seed])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise err("seeds", "expected a non-empty list of integers")
    if len(set(seeds)) != len(seeds):
        raise err("seeds", "seeds must be distinct")
    out = raw.get("output_dir", f"runs/{name}")
    if not isinstance(out, str):
        raise err("output_dir", "expected a path string")
    return RunSpec(name=name, dataset=dataset, train=train, output_dir=Path(out), seeds=list(seeds))


def load_run_spec(path) -> RunSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", source=str(path)) from None
    return parse_run_spec(text, source=str(path))


def dump_run_spec(spec: RunSpec) -> str:
    return yaml.safe_dump(spec.as_dict(), sort_keys=False)
