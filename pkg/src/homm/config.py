"""Flat ``key = value`` run configuration files.

Blank lines, lines starting with ``#`` and trailing `` # ...`` comments are
ignored. Keys are either :class:`~homm.trainer.TrainConfig` fields or
dataset keys listed in :data:`DATA_KEYS`. Tuples are comma-separated; ``none`` clears optional
values; booleans are ``true``/``false``.
"""

from __future__ import annotations

import math
import re
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from homm.data import ShiftSpec, gen_gaussian_mixture_pair, gen_two_moons_pair, load_features_csv
from homm.trainer import ConfigError, TrainConfig

DATASETS = ("gaussian_mixture", "two_moons", "csv")


@dataclass
class DataConfig:
    dataset: str = "gaussian_mixture"
    rotation_deg: float = 40.0
    translation: tuple[float, ...] = (0.0, 0.0)
    scale: float = 1.0
    class_count: int = 3
    samples_per_class: int = 500
    noise_std: float = 0.3
    data_seed: int = 0
    source_csv: str | None = None
    target_csv: str | None = None

    def __post_init__(self):
        self.translation = tuple(float(t) for t in self.translation)
        if self.dataset not in DATASETS:
            raise ConfigError("dataset", f"must be one of {', '.join(DATASETS)}, "
                                         f"got {self.dataset!r}")
        if self.dataset == "csv" and not (self.source_csv and self.target_csv):
            raise ConfigError("source_csv", "csv datasets need source_csv and target_csv")
        if self.dataset != "csv":
            try:
                self.shift_spec()
            except ValueError as exc:
                raise ConfigError("dataset", str(exc)) from None

    def shift_spec(self) -> ShiftSpec:
        return ShiftSpec(rotation=math.radians(self.rotation_deg), translation=self.translation,
                         scale=self.scale, class_count=self.class_count,
                         samples_per_class=self.samples_per_class, noise_std=self.noise_std,
                         seed=self.data_seed)

    def load(self, base_dir: Path | None = None):
        if self.dataset == "gaussian_mixture":
            return gen_gaussian_mixture_pair(self.shift_spec())
        if self.dataset == "two_moons":
            return gen_two_moons_pair(self.shift_spec())
        base = base_dir or Path(".")
        return (load_features_csv(base / self.source_csv, "source"),
                load_features_csv(base / self.target_csv, "target"))

    def describe(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


DATA_KEYS = {f.name for f in fields(DataConfig)}


def _types(cls):
    return typing.get_type_hints(cls)


def _convert(key: str, raw: str, tp):
    raw = raw.strip()
    args = typing.get_args(tp)
    if type(None) in args:
        if raw.lower() == "none":
            return None
        tp = next(a for a in args if a is not type(None))
    try:
        if tp is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError(f"expected true or false, got {raw!r}")
            return raw.lower() == "true"
        if typing.get_origin(tp) is tuple:
            inner = typing.get_args(tp)[0]
            return tuple(inner(v) for v in raw.split(",") if v.strip())
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {raw!r}: {exc}") from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    return str(value)


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        # a '#' after whitespace starts a trailing comment
        line = re.split(r"\s#", line, maxsplit=1)[0].strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"{source}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in pairs:
            raise ConfigError(key, f"{source}: duplicate key on line {lineno}")
        pairs[key] = value
    return pairs


def build_configs(pairs: dict[str, str]) -> tuple[TrainConfig, DataConfig]:
    train_types, data_types = _types(TrainConfig), _types(DataConfig)
    train_kw, data_kw = {}, {}
    for key, raw in pairs.items():
        if key in train_types:
            train_kw[key] = _convert(key, raw, train_types[key])
        elif key in data_types:
            data_kw[key] = _convert(key, raw, data_types[key])
        else:
            raise ConfigError(key, "unknown configuration key")
    try:
        return TrainConfig(**train_kw), DataConfig(**data_kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError("config", str(exc)) from None


def parse_config_text(text: str, source: str = "<config>"):
    return build_configs(parse_pairs(text, source))


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from None
    return parse_config_text(text, str(path))


def config_pairs(train: TrainConfig, data: DataConfig) -> dict[str, str]:
    out = {f.name: _format(getattr(train, f.name)) for f in fields(train)}
    out.update({f.name: _format(getattr(data, f.name)) for f in fields(data)})
    return out


def format_config(train: TrainConfig, data: DataConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config_pairs(train, data).items())
