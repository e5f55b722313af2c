"""Run configuration: TOML sections mapped onto the component dataclasses.

Every field has a default, so an empty file is a valid config. Unknown keys
and ill-typed values raise :class:`ConfigError` carrying the dotted key path.
"""

from __future__ import annotations

import dataclasses
import os
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from adapter.dino import DinoConfig
from adapter.errors import ConfigError
from adapter.fewshot import FewShotConfig
from adapter.labelprop import LabelPropConfig
from adapter.model import ModelConfig
from adapter.data import SyntheticSpec

OUTPUT_DIR_ENV = "ADAPTER_OUTPUT_DIR"


@dataclass
class DataConfig:
    source: str = "synthetic"           # "synthetic" or "folder"
    base_dir: str = ""
    target_dir: str = ""
    split_fraction: float = 0.2
    split_seed: int = 0
    mean: float = 0.5
    std: float = 0.5
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "float32"          # or "float64"
    threads: int = 1
    output_dir: str = "runs/default"
    checkpoint_every: int = 0           # 0: only the final checkpoint
    ssl: bool = True                    # False: supervised base-class pretraining


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    dino: DinoConfig = field(default_factory=DinoConfig)
    fewshot: FewShotConfig = field(default_factory=FewShotConfig)
    labelprop: LabelPropConfig = field(default_factory=LabelPropConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def output_dir(self) -> Path:
        """``[run] output_dir`` unless the environment overrides it."""
        return Path(os.environ.get(OUTPUT_DIR_ENV) or self.run.output_dir)


_CHOICES = {
    "run.precision": ("float32", "float64"),
    "data.source": ("synthetic", "folder"),
    "model.gelu": ("exact", "tanh"),
    "labelprop.mode": ("closed", "iterative"),
    "data.synthetic.domain_transform": ("identity", "invert", "blur", "invert_blur"),
}


# fields filled from other sections rather than read from the file
_DERIVED = {"dino.norm_mean", "dino.norm_std"}


def _coerce(value: Any, hint, path: str):
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{path} must be a table", key=path)
        return _build(hint, value, path)
    if origin is tuple:
        args = typing.get_args(hint)
        if not isinstance(value, list) or len(value) != len(args):
            raise ConfigError(f"{path} must be a list of {len(args)} numbers", key=path)
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if origin is typing.Union:
        for arg in typing.get_args(hint):
            try:
                return _coerce(value, arg, path)
            except ConfigError:
                pass
        raise ConfigError(f"{path} has unsupported value {value!r}", key=path)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false, got {value!r}", key=path)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer, got {value!r}", key=path)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}", key=path)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string, got {value!r}", key=path)
        if path in _CHOICES and value not in _CHOICES[path]:
            raise ConfigError(f"{path} must be one of {_CHOICES[path]}, got {value!r}", key=path)
        return value
    raise ConfigError(f"{path}: no conversion for {hint}", key=path)


def _build(cls, table: Dict[str, Any], prefix: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in table.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in names or path in _DERIVED:
            raise ConfigError(f"unknown config key {path!r}", key=path)
        kwargs[key] = _coerce(value, hints[key], path)
    return cls(**kwargs)


def _validate(cfg: Config) -> None:
    checks = [
        ("labelprop.alpha", 0.0 <= cfg.labelprop.alpha < 1.0, "must lie in [0, 1)"),
        ("labelprop.rcond", cfg.labelprop.rcond >= 0, "must be >= 0"),
        ("labelprop.sigma", cfg.labelprop.sigma == "auto" or
         (not isinstance(cfg.labelprop.sigma, str) and cfg.labelprop.sigma > 0), "must be > 0 or 'auto'"),
        ("data.split_fraction", 0.0 < cfg.data.split_fraction < 1.0, "must lie in (0, 1)"),
        ("data.std", cfg.data.std > 0, "must be > 0"),
        ("run.threads", cfg.run.threads >= 1, "must be >= 1"),
        ("model.embed_dim", cfg.model.embed_dim % cfg.model.heads == 0, "must be divisible by model.heads"),
        ("model.replicas", cfg.model.replicas >= 1, "must be >= 1"),
        ("dino.batch_size", cfg.dino.batch_size >= 1, "must be >= 1"),
        ("dino.teacher_momentum", 0.0 <= cfg.dino.teacher_momentum <= 1.0, "must lie in [0, 1]"),
        ("dino.center_momentum", 0.0 <= cfg.dino.center_momentum < 1.0, "must lie in [0, 1)"),
        ("dino.student_temp", cfg.dino.student_temp > 0, "must be > 0"),
        ("dino.teacher_temp", cfg.dino.teacher_temp > 0, "must be > 0"),
        ("fewshot.ways", cfg.fewshot.ways >= 2, "must be >= 2"),
        ("fewshot.shots", cfg.fewshot.shots >= 1, "must be >= 1"),
        ("fewshot.queries", cfg.fewshot.queries >= 1, "must be >= 1"),
        ("fewshot.batch_size", cfg.fewshot.batch_size >= 1, "must be >= 1"),
        ("fewshot.lr", cfg.fewshot.lr >= 0, "must be >= 0"),
    ]
    for path, ok, msg in checks:
        if not ok:
            raise ConfigError(f"{path} {msg}", key=path)
    if cfg.data.source == "folder" and not (cfg.data.base_dir and cfg.data.target_dir):
        raise ConfigError("data.source = 'folder' needs data.base_dir and data.target_dir", key="data.base_dir")


def from_dict(table: Dict[str, Any]) -> Config:
    cfg = _build(Config, table, "")
    _validate(cfg)
    cfg.dino.norm_mean, cfg.dino.norm_std = cfg.data.mean, cfg.data.std
    return cfg


def load_config(path: Optional[os.PathLike] = None) -> Config:
    """Parse a TOML file (``None`` gives the defaults); relative data paths resolve against the file."""
    if path is None:
        return from_dict({})
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        table = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = from_dict(table)
    for attr in ("base_dir", "target_dir"):
        value = getattr(cfg.data, attr)
        if value and not Path(value).is_absolute():
            setattr(cfg.data, attr, str(path.parent / value))
    return cfg


def to_dict(cfg) -> Dict[str, Any]:
    """Plain nested dict (tuples become lists) suitable for echoing into run directories."""
    def conv(v, prefix=""):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name), f"{prefix}{f.name}.") for f in dataclasses.fields(v)
                    if f"{prefix}{f.name}" not in _DERIVED}
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        return v
    return conv(cfg)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def dumps(cfg: Config) -> str:
    """Serialise to TOML text that :func:`load_config` reads back to an equal config."""
    lines = []

    def table(name, d):
        scalars = {k: v for k, v in d.items() if not isinstance(v, dict)}
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in scalars.items())
        lines.append("")
        for k, v in d.items():
            if isinstance(v, dict):
                table(f"{name}.{k}", v)

    for section, body in to_dict(cfg).items():
        table(section, body)
    return "\n".join(lines)
