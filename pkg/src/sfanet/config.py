"""Run configuration: nested dataclasses loaded from TOML, overridable by dotted flags.

Every leaf field ``a.b.c`` of :class:`RunConfig` can be set in the TOML
file (``[a.b] c = ...``) or on the command line (``--a.b.c VALUE``).
Unknown keys are rejected in both places.
"""

from __future__ import annotations

import dataclasses
import sys
import types
import typing
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .data import SceneSpec
from .network import SfanetConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Bad configuration file, unknown key, or inconsistent settings."""


@dataclass
class DataConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    count: int = 1100
    val_count: int = 100


@dataclass
class PathsConfig:
    dataset_dir: str = "data/scenes"
    checkpoint_dir: str = "runs/default"


@dataclass
class BenchConfig:
    extents: tuple[int, int] = (64, 128)
    warmup: int = 20
    iters: int = 5000


@dataclass
class RunConfig:
    model: SfanetConfig = field(default_factory=lambda: SfanetConfig(width=0.25))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(eval_every=200))
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def validate(self) -> "RunConfig":
        if self.model.num_classes != self.data.scene.num_classes:
            raise ConfigError(
                f"model.num_classes={self.model.num_classes} but data.scene.num_classes={self.data.scene.num_classes}"
            )
        for label, (h, w) in (("train.augment.crop_hw", self.train.augment.crop_hw), ("model.input_hw", self.model.input_hw)):
            if h % 32 or w % 32:
                raise ConfigError(f"{label}={h}x{w} must be divisible by 32")
        if self.train.total_iters < 1 or self.train.batch_size < 1:
            raise ConfigError("train.total_iters and train.batch_size must be >= 1")
        return self


# ---------------------------------------------------------------------------
# generic dataclass <-> dict plumbing


def _hints(cls) -> dict[str, typing.Any]:
    return typing.get_type_hints(cls)


def _coerce(value, hint, key: str):
    """Convert a TOML value or command-line string to ``hint``."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or origin is types.UnionType:
        non_none = [a for a in args if a is not type(None)]
        if value is None or (isinstance(value, str) and value.lower() == "none"):
            return None
        return _coerce(value, non_none[0], key)
    if origin is tuple:
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], key) for v in value)
        if len(value) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(v, a, key) for v, a in zip(value, args))
    try:
        if hint is bool:
            if isinstance(value, str):
                if value.lower() in ("true", "1", "yes"):
                    return True
                if value.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(value)
            return bool(value)
        if hint is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if hint is float:
            return float(value)
        if hint is str:
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {hint.__name__}") from None
    raise ConfigError(f"{key}: unsupported field type {hint}")


def leaf_fields(cls, prefix: str = "") -> dict[str, typing.Any]:
    """Dotted name -> type hint for every non-dataclass field under ``cls``."""
    out = {}
    hints = _hints(cls)
    for f in fields(cls):
        hint = hints[f.name]
        name = f"{prefix}{f.name}"
        if isinstance(hint, type) and is_dataclass(hint):
            out.update(leaf_fields(hint, name + "."))
        else:
            out[name] = hint
    return out


def from_dict(cls, data: dict, prefix: str = ""):
    """Build ``cls`` from a nested mapping; missing keys keep their defaults."""
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a table")
    hints = _hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        hint, key = hints[f.name], prefix + f.name
        if isinstance(hint, type) and is_dataclass(hint):
            kwargs[f.name] = from_dict(hint, data[f.name], key + ".")
        else:
            kwargs[f.name] = _coerce(data[f.name], hint, key)
    try:
        if cls is RunConfig:
            # sections not mentioned keep RunConfig's (not the section class's) defaults
            base = RunConfig()
            return dataclasses.replace(base, **kwargs)
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from exc


def to_dict(obj) -> dict:
    return dataclasses.asdict(obj)


def _set_path(tree: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    node = tree
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults <- TOML file <- dotted overrides, then cross-section validation."""
    tree = to_dict(RunConfig())
    if path is not None:
        try:
            with open(path, "rb") as fh:
                file_tree = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        # reject unknown keys before merging so the message names the file's key
        from_dict(RunConfig, file_tree)
        _merge(tree, file_tree)
    leaves = leaf_fields(RunConfig)
    for key, raw in (overrides or {}).items():
        if key not in leaves:
            raise ConfigError(f"unknown config key: {key}")
        _set_path(tree, key, _coerce(raw, leaves[key], key))
    return from_dict(RunConfig, tree).validate()


def _merge(base: dict, update: dict) -> None:
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v


def dumps_toml(config: RunConfig) -> str:
    """Render a config as TOML (used for ``--print-config`` and run headers)."""
    lines: list[str] = []

    def fmt(v) -> str:
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        if v is None:
            raise ConfigError("None values cannot be written to TOML")
        return repr(v)

    def walk(tree: dict, prefix: str) -> None:
        scalars = {k: v for k, v in tree.items() if not isinstance(v, dict) and v is not None}
        tables = {k: v for k, v in tree.items() if isinstance(v, dict)}
        if scalars and prefix:
            lines.append(f"[{prefix}]")
        for k, v in scalars.items():
            lines.append(f"{k} = {fmt(v)}")
        if scalars:
            lines.append("")
        for k, v in tables.items():
            walk(v, f"{prefix}.{k}" if prefix else k)

    walk(to_dict(config), "")
    return "\n".join(lines).rstrip() + "\n"
