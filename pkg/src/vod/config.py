"""Run configuration: defaults < config file < command-line flags, with a lockfile snapshot."""

from __future__ import annotations

import json
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .backbone import ExpansionConfig
from .errors import ConfigTypeError, ConflictingFlags, UnknownKey
from .evaluator import EvalOptions
from .segmenter import SamplingConfig
from .trainer import TrainConfig

LOCKFILE = "config.lock.json"


@dataclass(frozen=True)
class NetworkOptions:
    toy_scale: float = 1.0
    head_dim: typing.Optional[int] = None
    dropout: float = 0.5


@dataclass(frozen=True)
class RobustOptions:
    kinds: tuple = ("gaussian_blur", "gaussian_noise", "compression")
    severities: tuple = (0, 1, 2, 3, 4, 5)


@dataclass(frozen=True)
class Paths:
    manifest: typing.Optional[str] = None
    out: typing.Optional[str] = None
    cache_dir: typing.Optional[str] = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    mode: str = "cfd"
    protocol: str = "intra"
    detector: str = "face-alignment"
    jobs: int = 1
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    expansion: ExpansionConfig = field(default_factory=ExpansionConfig)
    network: NetworkOptions = field(default_factory=NetworkOptions)
    eval: EvalOptions = field(default_factory=EvalOptions)
    robust: RobustOptions = field(default_factory=RobustOptions)
    paths: Paths = field(default_factory=Paths)

    def to_json(self) -> dict:
        return _jsonable(asdict(self))

    def experiment(self) -> dict:
        """Everything except filesystem locations; the identity hashed into reports."""
        d = self.to_json()
        d.pop("paths")
        return d


SECTIONS = {f.name: f for f in fields(RunConfig) if f.name in
            ("sampling", "train", "expansion", "network", "eval", "robust", "paths")}
# seeds that follow the master seed unless set explicitly
SEED_FOLLOWERS = ("train.seed", "eval.seed")


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _section_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _coerce(key: str, value, hint, default):
    """Check ``value`` against the field type; returns the value in its canonical form."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if value is None:
            return None
        hint = next(a for a in args if a is not type(None))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigTypeError(key, "bool", type(value).__name__)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigTypeError(key, "int", type(value).__name__)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigTypeError(key, "float", type(value).__name__)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigTypeError(key, "str", type(value).__name__)
        return value
    if hint is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigTypeError(key, "list", type(value).__name__)
        return tuple(value)
    return value


def flatten(doc: dict) -> dict:
    """Nested config document to dotted keys; unknown keys raise."""
    out = {}
    top = _section_types(RunConfig)
    for k, v in doc.items():
        if k in SECTIONS:
            if not isinstance(v, dict):
                raise ConfigTypeError(k, "object", type(v).__name__)
            names = _section_types(SECTIONS[k].default_factory)
            for kk, vv in v.items():
                if kk not in names:
                    raise UnknownKey(f"{k}.{kk}")
                out[f"{k}.{kk}"] = vv
        elif k in top:
            out[k] = v
        else:
            raise UnknownKey(k)
    return out


def build(values: dict, base: RunConfig | None = None) -> RunConfig:
    """Apply dotted-key ``values`` onto ``base`` with type checks."""
    base = base or RunConfig()
    top_types = _section_types(RunConfig)
    top, sections = {}, {}
    for key, value in values.items():
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in SECTIONS:
                raise UnknownKey(key)
            types = _section_types(SECTIONS[sec].default_factory)
            if name not in types:
                raise UnknownKey(key)
            sections.setdefault(sec, {})[name] = _coerce(key, value, types[name], None)
        else:
            if key not in top_types or key in SECTIONS:
                raise UnknownKey(key)
            top[key] = _coerce(key, value, top_types[key], None)
    kwargs = dict(top)
    for sec, vals in sections.items():
        try:
            kwargs[sec] = replace(getattr(base, sec), **vals)
        except (TypeError, ValueError) as e:
            raise ConfigTypeError(sec, "a valid section", str(e)) from e
    return replace(base, **kwargs)


def resolve_config(flags: dict | None = None, config_file=None, defaults: RunConfig | None = None,
                   lock=None) -> RunConfig:
    """Merge defaults, an optional JSON config file and flags (dotted keys); flags win.

    ``lock`` re-resolves a previous run's snapshot and cannot be combined with a file.
    """
    if lock is not None and config_file is not None:
        raise ConflictingFlags("--config and --lock are mutually exclusive")
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    file_values = {}
    src = lock if lock is not None else config_file
    if src is not None:
        doc = src if isinstance(src, dict) else json.loads(Path(src).read_text())
        file_values = flatten(doc)
    for k in flags:
        if "." not in k and k not in _section_types(RunConfig):
            raise UnknownKey(k)
    merged = {**file_values, **flags}
    cfg = build(merged, defaults)
    follow = {k: cfg.seed for k in SEED_FOLLOWERS if k not in merged}
    return build(follow, cfg) if follow else cfg


def write_lock(cfg: RunConfig, run_dir) -> Path:
    path = Path(run_dir) / LOCKFILE
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
    return path


def read_lock(run_dir) -> RunConfig:
    path = Path(run_dir)
    path = path / LOCKFILE if path.is_dir() else path
    return resolve_config(lock=json.loads(path.read_text()))


GRID_KEYS = {"c_sl": "sampling.c_sl", "c_in": "sampling.c_in", "mode": "mode"}


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    values = {GRID_KEYS.get(k, k): v for k, v in overrides.items()}
    return build(values, cfg)
