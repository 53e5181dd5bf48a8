"""Run configuration: every tunable default in one nested, hashable document.

Config files are YAML or JSON (JSON is valid YAML). Keys mirror the
dataclass fields below; anything omitted keeps its default. A single root
``seed`` drives every random stream in a run.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dsp_features import MfccConfig, PitchConfig
from .encoders import ConfigError
from .fusion_model import ModelConfig
from .synth_corpus import ClassParams, CorpusSpec
from .training import TrainConfig
from .trend_analysis import TrendConfig

CONFIG_SCHEMA_VERSION = 1


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads exponent floats without a dot (``3e-5``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def _yaml(text: str):
    return yaml.load(text, Loader=_Loader)
_SEEDED = ("corpus", "train", "trend")


@dataclass(frozen=True)
class SplitConfig:
    ratio: tuple[int, int] = (4, 1)
    val_subjects: int = 2
    n_folds: int = 5


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    mfcc: MfccConfig = field(default_factory=MfccConfig)
    pitch: PitchConfig = field(default_factory=PitchConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    trend: TrendConfig = field(default_factory=TrendConfig)

    def __post_init__(self):
        # the root seed wins over per-group seed fields
        for name in _SEEDED:
            sub = getattr(self, name)
            if sub.seed != self.seed:
                object.__setattr__(self, name, dataclasses.replace(sub, seed=self.seed))

    def to_dict(self) -> dict:
        d = to_plain(self)
        for name in _SEEDED:
            d[name].pop("seed", None)
        d["schema_version"] = CONFIG_SCHEMA_VERSION
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())


def to_plain(obj):
    """Dataclasses/tuples/dicts -> JSON-ready dicts and lists."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    return obj


def _as_tuple(v):
    return tuple(_as_tuple(x) for x in v) if isinstance(v, (list, tuple)) else v


def from_plain(cls, data: dict, path: str = ""):
    """Rebuild dataclass ``cls`` from ``data`` on top of its defaults; unknown keys are errors."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    base = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(base, name)
        where = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = from_plain(type(default), value, where)
        elif name == "class_params":
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a mapping of label to parameters")
            kwargs[name] = {k: _class_params(v, f"{where}.{k}") for k, v in value.items()}
        elif isinstance(value, dict) and not isinstance(default, dict):
            raise ConfigError(f"{where}: expected a value, got a mapping")
        elif isinstance(default, tuple):
            kwargs[name] = _as_tuple(value)
        else:
            kwargs[name] = value
    try:
        return dataclasses.replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _class_params(v, where: str) -> ClassParams:
    if not isinstance(v, dict):
        raise ConfigError(f"{where}: expected a mapping")
    try:
        return ClassParams(**v)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _class_params_defaults(d: dict) -> dict:
    # partial class_params entries inherit the remaining fields from the default of that label
    cp = d.get("corpus", {}).get("class_params")
    if isinstance(cp, dict):
        defaults = to_plain(CorpusSpec().class_params)
        for label, v in cp.items():
            if isinstance(v, dict) and label in defaults:
                cp[label] = {**defaults[label], **v}
    return d


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    data = {}
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} not found")
        text = Path(path).read_text()
        try:
            data = _yaml(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    data.pop("schema_version", None)
    for item in overrides or []:
        apply_override(data, item)
    return from_plain(RunConfig, _class_params_defaults(data))


def apply_override(data: dict, item: str) -> None:
    """``a.b.c=value``; the value is parsed as YAML (numbers, lists, booleans)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key.path=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {item!r}: {p} is not a group")
    node[parts[-1]] = _yaml(raw)


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
