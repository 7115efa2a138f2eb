"""Run configuration: one file (JSON or key=value), every field defaulted."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .dataio import SynthConfig, default_data_dir
from .localizer import DEFAULT_NMS_IOU, DEFAULT_THRESHOLDS
from .evalkit import DEFAULT_IOU_THRESHOLDS
from .model import ModelDims, ModelOptions
from .objective import Hyperparams


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    hidden: int = 128
    attention: int = 128
    hp: Hyperparams = field(default_factory=Hyperparams)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelOptions = field(default_factory=ModelOptions)
    data_dir: str = ""
    out_dir: str = "star_out"
    checkpoint: str = ""
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    iou_thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS
    nms_iou: float = DEFAULT_NMS_IOU
    seed: int = 0
    max_steps: int = 2000
    checkpoint_every: int = 100

    def __post_init__(self):
        if not self.data_dir:
            self.data_dir = str(default_data_dir())
        if not self.checkpoint:
            self.checkpoint = str(Path(self.out_dir) / "model.ckpt")
        self.thresholds = tuple(float(t) for t in self.thresholds)
        self.iou_thresholds = tuple(float(t) for t in self.iou_thresholds)
        if self.hidden <= 0 or self.attention <= 0:
            raise ConfigError("hidden and attention must be positive")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if self.checkpoint_every <= 0:
            raise ConfigError("checkpoint_every must be positive")
        if not self.thresholds or any(not 0 <= t < 1 for t in self.thresholds):
            raise ConfigError("thresholds must be a nonempty list in [0, 1)")
        if not self.iou_thresholds or any(not 0 < t <= 1 for t in self.iou_thresholds):
            raise ConfigError("iou_thresholds must be a nonempty list in (0, 1]")
        if not 0 < self.nms_iou <= 1:
            raise ConfigError("nms_iou must lie in (0, 1]")

    @property
    def dims(self) -> ModelDims:
        return ModelDims(N=self.synth.N, K=self.synth.K, H=self.hidden, A=self.attention,
                         C=self.synth.num_classes + 1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"hp": Hyperparams, "synth": SynthConfig, "model": ModelOptions}


def _coerce(value: Any, like: Any, key: str):
    if isinstance(value, str):
        text = value.strip()
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
    if isinstance(like, bool):
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(like, int) and not isinstance(value, bool) and isinstance(value, (int, float)):
        if float(value) != int(value):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(like, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(like, tuple):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        inner = like[0] if like else None
        return tuple(_coerce(v, inner, key) if inner is not None else v for v in value)
    if like is None or isinstance(like, str):
        return value if like is None or isinstance(value, str) else str(value)
    raise ConfigError(f"{key}: cannot use {value!r} here")


def _flatten(raw: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in raw.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def build_config(values: Mapping[str, Any]) -> RunConfig:
    """RunConfig from dotted keys (``hp.lr``, ``synth.K``, ``seed``...)."""
    top: dict[str, Any] = {}
    sections: dict[str, dict[str, Any]] = {s: {} for s in _SECTIONS}
    top_defaults = {f.name: f for f in dataclasses.fields(RunConfig)}
    for key, value in _flatten(values).items():
        head, _, rest = key.partition(".")
        if rest:
            if head not in _SECTIONS:
                raise ConfigError(f"unknown config section {head!r} in {key!r}")
            cls = _SECTIONS[head]
            fields = {f.name: f for f in dataclasses.fields(cls)}
            if rest not in fields:
                raise ConfigError(f"unknown config field {key!r}")
            like = _default_of(fields[rest])
            sections[head][rest] = _coerce(value, like, key)
        else:
            if key not in top_defaults or key in _SECTIONS:
                raise ConfigError(f"unknown config field {key!r}")
            top[key] = _coerce(value, _default_of(top_defaults[key]), key)
    try:
        built = {s: cls(**sections[s]) for s, cls in _SECTIONS.items()}
        return RunConfig(**top, **built)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _default_of(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
        return f.default_factory()  # type: ignore[misc]
    return None


def parse_config_text(text: str) -> dict[str, Any]:
    """JSON object, or one ``key = value`` per line (``#`` starts a comment)."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            raw = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad JSON config: {exc}") from None
        return _flatten(raw)
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values.update(parse_config_text(text))
    values.update(overrides or {})
    return build_config(values)
