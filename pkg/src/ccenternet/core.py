"""Shared value types, configuration schema and seeding."""

from __future__ import annotations

import dataclasses
import hashlib
import math
import random
import re
from dataclasses import dataclass, field, fields
from typing import Any, Mapping

import numpy as np
import torch
import yaml

# Alphabetical order of the five class names gives stable ids.
CLASS_NAMES: tuple[str, ...] = ("dotted", "folded", "malposed", "normal", "unfiltered")
# Column order of the per-class AP report.
REPORT_CLASS_ORDER: tuple[str, ...] = ("normal", "dotted", "malposed", "unfiltered", "folded")


class CCenterNetError(Exception):
    exit_code = 1


class ConfigError(CCenterNetError, ValueError):
    exit_code = 2


class DataError(CCenterNetError, ValueError):
    exit_code = 3


class DivergenceError(CCenterNetError, RuntimeError):
    exit_code = 4


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int = 0

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {coords}")
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0

    @property
    def area(self) -> float:
        return self.width * self.height

    def clip(self, width: float, height: float) -> BoundingBox | None:
        """Clip to ``[0, width] x [0, height]``; None if nothing is left."""
        x0, y0 = max(self.x_min, 0.0), max(self.y_min, 0.0)
        x1, y1 = min(self.x_max, float(width)), min(self.y_max, float(height))
        if x1 <= x0 or y1 <= y0:
            return None
        return BoundingBox(x0, y0, x1, y1, self.class_id)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray  # (3, H, W) float in [0, 1]
    boxes: tuple[BoundingBox, ...]
    id: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValueError(f"pixels must be (3, H, W), got {self.pixels.shape}")
        _, h, w = self.pixels.shape
        if h <= 0 or w <= 0:
            raise ValueError("empty image")
        object.__setattr__(self, "boxes", tuple(self.boxes))
        for b in self.boxes:
            if b.x_min < 0 or b.y_min < 0 or b.x_max > w or b.y_max > h:
                raise ValueError(f"box {b.as_tuple()} outside {w}x{h} image")

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: BoundingBox

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class AblationFlags:
    augmentation: bool = True
    cbam: bool = True
    fpn: bool = True
    dcn: bool = True
    acon: bool = True

    @classmethod
    def ablation_rows(cls) -> list[AblationFlags]:
        """The six cumulative module rows of the ablation table."""
        return [
            cls(False, False, False, False, False),
            cls(True, False, False, False, False),
            cls(True, True, False, False, False),
            cls(True, True, True, False, False),
            cls(True, True, True, True, False),
            cls(True, True, True, True, True),
        ]


_FLAG_KEYS = tuple(f.name for f in fields(AblationFlags))


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (512, 512)
    n_classes: int = len(CLASS_NAMES)
    output_stride: int = 4
    base_width: int = 64
    fpn_channels: int = 256
    head_channels: int = 64
    ablation: AblationFlags = field(default_factory=AblationFlags)
    lambda_reg: float | None = 0.1
    lambda_off: float | None = 1.0
    top_k: int = 100
    confidence_threshold: float = 0.05
    gaussian_iou: float = 0.7
    cbam_reduction: int = 16
    cbam_kernel: int = 7
    letterbox_fill: float = 0.5
    class_names: tuple[str, ...] = CLASS_NAMES

    @property
    def output_size(self) -> tuple[int, int]:
        h, w = self.input_size
        return h // self.output_stride, w // self.output_stride

    def to_dict(self) -> dict[str, Any]:
        """Flat key-value form; ablation flags become top-level keys."""
        out: dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "ablation":
                out.update(dataclasses.asdict(value))
            elif isinstance(value, tuple):
                out[f.name] = list(value)
            else:
                out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ModelConfig:
        return validate_config(data)

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)


MODEL_KEYS = tuple(f.name for f in fields(ModelConfig) if f.name != "ablation") + _FLAG_KEYS


def _coerce_flags(value: Any) -> AblationFlags:
    if isinstance(value, AblationFlags):
        return value
    if isinstance(value, Mapping):
        unknown = set(value) - set(_FLAG_KEYS)
        if unknown:
            raise ConfigError(f"unknown ablation flags {sorted(unknown)}")
        return AblationFlags(**{k: bool(v) for k, v in value.items()})
    raise ConfigError(f"cannot interpret ablation flags from {value!r}")


def validate_config(cfg: ModelConfig | Mapping[str, Any]) -> ModelConfig:
    """Fill defaults and reject inconsistent model configurations.

    Accepts either a ``ModelConfig`` (fields left as ``None`` are defaulted)
    or a flat mapping as produced by :meth:`ModelConfig.to_dict`.
    """
    defaults = ModelConfig()
    if isinstance(cfg, ModelConfig):
        values = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    else:
        values = {}
        flags = {}
        for key, value in cfg.items():
            if key in _FLAG_KEYS:
                flags[key] = value
            elif key == "ablation":
                flags.update(dataclasses.asdict(_coerce_flags(value)))
            elif key in MODEL_KEYS:
                values[key] = value
            else:
                raise ConfigError(f"unknown model config key {key!r}")
        values["ablation"] = AblationFlags(**{k: bool(v) for k, v in flags.items()})

    for f in fields(defaults):
        if values.get(f.name) is None:
            values[f.name] = getattr(defaults, f.name)

    try:
        h, w = (int(v) for v in values["input_size"])
    except (TypeError, ValueError):
        raise ConfigError(f"input_size must be (H, W), got {values['input_size']!r}") from None
    values["input_size"] = (h, w)
    values["class_names"] = tuple(str(n) for n in values["class_names"])
    values["ablation"] = _coerce_flags(values["ablation"])
    for key in ("n_classes", "output_stride", "base_width", "fpn_channels", "head_channels",
                "top_k", "cbam_reduction", "cbam_kernel"):
        values[key] = int(values[key])
    for key in ("lambda_reg", "lambda_off", "confidence_threshold", "gaussian_iou", "letterbox_fill"):
        values[key] = float(values[key])

    if h <= 0 or w <= 0:
        raise ConfigError(f"input size must be positive, got {(h, w)}")
    stride = values["output_stride"]
    if stride <= 0:
        raise ConfigError("output_stride must be positive")
    if h % stride or w % stride:
        raise ConfigError(f"output stride {stride} must divide input size {(h, w)}")
    if h % 32 or w % 32:
        raise ConfigError(f"input size {(h, w)} must be divisible by the backbone stride 32")
    for key in ("n_classes", "base_width", "fpn_channels", "head_channels", "cbam_reduction"):
        if values[key] <= 0:
            raise ConfigError(f"{key} must be positive")
    if values["lambda_reg"] <= 0 or values["lambda_off"] <= 0:
        raise ConfigError("loss weights must be > 0")
    if values["top_k"] < 1:
        raise ConfigError("top_k must be >= 1")
    if values["cbam_kernel"] % 2 == 0:
        raise ConfigError("cbam_kernel must be odd")
    if not 0.0 < values["gaussian_iou"] < 1.0:
        raise ConfigError("gaussian_iou must lie in (0, 1)")
    if len(values["class_names"]) != values["n_classes"]:
        raise ConfigError(
            f"{len(values['class_names'])} class names for n_classes={values['n_classes']}"
        )
    return ModelConfig(**values)


# YAML 1.1 leaves exponent floats without a dot ("1e-3") as strings.
_FLOAT_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)[eE][+-]?\d+$")


def _numeric(value: Any) -> Any:
    if isinstance(value, str) and _FLOAT_RE.match(value.strip()):
        return float(value)
    if isinstance(value, list):
        return [_numeric(v) for v in value]
    return value


def dump_config(data: Mapping[str, Any]) -> str:
    return yaml.safe_dump(dict(data), sort_keys=True)


def load_config_text(text: str) -> dict[str, Any]:
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError("config file must be a flat key-value mapping")
    for key, value in data.items():
        if isinstance(value, dict):
            raise ConfigError(f"config must be flat, key {key!r} holds a mapping")
    return {key: _numeric(value) for key, value in data.items()}


def parse_override(item: str) -> tuple[str, Any]:
    """Parse ``key=value``; the value is read as a YAML scalar or list."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from None
    if isinstance(value, str) and "," in value:
        value = [yaml.safe_load(p) for p in value.split(",")]
    return key, _numeric(value)


class RngState:
    """Root of all randomness. Child streams are derived by name.

    ``child("augment")`` always returns the same stream for the same root
    seed, independent of how many other children were drawn before it.
    """

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be >= 0")
        self.seed = int(seed)

    def _key(self, name: str) -> list[int]:
        digest = hashlib.sha256(name.encode()).digest()
        return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]

    def seed_sequence(self, name: str) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=self.seed, spawn_key=self._key(name))

    def child(self, name: str) -> np.random.Generator:
        return np.random.default_rng(self.seed_sequence(name))

    def child_seed(self, name: str) -> int:
        return int(self.seed_sequence(name).generate_state(1, dtype=np.uint64)[0] >> 1)

    def torch_generator(self, name: str) -> torch.Generator:
        gen = torch.Generator()
        gen.manual_seed(self.child_seed(name))
        return gen

    def __repr__(self):
        return f"RngState(seed={self.seed})"


def seed_all(seed: int) -> RngState:
    """Seed the global generators and return the root state for child streams."""
    state = RngState(seed)
    random.seed(state.child_seed("python"))
    np.random.seed(state.child_seed("numpy") % 2**32)
    torch.manual_seed(state.child_seed("torch"))
    return state
