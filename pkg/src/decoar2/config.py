"""Training configuration, presets and strict JSON loading."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .core import LrSchedule, TemperatureSchedule
from .encoder import EncoderConfig, MaskConfig
from .errors import ConfigError
from .objectives import LossConfig
from .quantizer import CodebookConfig

PRESETS = ("desk", "paper")
FRAME_SHIFT = 0.010


@dataclass
class TrainConfig:
    preset: str = "desk"
    encoder: EncoderConfig = field(default_factory=EncoderConfig.desk)
    mask: MaskConfig = field(default_factory=MaskConfig)
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    temperature: TemperatureSchedule = field(default_factory=lambda: TemperatureSchedule(2.0, 0.5, 0.999))
    batch_size: int = 16
    max_utterance_seconds: float = 15.0
    total_steps: int = 2000
    warmup_steps: int = 200
    peak_lr: float = 2e-3
    rng_seed: int = 0
    checkpoint_interval: int = 0
    grad_clip: float = 5.0
    use_vq: bool = True

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; expected one of {PRESETS}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_utterance_seconds <= 0 or self.checkpoint_interval < 0:
            raise ConfigError("max_utterance_seconds must be positive, checkpoint_interval >= 0")
        self.lr_schedule  # validates warmup / total / peak

    @property
    def lr_schedule(self) -> LrSchedule:
        return LrSchedule(self.warmup_steps, self.peak_lr, self.total_steps)

    @property
    def max_frames(self) -> int:
        return int(round(self.max_utterance_seconds / FRAME_SHIFT))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def preset(name: str) -> TrainConfig:
    if name == "desk":
        return TrainConfig()
    if name == "paper":
        return TrainConfig(
            preset="paper",
            encoder=EncoderConfig.paper(),
            temperature=TemperatureSchedule(),
            batch_size=128,
            total_steps=337500,
            warmup_steps=32000,
            peak_lr=3e-4,
        )
    raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")


_NESTED = {
    "encoder": EncoderConfig,
    "mask": MaskConfig,
    "codebook": CodebookConfig,
    "loss": LossConfig,
    "temperature": TemperatureSchedule,
}


def _merge(cls, base, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return dataclasses.replace(base, **data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> TrainConfig:
    """Preset defaults overlaid with ``data``; unknown keys anywhere are an error."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    base = preset(data.get("preset", "desk"))
    top = {}
    for key, value in data.items():
        if key in _NESTED:
            top[key] = _merge(_NESTED[key], getattr(base, key), value, key)
        else:
            top[key] = value
    return _merge(TrainConfig, base, top, "config")


def load_config(path) -> TrainConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)
