"""Experiment configuration: flat ``key = value`` files with typed parsing."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .adapters import ADAPTER_MODES
from .mtenhancer import ENHANCER_MODES
from .tensor import ConfigError

FUSION_MODES = ("fused", "vfm_only", "vlm_only", "concat_frozen")


@dataclass
class ExperimentConfig:
    seed: int = 0
    backbone_seed: int = 0
    # frozen encoders
    image_size: int = 64
    patch_size: int = 8
    vfm_width: int = 64
    vfm_depth: int = 8
    vlm_width: int = 48
    vlm_depth: int = 8
    text_width: int = 48
    n_prompts: int = 4
    # trainable modules
    adapter: str = "mvfuser"
    fusion: str = "fused"
    enhancer: str = "full"
    stride: int = 1
    d_low: int = 16
    d_state: int = 16
    scan_block: int = 16
    enhancer_repeats: int = 1
    enhancer_heads: int = 1
    t_v: int = 64
    decoder_stages: int = 3
    decoder_heads: int = 4
    # optimization
    iters: int = 2000
    warmup: int = 100
    batch_size: int = 2
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    augment: bool = True
    # losses
    bce_weight: float = 5.0
    dice_weight: float = 5.0
    cls_weight: float = 2.0
    align_variant: str = "softmax"
    temperature: float = 0.07
    # data and evaluation
    train_images: int = 512
    eval_images: int = 32
    eval_every: int = 500
    eval_seed: int = 1000
    source_domain: str = "source"
    target_domains: str = "palette,lowlight,texture"

    def __post_init__(self):
        self.validate()

    # -- validation ------------------------------------------------------
    def validate(self) -> None:
        if self.adapter not in ADAPTER_MODES:
            raise ConfigError(f"adapter must be one of {ADAPTER_MODES}, got {self.adapter!r}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.enhancer not in ENHANCER_MODES:
            raise ConfigError(f"enhancer must be one of {ENHANCER_MODES}, got {self.enhancer!r}")
        if self.fusion == "concat_frozen" and self.adapter != "none":
            raise ConfigError("concat_frozen fusion runs without adapters; set adapter=none")
        if self.fusion in ("vfm_only", "vlm_only") and self.adapter not in ("mvfuser", "none"):
            raise ConfigError(f"single-stream fusion supports adapter mvfuser or none, got {self.adapter!r}")
        for name in ("stride", "iters", "batch_size", "d_low", "d_state", "scan_block", "train_images",
                     "eval_images", "eval_every", "enhancer_repeats", "decoder_stages"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 <= self.warmup < self.iters:
            raise ConfigError(f"warmup must be in [0, iters), got {self.warmup}")
        if self.image_size % self.patch_size or self.patch_size % 4:
            raise ConfigError("image size must be a multiple of patch size, and patch size of 4")
        if self.lr <= 0 or self.temperature <= 0:
            raise ConfigError("lr and temperature must be positive")

    # -- derived ---------------------------------------------------------
    @property
    def domains(self) -> list[str]:
        return [d.strip() for d in self.target_domains.split(",") if d.strip()]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    # -- parsing ---------------------------------------------------------
    @classmethod
    def parse_value(cls, key: str, raw: str):
        types = {f.name: f.type for f in fields(cls)}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kind = types[key]
        raw = raw.strip()
        try:
            if kind == "bool":
                low = raw.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                return low in ("true", "1", "yes")
            if kind == "int":
                return int(raw)
            if kind == "float":
                return float(raw)
        except ValueError:
            raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None
        return raw

    @classmethod
    def parse_text(cls, text: str) -> dict:
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            values[key] = cls.parse_value(key, raw)
        return values

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        values = cls.parse_text(Path(path).read_text())
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        return cls(**cls.parse_text(text))
