"""Experiment configuration: nested dataclasses with YAML round-tripping."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .datagen.dataset import DatasetConfig
from .datagen.scene import SceneConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    dim: int = 256
    encoder_layers: int = 3  # L
    depth_encoder_layers: int = 1  # M
    decoder_layers: int = 1  # N
    heads: int = 8
    points: int = 4
    stacking_order: str = "DTV"
    full_add_norm: bool = False
    dropout: float = 0.1
    use_encoders: bool = True
    visual_adapter: bool = True
    depth_adapter: bool = True
    depth_bins: int = 80
    depth_min: float = 1.0
    depth_max: float = 102.0
    text_layers: int = 2
    text_heads: int = 4
    backbone_channels: tuple = (32, 64, 128, 256)
    image_h: int = 64
    image_w: int = 192

    def __post_init__(self) -> None:
        self.backbone_channels = tuple(self.backbone_channels)
        if min(self.encoder_layers, self.depth_encoder_layers, self.decoder_layers) < 1:
            raise ConfigError("L, M and N must all be >= 1")
        if sorted(self.stacking_order) != ["D", "T", "V"]:
            raise ConfigError(f"stacking_order must permute D, T, V: {self.stacking_order!r}")
        if self.dim % self.heads:
            raise ConfigError("dim must be divisible by heads")
        if self.image_h % 64 or self.image_w % 64:
            raise ConfigError("image size must be divisible by 64")


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 10
    epochs: int = 60
    lr_drop_epoch: int = 40
    lr_drop_factor: float = 0.1
    grad_clip: float = 0.1
    max_steps: int | None = None
    log_every: int = 10


@dataclass
class LossConfig:
    weights: tuple = (2.0, 5.0, 2.0, 10.0)
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    # Laplacian depth term on the fused depth (d_reg + d_map) / 2 instead of d_reg alone
    depth_on_fused: bool = True

    def __post_init__(self) -> None:
        self.weights = tuple(float(w) for w in self.weights)
        if len(self.weights) != 4:
            raise ConfigError("need four 2D loss weights")


@dataclass
class DataConfig:
    root: str = "data/mono3drefer_synth"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    def __post_init__(self) -> None:
        if isinstance(self.dataset, dict):
            self.dataset = DatasetConfig(**self.dataset)


@dataclass
class EvalConfig:
    thresholds: tuple = (0.25, 0.5)
    catrand_seeds: int = 5

    def __post_init__(self) -> None:
        self.thresholds = tuple(self.thresholds)


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    @classmethod
    def paper(cls) -> "Config":
        cfg = cls()
        cfg.model.image_h, cfg.model.image_w = 384, 1280
        cfg.data.dataset.scene.image_h, cfg.data.dataset.scene.image_w = 384, 1280
        return cfg

    @classmethod
    def desk(cls) -> "Config":
        """CPU-sized model on 64x192 images; optimizer settings follow the paper except a larger learning rate."""
        cfg = cls()
        cfg.model.dim = 64
        cfg.optim.lr = 5e-4
        return cfg

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict, base: "Config | None" = None) -> "Config":
        cfg = base or cls.desk()
        merged = _deep_merge(cfg.to_dict(), d or {})
        try:
            return cls(
                model=ModelConfig(**merged["model"]),
                optim=OptimConfig(**merged["optim"]),
                loss=LossConfig(**merged["loss"]),
                data=DataConfig(root=merged["data"]["root"], dataset=_dataset_config(merged["data"]["dataset"])),
                eval=EvalConfig(**merged["eval"]),
                seed=merged["seed"],
            )
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path, base: "Config | None" = None) -> "Config":
        try:
            with open(path) as f:
                d = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_dict(d, base)

    def save(self, path) -> None:
        Path(path).write_text(self.dump())


def _dataset_config(d: dict) -> DatasetConfig:
    d = dict(d)
    d["scene"] = SceneConfig(**d.get("scene", {}))
    return DatasetConfig(**d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if k not in out:
            raise ConfigError(f"unknown config key {k!r}")
        if isinstance(v, dict) and isinstance(out[k], dict) and k != "splits" and k != "category_weights":
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def model_fingerprint(model_cfg: ModelConfig, vocab_size: int) -> str:
    payload = json.dumps({"model": _plain(dataclasses.asdict(model_cfg)), "vocab": vocab_size}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
