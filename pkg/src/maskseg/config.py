"""Architecture hyperparameters."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields


class ConfigError(ValueError):
    """Inconsistent or invalid configuration."""


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 19
    num_queries: int = 100
    hidden_dim: int = 256
    num_heads: int = 8
    num_stages: int = 3
    blocks_per_stage: int = 2
    ffn_expansion: int = 4
    cp_proj_dim: int = 128
    spatial_channels: int = 128
    # spatial path widths; the last entry is forced to spatial_channels
    backbone_width_schedule: tuple = (32, 64, 128)
    # widths of the two context-path blocks (1/16 and 1/32); empty -> (2C, 4C)
    context_widths: tuple = ()
    use_f3_in_decoder: bool = False
    upsample_mode: str = "bilinear"
    mask_resize_mode: str = "nearest"
    mask_threshold: float = 0.5
    ffm_reduction: int = 4
    cls_bias: bool = True
    deep_supervision: bool = True
    no_object_weight: float = 0.1
    query_init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "backbone_width_schedule",
                           tuple(int(w) for w in self.backbone_width_schedule))
        object.__setattr__(self, "context_widths", tuple(int(w) for w in self.context_widths))
        self.validate()

    def validate(self) -> None:
        if self.num_queries < 1 or self.num_classes < 1 or self.num_stages < 1:
            raise ConfigError("num_queries, num_classes and num_stages must be >= 1")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by "
                              f"num_heads {self.num_heads}")
        if len(self.backbone_width_schedule) != 3:
            raise ConfigError("backbone_width_schedule needs three widths (1/2, 1/4, 1/8)")
        if self.context_widths and len(self.context_widths) != 2:
            raise ConfigError("context_widths needs two widths (1/16, 1/32)")
        if self.upsample_mode not in ("bilinear", "nearest"):
            raise ConfigError(f"unknown upsample_mode {self.upsample_mode!r}")
        if self.mask_resize_mode not in ("bilinear", "nearest"):
            raise ConfigError(f"unknown mask_resize_mode {self.mask_resize_mode!r}")
        if any(w < 1 for w in self.spatial_widths + self.context_path_widths):
            raise ConfigError("channel widths must be positive")
        if self.spatial_channels < self.ffm_reduction:
            raise ConfigError("spatial_channels must be >= ffm_reduction")

    @property
    def spatial_widths(self) -> tuple:
        w = self.backbone_width_schedule
        return (w[0], w[1], self.spatial_channels)

    @property
    def context_path_widths(self) -> tuple:
        if self.context_widths:
            return self.context_widths
        return (2 * self.spatial_channels, 4 * self.spatial_channels)

    @property
    def num_blocks(self) -> int:
        return self.num_stages * self.blocks_per_stage

    def replace(self, **changes) -> "ModelConfig":
        data = asdict(self)
        data.update(changes)
        return ModelConfig(**data)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 3e-4
    weight_decay: float = 0.05
    backbone_lr_mult: float = 0.1
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 8
    seed: int = 0
    log_every: int = 50

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        if "betas" in data:
            data = dict(data, betas=tuple(data["betas"]))
        return cls(**data)


def toy_config(**overrides) -> ModelConfig:
    """Small model used by tests, the overfit run and the CLI defaults."""
    base = dict(num_classes=4, num_queries=16, hidden_dim=64, num_heads=4,
                num_stages=3, blocks_per_stage=2, cp_proj_dim=64,
                spatial_channels=64, backbone_width_schedule=(16, 32, 64),
                context_widths=(64, 128))
    base.update(overrides)
    return ModelConfig(**base)


__all__ = ["ConfigError", "ModelConfig", "TrainConfig", "toy_config"]
