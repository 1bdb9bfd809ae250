"""Model configuration and parameter initialization."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .counter import DensityDecoder, InteractionModule
from .domain import ConfigurationError, TrainState
from .encoders import MAX_TOKENS, AdapterHead, FfnHead, init_backbone_params


@dataclass(frozen=True)
class ModelConfig:
    d: int = 512
    patch_size: int = 16
    image_size: int = 224
    text_buckets: int = 2048
    max_tokens: int = MAX_TOKENS
    ffn_depth: int = 5
    ffn_hidden: int = 0          # 0 means "same as d"
    ffn_norm: bool = True
    adapter_depth: int = 5
    adapter_bottleneck: int = 0  # 0 means d // 4
    adapter_residual: bool = True
    fusion_heads: int = 4
    fusion_layers: int = 2
    decoder_hidden: int = 64
    decoder_depth: int = 3
    normalize: bool = True

    def __post_init__(self):
        if self.d % self.fusion_heads:
            raise ConfigurationError(f"d={self.d} not divisible by {self.fusion_heads} heads")
        if self.image_size % self.patch_size:
            raise ConfigurationError("image_size must be a multiple of patch_size")
        for name in ("ffn_depth", "adapter_depth", "fusion_layers", "decoder_depth"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def toy_config(**overrides):
    """Desk-scale configuration used by the synthetic-shape experiments."""
    base = dict(d=32, patch_size=8, image_size=64, text_buckets=512, decoder_hidden=64)
    base.update(overrides)
    return ModelConfig(**base)


def init_state(config, seed=0):
    """Fresh parameters for every group; all groups start frozen."""
    rng = np.random.default_rng(seed)
    visual, text = init_backbone_params(rng, config.d, config.patch_size, config.text_buckets)
    params = {
        "backbone_visual": visual,
        "backbone_text": text,
        "ffn": FfnHead.init_params(rng, config.d, config.ffn_depth, config.ffn_hidden or None, config.ffn_norm),
        "adapter": AdapterHead.init_params(rng, config.d, config.adapter_depth, config.adapter_bottleneck or None),
        "fusion": InteractionModule.init_params(rng, config.d, config.fusion_layers),
        "decoder": DensityDecoder.init_params(rng, config.d, config.decoder_hidden, config.decoder_depth),
    }
    return TrainState(params=params, config=config, rng_seed=seed)
