from __future__ import annotations

from torch import nn

from ..layers import attach_rng, init_parameters
from ..rng import RngState
from .blocks import EncoderBlock, LightConv, MultiHeadSelfAttention, SliceMap, branch_layout
from .config import (
    MOBILE_VARIANTS,
    PRESETS,
    TRANSFORMER_VARIANTS,
    VARIANTS,
    ConfigError,
    HartConfig,
    MobileHartConfig,
    config_from_dict,
    make_config,
)
from .hart import HartModel
from .mobilehart import MobileHart, MobileHartBlock, MV2Block


def build_from_config(cfg: HartConfig | MobileHartConfig, seed: int = 0) -> nn.Module:
    """Construct, seed-initialize and attach a random stream to a model."""
    model = MobileHart(cfg) if isinstance(cfg, MobileHartConfig) else HartModel(cfg)
    init_parameters(model, seed)
    model.seed = seed
    model.rng = RngState(seed)
    attach_rng(model, model.rng)
    return model


def build_model(variant: str = "hart", preset: str = "tiny", seed: int = 0, **overrides) -> nn.Module:
    return build_from_config(make_config(variant, preset, **overrides), seed)


def model_header(model: nn.Module) -> dict:
    cfg = model.config
    return {"variant": cfg.variant, "config": cfg.to_dict(), "seed": getattr(model, "seed", 0)}


def model_from_header(header: dict) -> nn.Module:
    return build_from_config(config_from_dict(header["config"]), header.get("seed", 0))


__all__ = [
    "ConfigError", "EncoderBlock", "HartConfig", "HartModel", "LightConv", "MOBILE_VARIANTS", "MV2Block",
    "MobileHart", "MobileHartBlock", "MobileHartConfig", "MultiHeadSelfAttention", "PRESETS", "SliceMap",
    "TRANSFORMER_VARIANTS", "VARIANTS", "branch_layout", "build_from_config", "build_model",
    "config_from_dict", "make_config", "model_from_header", "model_header",
]
