"""Architecture hyperparameters and presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

TRANSFORMER_VARIANTS = ("vit", "vit+liteconv", "vit+swmsa", "hart", "hart_one_msa")
MOBILE_VARIANTS = ("mobilehart_xs", "mobilehart_xxs")
VARIANTS = TRANSFORMER_VARIANTS + MOBILE_VARIANTS

PRESETS = {
    "tiny": {"dim": 192, "heads": 3, "depth": 6},
    "small": {"dim": 384, "heads": 6, "depth": 12},
    "base": {"dim": 768, "heads": 12, "depth": 12},
}

MAX_LIGHTCONV_KERNEL = 31


class ConfigError(ValueError):
    pass


def lightconv_schedule(depth: int, fixed: int | None = None) -> tuple[int, ...]:
    """Per-block LightConv kernel sizes: 3, 7, 15, 31, 31, ... unless ``fixed`` is given."""
    if fixed is not None:
        return (fixed,) * depth
    return tuple(min(2 ** (i + 2) - 1, MAX_LIGHTCONV_KERNEL) for i in range(depth))


@dataclass(frozen=True)
class HartConfig:
    variant: str = "hart"
    sensors: int = 2
    window: int = 128
    frame: int = 16
    dim: int = 192
    depth: int = 6
    heads: int = 3
    num_classes: int = 6
    dropout: float = 0.3
    drop_path: float = 0.1
    ff_ratio: int = 2
    head_units: int = 1024
    lightconv_heads: int = 4
    lightconv_kernel: int | None = None
    lightconv_projection: bool = False
    key_dim: int | None = None
    activation: str | None = None

    def __post_init__(self):
        if self.variant not in TRANSFORMER_VARIANTS:
            raise ConfigError(f"unknown transformer variant {self.variant!r}; expected one of {TRANSFORMER_VARIANTS}")
        if self.sensors < 1:
            raise ConfigError("sensors must be >= 1")
        if self.frame < 1 or self.window % self.frame:
            raise ConfigError(f"window {self.window} not divisible by frame length {self.frame}")
        if self.dim % (2 * self.sensors) or self.dim % 4:
            raise ConfigError(f"dim {self.dim} must be divisible by 4 and by 2*sensors={2 * self.sensors}")
        if (self.dim // 2) % self.lightconv_heads:
            raise ConfigError(f"LightConv width {self.dim // 2} not divisible by lightconv_heads={self.lightconv_heads}")
        if self.heads < 1 or self.depth < 0 or self.num_classes < 2:
            raise ConfigError("heads >= 1, depth >= 0 and num_classes >= 2 required")
        if self.lightconv_kernel is not None and self.lightconv_kernel % 2 == 0:
            raise ConfigError(f"LightConv kernel must be odd, got {self.lightconv_kernel}")
        if not 0 <= self.dropout < 1 or not 0 <= self.drop_path < 1:
            raise ConfigError("dropout and drop_path must be in [0, 1)")
        if self.activation not in (None, "swish", "gelu"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def num_frames(self) -> int:
        return self.window // self.frame

    @property
    def channels(self) -> int:
        return 3 * self.sensors

    @property
    def act(self) -> str:
        if self.activation:
            return self.activation
        return "gelu" if self.variant == "vit" else "swish"

    @property
    def msa_key_dim(self) -> int:
        """Per-head query/key/value width of the attention modules."""
        if self.key_dim is not None:
            return self.key_dim
        return {
            "vit": self.dim,
            "vit+swmsa": self.dim // self.sensors,
            "vit+liteconv": self.dim // 4,
        }.get(self.variant, self.dim // (2 * self.sensors))

    @property
    def lightconv_kernels(self) -> tuple[int, ...]:
        return lightconv_schedule(self.depth, self.lightconv_kernel)

    def drop_path_rate(self, layer: int) -> float:
        """Stochastic-depth rate of block ``layer`` (1-based)."""
        return self.drop_path * layer / self.depth if self.depth else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MobileHartConfig:
    size: str = "xxs"
    sensors: int = 2
    window: int = 128
    num_classes: int = 6
    # stem, layer1, layer2, layer3, layer4, layer5
    channels: tuple[int, ...] = (16, 16, 24, 48, 64, 80)
    dims: tuple[int, ...] = (64, 80, 96)
    depths: tuple[int, ...] = (2, 4, 3)
    expansion: int = 2
    heads: int = 4
    patch: int = 2
    last_expansion: int = 4
    dropout: float = 0.3
    drop_path: float = 0.1
    ff_ratio: int = 2
    lightconv_heads: int = 4
    lightconv_kernel: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "dims", tuple(self.dims))
        object.__setattr__(self, "depths", tuple(self.depths))
        if len(self.channels) != 6 or len(self.dims) != 3 or len(self.depths) != 3:
            raise ConfigError("MobileHART needs 6 channel counts, 3 block widths and 3 block depths")
        for c in self.channels:
            if c % self.sensors:
                raise ConfigError(f"sensor-wise channel count {c} not divisible by sensors={self.sensors}")
        for c in self.channels[3:]:
            if c % 2:
                raise ConfigError(f"MobileHART block channels must be even, got {c}")
        for d in self.dims:
            if d % (2 * self.sensors) or d % 4 or (d // 2) % self.lightconv_heads:
                raise ConfigError(f"MobileHART block width {d} incompatible with sensor-wise split")
        # stem + 4 stride-2 stages, then patch unfolding on the last three stages
        if self.window % (32 * self.patch):
            raise ConfigError(f"window {self.window} must be divisible by {32 * self.patch}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    @property
    def variant(self) -> str:
        return f"mobilehart_{self.size}"

    def to_dict(self) -> dict:
        return asdict(self)


MOBILE_PRESETS = {
    "xxs": {"channels": (16, 16, 24, 48, 64, 80), "dims": (64, 80, 96), "expansion": 2},
    "xs": {"channels": (16, 32, 48, 64, 80, 96), "dims": (96, 120, 144), "expansion": 4},
}


def make_config(variant: str, preset: str = "tiny", **overrides):
    """Resolve ``variant`` + ``preset`` + keyword overrides into a config object."""
    if variant in MOBILE_VARIANTS:
        size = variant.split("_", 1)[1]
        base = dict(MOBILE_PRESETS[size], size=size)
        base.update(_known(MobileHartConfig, overrides))
        return MobileHartConfig(**base)
    if variant not in TRANSFORMER_VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    try:
        base = dict(PRESETS[preset])
    except KeyError:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}") from None
    base.update(_known(HartConfig, overrides))
    base["variant"] = variant
    return HartConfig(**base)


def _known(cls, overrides: dict) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(overrides) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {unknown}")
    return {k: v for k, v in overrides.items() if v is not None}


def config_from_dict(data: dict):
    data = dict(data)
    if "size" in data:
        return MobileHartConfig(**data)
    return HartConfig(**data)


__all__ = [
    "ConfigError", "HartConfig", "MobileHartConfig", "PRESETS", "MOBILE_PRESETS", "VARIANTS",
    "TRANSFORMER_VARIANTS", "MOBILE_VARIANTS", "lightconv_schedule", "make_config", "config_from_dict",
]
