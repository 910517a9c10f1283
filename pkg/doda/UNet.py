"""Score network: U-Net with domain cross-attention and an additive layout branch.

Structure of :class:`DiffusionModel`:

* **time embedding**: interleaved sine/cosine pairs followed by a
  Linear-SiLU-Linear projection, shared by the U-Net and the layout branch;
* **U-Net**: one residual block per level on the way down and up, skip
  connections by channel concatenation, cross-attention to the domain
  tokens at the configured downsample factors and in the middle;
* **layout encoder**: a stack of time-dependent residual blocks with
  average-pool downsampling that mirrors the U-Net encoder path. Its
  features pass through zero-initialised 1x1 projections and are *added* to
  the U-Net feature maps at the fusion points (every decoder level by
  default).

Because the projections start at zero, a freshly built dual model computes
exactly what the domain-only model of the same seed computes. The layout
branch draws its initial weights from its own random substream, so every
shared parameter matches between the two.

.. tip::
    Pre-train with ``kind="domain"``, then build a ``kind="dual"`` model and
    call :meth:`DiffusionModel.init_from` on the pre-training checkpoint.
    Only the layout branch is left at its fresh initialisation.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from doda import diffmath as dm
from doda.conditioning import CrossAttention
from doda.config import substream
from doda.errors import ConfigError, MissingConditionError, ScheduleError, ShapeError
from doda.layers import Conv2d, GroupNorm, Linear

logger = logging.getLogger(__name__)

KINDS = ("uncond", "domain", "dual")
#: Frequency of the first sinusoid pair.
OMEGA0 = 1.0
MAX_PERIOD = 10000.0


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 4)
    attention_resolutions: tuple = (2, 4)
    num_heads: int = 4
    image_size: int = 32
    in_channels: int = 3
    layout_channels: int = 3
    token_dim: int = 64
    attention_dim: int = 64
    groups: int = 8

    def __post_init__(self):
        mults = tuple(self.channel_multipliers)
        object.__setattr__(self, "channel_multipliers", mults)
        object.__setattr__(self, "attention_resolutions", tuple(self.attention_resolutions))
        if any(b < a for a, b in zip(mults, mults[1:])):
            raise ConfigError(f"channel multipliers must be non-decreasing: {mults}")
        factors = {2 ** i for i in range(len(mults))}
        if not set(self.attention_resolutions) <= factors:
            raise ConfigError(
                f"attention resolutions {self.attention_resolutions} not in reachable factors {sorted(factors)}"
            )
        if self.image_size % (2 ** (len(mults) - 1)):
            raise ConfigError(f"image size {self.image_size} not divisible by {2 ** (len(mults) - 1)}")
        if self.attention_dim % self.num_heads:
            raise ConfigError(f"attention dim {self.attention_dim} not divisible by {self.num_heads} heads")

    @property
    def level_channels(self) -> list:
        return [self.base_channels * m for m in self.channel_multipliers]

    @property
    def time_dim(self) -> int:
        return 4 * self.base_channels


PRESETS = {
    "desk32": UNetConfig(),
    "paper256": UNetConfig(base_channels=224, num_heads=8, image_size=256, token_dim=768, attention_dim=512),
    #: 16x16 two-level network for smoke runs and tests.
    "smoke16": UNetConfig(base_channels=8, channel_multipliers=(1, 2), attention_resolutions=(2,), num_heads=2,
                          image_size=16, attention_dim=16, groups=4),
}


@dataclass(frozen=True)
class FusionPlacement:
    fuse_encoder: bool = False
    fuse_decoder: bool = True

    def __post_init__(self):
        if not (self.fuse_encoder or self.fuse_decoder):
            raise ConfigError("layout fusion needs at least one of encoder / decoder")

    @classmethod
    def named(cls, name: str) -> "FusionPlacement":
        table = {"enc": (True, False), "dec": (False, True), "both": (True, True)}
        if name not in table:
            raise ConfigError(f"unknown fusion placement '{name}'")
        return cls(*table[name])


@dataclass(frozen=True)
class LayoutEncoderConfig:
    stage_channels: tuple = field(default_factory=tuple)
    downsamples: int = 0

    @classmethod
    def mirroring(cls, config: UNetConfig) -> "LayoutEncoderConfig":
        chans = tuple(config.level_channels)
        return cls(stage_channels=chans, downsamples=len(chans) - 1)


def sinusoid(t, dim: int) -> np.ndarray:
    """``(B, dim)`` interleaved ``sin(t w_k), cos(t w_k)`` with ``w_0 = 1``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = OMEGA0 * MAX_PERIOD ** (-np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    out = np.zeros((len(t), dim))
    out[:, 0:2 * half:2] = np.sin(args)
    out[:, 1:2 * half:2] = np.cos(args)
    return out


class TimeEmbedding(dm.Module):
    def __init__(self, sin_dim: int, out_dim: int, rng):
        self.sin_dim = sin_dim
        self.fc1 = Linear(sin_dim, out_dim, rng)
        self.fc2 = Linear(out_dim, out_dim, rng)

    def forward(self, t):
        x = dm.Tensor(sinusoid(t, self.sin_dim).astype(self.fc1.weight.dtype))
        return self.fc2(dm.silu(self.fc1(x)))


class ResBlock(dm.Module):
    """``skip(a) + f_res(a, t)`` with the time embedding added inside ``f_res``."""

    def __init__(self, c_in: int, c_out: int, temb_dim: int, rng, groups: int = 8):
        self.norm1 = GroupNorm(c_in, groups)
        self.conv1 = Conv2d(c_in, c_out, rng)
        self.temb = Linear(temb_dim, c_out, rng)
        self.norm2 = GroupNorm(c_out, groups)
        self.conv2 = Conv2d(c_out, c_out, rng)
        self.skip = Conv2d(c_in, c_out, rng, kernel=1) if c_in != c_out else None

    def residual(self, x, temb):
        h = self.conv1(dm.silu(self.norm1(x)))
        b, c = h.shape[:2]
        t = dm.reshape(self.temb(dm.silu(temb)), (b, c, 1, 1))
        h = dm.add(h, dm.expand(t, h.shape))
        return self.conv2(dm.silu(self.norm2(h)))

    def forward(self, x, temb):
        skip = x if self.skip is None else self.skip(x)
        return dm.add(skip, self.residual(x, temb))


class AttnBlock(dm.Module):
    """Normalised feature map attends to the domain tokens; result added back."""

    def __init__(self, channels: int, config: UNetConfig, rng):
        self.norm = GroupNorm(channels, config.groups)
        self.attn = CrossAttention(channels, config.token_dim, config.attention_dim, rng,
                                   heads=config.num_heads, residual=False)

    def forward(self, h, tokens):
        b, c, hh, ww = h.shape
        f = dm.transpose(dm.reshape(self.norm(h), (b, c, hh * ww)), (0, 2, 1))
        out = self.attn(f, tokens)
        out = dm.reshape(dm.transpose(out, (0, 2, 1)), (b, c, hh, ww))
        return dm.add(h, out)


class Upsample(dm.Module):
    def __init__(self, c_in: int, c_out: int, rng):
        self.conv = Conv2d(c_in, c_out, rng)

    def forward(self, x):
        return self.conv(dm.upsample2x(x))


class UNet(dm.Module):
    def __init__(self, config: UNetConfig, rng):
        chans = config.level_channels
        levels = len(chans)
        tdim = config.time_dim
        self.time = TimeEmbedding(config.base_channels, tdim, rng)
        self.conv_in = Conv2d(config.in_channels, chans[0], rng)
        self.down, self.down_attn, self.downsample = [], [], []
        prev = chans[0]
        for i, ch in enumerate(chans):
            self.down.append(ResBlock(prev, ch, tdim, rng, config.groups))
            self.down_attn.append(AttnBlock(ch, config, rng) if 2 ** i in config.attention_resolutions else None)
            self.downsample.append(Conv2d(ch, ch, rng, stride=2) if i < levels - 1 else None)
            prev = ch
        self.mid1 = ResBlock(prev, prev, tdim, rng, config.groups)
        self.mid_attn = AttnBlock(prev, config, rng)
        self.mid2 = ResBlock(prev, prev, tdim, rng, config.groups)
        self.up, self.up_attn, self.upsample = [], [], []
        for i in reversed(range(levels)):
            ch = chans[i]
            self.up.append(ResBlock(prev + ch, ch, tdim, rng, config.groups))
            self.up_attn.append(AttnBlock(ch, config, rng) if 2 ** i in config.attention_resolutions else None)
            self.upsample.append(Upsample(ch, chans[i - 1], rng) if i > 0 else None)
            prev = chans[i - 1] if i > 0 else ch
        self.norm_out = GroupNorm(chans[0], config.groups)
        self.conv_out = Conv2d(chans[0], config.in_channels, rng)

    def forward(self, x, temb, tokens=None, layout_feats=None, placement: FusionPlacement = None):
        levels = len(self.down)
        enc = layout_feats is not None and placement is not None and placement.fuse_encoder
        dec = layout_feats is not None and placement is not None and placement.fuse_decoder
        h = self.conv_in(x)
        skips = []
        for i in range(levels):
            h = self.down[i](h, temb)
            if enc:
                h = dm.add(h, layout_feats["encoder"][i])
            if self.down_attn[i] is not None and tokens is not None:
                h = self.down_attn[i](h, tokens)
            skips.append(h)
            if self.downsample[i] is not None:
                h = self.downsample[i](h)
        h = self.mid1(h, temb)
        if tokens is not None:
            h = self.mid_attn(h, tokens)
        h = self.mid2(h, temb)
        for j, i in enumerate(reversed(range(levels))):
            h = self.up[j](dm.concat([h, skips[i]], axis=1), temb)
            if self.up_attn[j] is not None and tokens is not None:
                h = self.up_attn[j](h, tokens)
            if dec:
                h = dm.add(h, layout_feats["decoder"][i])
            if self.upsample[j] is not None:
                h = self.upsample[j](h)
        return self.conv_out(dm.silu(self.norm_out(h)))


class LayoutEncoder(dm.Module):
    """Time-dependent residual stack over the layout image.

    Level 0 works at full resolution; every further level average-pools by
    two, lifts channels with a 1x1 convolution and applies one residual
    block, so level ``i`` matches the U-Net feature shape at factor ``2**i``.
    """

    def __init__(self, config: UNetConfig, placement: FusionPlacement, rng):
        enc_cfg = LayoutEncoderConfig.mirroring(config)
        chans = enc_cfg.stage_channels
        tdim = config.time_dim
        self.conv_in = Conv2d(config.layout_channels, chans[0], rng)
        self.blocks = [ResBlock(ch, ch, tdim, rng, config.groups) for ch in chans]
        self.lifts = [None] + [Conv2d(a, b, rng, kernel=1) for a, b in zip(chans[:-1], chans[1:])]
        self.proj_encoder = [Conv2d(ch, ch, rng, kernel=1, zero=True) for ch in chans] if placement.fuse_encoder else []
        self.proj_decoder = [Conv2d(ch, ch, rng, kernel=1, zero=True) for ch in chans] if placement.fuse_decoder else []

    def features(self, layout, temb) -> list:
        """Residual-stack outputs before the fusion projections."""
        a = self.conv_in(layout)
        feats = []
        for i, block in enumerate(self.blocks):
            if self.lifts[i] is not None:
                a = self.lifts[i](dm.avgpool2x(a))
            a = block(a, temb)
            feats.append(a)
        return feats

    def forward(self, layout, temb) -> dict:
        feats = self.features(layout, temb)
        return {
            "encoder": [p(f) for p, f in zip(self.proj_encoder, feats)],
            "decoder": [p(f) for p, f in zip(self.proj_decoder, feats)],
        }


def images_to_model(images: np.ndarray) -> np.ndarray:
    """``(N, H, W, C)`` images in ``[0, 1]`` to ``(N, C, H, W)`` in ``[-1, 1]``."""
    return np.ascontiguousarray(np.transpose(np.asarray(images), (0, 3, 1, 2))) * 2.0 - 1.0


def model_to_images(x: np.ndarray) -> np.ndarray:
    return np.clip((np.transpose(np.asarray(x), (0, 2, 3, 1)) + 1.0) / 2.0, 0.0, 1.0)


def layouts_to_model(rasters: np.ndarray) -> np.ndarray:
    """``(N, H, W, C)`` layout rasters to ``(N, C, H, W)``, values kept in ``[0, 1]``."""
    return np.ascontiguousarray(np.transpose(np.asarray(rasters), (0, 3, 1, 2)))


class DiffusionModel(dm.Module):
    """Noise-predicting score network of a given conditioning kind.

    Args:
        config: Architecture.
        kind: ``"uncond"``, ``"domain"`` or ``"dual"``. Only ``"dual"``
            builds the layout branch.
        T: Number of diffusion steps the model is trained for.
        seed: Root seed; the U-Net and the layout branch use separate substreams.
        placement: Where layout features are added.
    """

    def __init__(self, config: UNetConfig = PRESETS["desk32"], kind: str = "dual", T: int = 200,
                 seed: int = 0, placement: FusionPlacement = FusionPlacement()):
        if kind not in KINDS:
            raise ConfigError(f"unknown model kind '{kind}'")
        self.config = config
        self.kind = kind
        self.T = T
        self.seed = seed
        self.placement = placement
        self.unet = UNet(config, substream(seed, "unet"))
        self.layout_encoder = LayoutEncoder(config, placement, substream(seed, "layout")) if kind == "dual" else None

    @property
    def dtype(self):
        return self.unet.conv_in.weight.dtype

    def _cast(self, x):
        arr = x.data if isinstance(x, dm.Tensor) else np.asarray(x)
        if isinstance(x, dm.Tensor) and arr.dtype == self.dtype:
            return x
        return dm.Tensor(arr.astype(self.dtype))

    def timestep_embed(self, t):
        t = np.atleast_1d(np.asarray(t))
        if np.any(t < 1) or np.any(t > self.T):
            raise ScheduleError(f"timestep outside [1, {self.T}]")
        return self.unet.time(t)

    def layout_encode(self, layout, t) -> dict:
        if self.layout_encoder is None:
            raise ConfigError(f"a '{self.kind}' model has no layout branch")
        layout = self._cast(layout)
        size = self.config.image_size
        if layout.ndim != 4 or layout.shape[1:] != (self.config.layout_channels, size, size):
            raise ShapeError(f"layout image {layout.shape} does not match config ({size}x{size})")
        temb = t if isinstance(t, dm.Tensor) else self.timestep_embed(t)
        return self.layout_encoder(layout, temb)

    def denoise(self, x_t, t, tokens=None, layout_feats=None) -> dm.Tensor:
        """U-Net forward with precomputed conditions; output shape equals ``x_t``.

        Raises:
            MissingConditionError: If layout fusion is enabled but no features were given.
        """
        if self.kind == "dual" and layout_feats is None:
            raise MissingConditionError("layout fusion is enabled but no layout features were given")
        x = self._cast(x_t)
        size = self.config.image_size
        if x.ndim != 4 or x.shape[1:] != (self.config.in_channels, size, size):
            raise ShapeError(f"input {x.shape} does not match config ({self.config.in_channels}x{size}x{size})")
        temb = t if isinstance(t, dm.Tensor) else self.timestep_embed(t)
        if tokens is not None:
            tokens = self._cast(tokens)
        return self.unet(x, temb, tokens, layout_feats, self.placement if self.kind == "dual" else None)

    def predict_eps(self, x_t, t, domain=None, layout=None) -> dm.Tensor:
        if self.kind in ("domain", "dual") and domain is None:
            raise MissingConditionError(f"a '{self.kind}' model needs domain tokens")
        if self.kind == "dual" and layout is None:
            raise MissingConditionError("a 'dual' model needs a layout image")
        temb = self.timestep_embed(np.broadcast_to(np.atleast_1d(np.asarray(t)), (x_t.shape[0],)))
        tokens = domain if self.kind != "uncond" else None
        feats = self.layout_encode(layout, temb) if self.kind == "dual" else None
        return self.denoise(x_t, temb, tokens, feats)

    def domain_branch_names(self) -> list:
        return [name for name, _ in self.named_parameters() if "attn" in name]

    def trainable_parameters(self, freeze_domain_branch: bool = False) -> list:
        """Parameters to optimise; the cross-attention blocks stay fixed when frozen."""
        return [p for name, p in self.named_parameters()
                if not (freeze_domain_branch and "attn" in name)]

    def meta(self) -> dict:
        return {
            "kind": self.kind,
            "T": self.T,
            "seed": self.seed,
            "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.config).items()},
            "placement": asdict(self.placement),
        }

    def save(self, path) -> None:
        dm.save_parameters(path, self, meta=self.meta())

    @classmethod
    def load(cls, path) -> "DiffusionModel":
        state, meta = dm.load_parameters(path, with_meta=True)
        model = cls(UNetConfig(**meta["config"]), kind=meta["kind"], T=meta["T"], seed=meta["seed"],
                    placement=FusionPlacement(**meta["placement"]))
        model.load_state_dict(state)
        return model

    def init_from(self, path) -> list:
        """Load every matching parameter of a checkpoint; the rest keep their initial values.

        Returns:
            list: Names left at initialisation.

        Raises:
            ConfigError: If anything other than the layout branch is missing.
        """
        state = dm.load_parameters(path)
        missing = self.load_state_dict(state, strict=False)
        unexpected = [m for m in missing if not m.startswith("layout_encoder.")]
        if unexpected:
            raise ConfigError(f"checkpoint does not cover the shared network: {unexpected[:3]}")
        logger.info("initialised %d parameters from %s, %d left fresh",
                    len(state), path, len(missing))
        return missing
