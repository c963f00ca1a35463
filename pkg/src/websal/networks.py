"""Encoder, outline-conditioned decoder, fully convolutional discriminator,
and the two-stage generator wiring with stage-1/stage-2 parameter sharing."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import imageops
from .nn import BatchNormState, batchnorm2d, conv2d, conv_transpose2d, maxpool2d
from .params import ParamStore
from .tensor import ShapeError, Tensor, add, concat_channels, no_grad, relu, sigmoid

DOWNSAMPLE = 16


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    encoder_widths: tuple[int, ...] = (32, 32, 64, 64, 128, 128, 256, 256)
    pool_after: tuple[int, ...] = (2, 4, 6, 8)
    block_channels: int = 256
    dilations: tuple[int, ...] = (1, 1, 2, 2, 4, 4, 2, 1)
    deconv_widths: tuple[int, ...] = (128, 64, 32, 32)
    disc_widths: tuple[int, ...] = (32, 32, 64, 64, 128, 128, 256)
    disc_strided: tuple[int, ...] = (1, 3, 5, 7)
    outline_channels: int = 1
    inject: str = "deepest"          # or "all": every decoder resolution
    use_outline: bool = True
    sigma: float = imageops.DEFAULT_SIGMA
    log_radius: int | None = None

    def __post_init__(self):
        for f in ("encoder_widths", "pool_after", "dilations", "deconv_widths", "disc_widths", "disc_strided"):
            setattr(self, f, tuple(int(v) for v in getattr(self, f)))
        self.validate()

    def validate(self) -> None:
        if len(self.encoder_widths) != 8:
            raise ConfigError(f"encoder needs 8 conv widths, got {len(self.encoder_widths)}")
        if len(self.pool_after) != 4 or not all(1 <= p <= 8 for p in self.pool_after):
            raise ConfigError(f"encoder needs 4 pool positions in 1..8, got {self.pool_after}")
        if len(self.dilations) != 8 or min(self.dilations) < 1:
            raise ConfigError(f"decoder needs 8 dilation rates >= 1, got {self.dilations}")
        if len(self.deconv_widths) != 4:
            raise ConfigError(f"decoder needs 4 deconv widths, got {len(self.deconv_widths)}")
        if len(self.disc_widths) != 7:
            raise ConfigError(f"discriminator needs 7 hidden widths plus the head, got {len(self.disc_widths)}")
        if sorted(self.disc_strided) != list(self.disc_strided) or len(self.disc_strided) != 4:
            raise ConfigError(f"discriminator needs 4 stride-2 layers, got {self.disc_strided}")
        widths = (self.encoder_widths + self.deconv_widths + self.disc_widths
                  + (self.block_channels, self.outline_channels))
        if min(widths) < 1:
            raise ConfigError(f"all widths must be >= 1, got {widths}")
        if self.inject not in ("deepest", "all"):
            raise ConfigError(f"inject must be 'deepest' or 'all', got {self.inject!r}")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def tiny(cls, **kw) -> "NetworkConfig":
        """Narrow variant used by unit tests."""
        base = dict(encoder_widths=(4, 4, 6, 6, 8, 8, 8, 8), block_channels=8,
                    deconv_widths=(6, 6, 4, 4), disc_widths=(4, 4, 4, 4, 6, 6, 6))
        base.update(kw)
        return cls(**base)

    # decoder layer numbering: 1 fusion conv, then 4 layers per residual block,
    # then the 4 deconvs and the output head
    def block_layers(self, b: int) -> tuple[int, int, int, int]:
        k = 2 + 4 * b
        return k, k + 1, k + 2, k + 3

    def deconv_layer(self, i: int) -> int:
        return 2 + 4 * len(self.dilations) + i

    @property
    def head_layer(self) -> int:
        return self.deconv_layer(len(self.deconv_widths))

    def level_dims(self, h: int, w: int) -> list[tuple[int, int]]:
        """Spatial dims of the decoder input and of every deconv input."""
        return [(h // DOWNSAMPLE * 2 ** i, w // DOWNSAMPLE * 2 ** i) for i in range(len(self.deconv_widths))]


def _he(rng: np.random.Generator, shape, fan_in: float) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _stage_layer_specs(cfg: NetworkConfig, in_channels: int):
    """Yield (part, layer index, kind, shape info) for one generator stage."""
    c = in_channels
    for k, oc in enumerate(cfg.encoder_widths, start=1):
        yield "encoder", k, "conv", (oc, c, 3)
        c = oc
    inj = cfg.outline_channels
    bc = cfg.block_channels
    yield "decoder", 1, "conv", (bc, c + inj, 3)
    for b in range(len(cfg.dilations)):
        ca, na, cb, nb = cfg.block_layers(b)
        yield "decoder", ca, "conv", (bc, bc, 3)
        yield "decoder", na, "bn", (bc,)
        yield "decoder", cb, "conv", (bc, bc, 3)
        yield "decoder", nb, "bn", (bc,)
    c = bc
    for i, oc in enumerate(cfg.deconv_widths):
        extra = inj if (cfg.inject == "all" and i > 0) else 0
        yield "decoder", cfg.deconv_layer(i), "deconv", (c + extra, oc, 4)
        c = oc
    yield "decoder", cfg.head_layer, "conv", (1, c, 3)


def build_params(seed: int, cfg: NetworkConfig | None = None, dtype=np.float64) -> ParamStore:
    """Allocate He-initialized parameters for both stages and the discriminator.

    Stage 2 aliases every stage-1 tensor except the first encoder conv, which
    takes the 4-channel image+coarse input.
    """
    cfg = cfg or NetworkConfig()
    rng = np.random.default_rng(seed)
    store = ParamStore()

    def alloc(prefix, kind, shape):
        if kind == "conv":
            oc, ic, k = shape
            store.add(f"{prefix}.weight", _he(rng, (oc, ic, k, k), ic * k * k).astype(dtype))
            store.add(f"{prefix}.bias", np.zeros(oc, dtype=dtype))
        elif kind == "deconv":
            ic, oc, k = shape
            # each output pixel of a stride-2, k=4 deconv sees ic * (k/2)^2 taps
            store.add(f"{prefix}.weight", _he(rng, (ic, oc, k, k), ic * (k / 2) ** 2).astype(dtype))
            store.add(f"{prefix}.bias", np.zeros(oc, dtype=dtype))
        else:
            (c,) = shape
            store.add(f"{prefix}.weight", np.ones(c, dtype=dtype))
            store.add(f"{prefix}.bias", np.zeros(c, dtype=dtype))
            store.add_buffer(prefix, BatchNormState.fresh(c, dtype))

    for part, k, kind, shape in _stage_layer_specs(cfg, 3):
        alloc(f"stage1.{part}.layer{k}", kind, shape)
    for part, k, kind, shape in _stage_layer_specs(cfg, 4):
        prefix = f"stage2.{part}.layer{k}"
        if part == "encoder" and k == 1:
            alloc(prefix, kind, shape)
            continue
        for leaf in ("weight", "bias"):
            store.alias(f"{prefix}.{leaf}", f"stage1.{part}.layer{k}.{leaf}")
        if kind == "bn":
            store.alias_buffer(prefix, f"stage1.{part}.layer{k}")

    c = 1
    for k, oc in enumerate(cfg.disc_widths, start=1):
        alloc(f"disc.layer{k}", "conv", (oc, c, 3))
        c = oc
    alloc(f"disc.layer{len(cfg.disc_widths) + 1}", "conv", (1, c, 3))
    return store


def _conv(params: ParamStore, prefix: str, x: Tensor, stride: int = 1, dilation: int = 1) -> Tensor:
    w = params[f"{prefix}.weight"]
    k = w.shape[-1]
    pad = dilation * (k - 1) // 2
    return conv2d(x, w, params[f"{prefix}.bias"], stride=stride, padding=pad, dilation=dilation)


def encoder_forward(params: ParamStore, stage: int, x: Tensor, cfg: NetworkConfig | None = None) -> Tensor:
    cfg = cfg or NetworkConfig()
    want = 3 if stage == 1 else 4
    if x.data.ndim != 4 or x.shape[1] != want:
        raise ShapeError(f"stage-{stage} encoder expects {want} input channels, got shape {x.shape}")
    h = x
    for k in range(1, 9):
        h = relu(_conv(params, f"stage{stage}.encoder.layer{k}", h))
        if k in cfg.pool_after:
            h = maxpool2d(h, 2, 2)
    return h


def _check_level(level: Tensor, feat: Tensor, where: str) -> None:
    if level.shape[0] != feat.shape[0] or level.shape[2:] != feat.shape[2:]:
        raise ShapeError(f"outline level {level.shape} does not match {where} features {feat.shape}")


def decoder_forward(params: ParamStore, stage: int, features: Tensor, outline: imageops.OutlinePyramid,
                    cfg: NetworkConfig | None = None, mode: str = "train") -> Tensor:
    cfg = cfg or NetworkConfig()
    pre = f"stage{stage}.decoder"
    levels = outline.levels
    need = len(cfg.deconv_widths) if cfg.inject == "all" else 1
    if len(levels) < need:
        raise ShapeError(f"decoder needs {need} outline levels, got {len(levels)}")
    lv = levels[0]
    _check_level(lv, features, "decoder input")
    h = relu(_conv(params, f"{pre}.layer1", concat_channels([features, lv.detach()])))
    for b, rate in enumerate(cfg.dilations):
        ca, na, cb, nb = cfg.block_layers(b)
        y = _conv(params, f"{pre}.layer{ca}", h, dilation=rate)
        y = relu(batchnorm2d(y, params[f"{pre}.layer{na}.weight"], params[f"{pre}.layer{na}.bias"],
                             params.buffers[f"{pre}.layer{na}"], mode))
        y = _conv(params, f"{pre}.layer{cb}", y, dilation=rate)
        y = batchnorm2d(y, params[f"{pre}.layer{nb}.weight"], params[f"{pre}.layer{nb}.bias"],
                        params.buffers[f"{pre}.layer{nb}"], mode)
        h = relu(add(y, h))
    for i in range(len(cfg.deconv_widths)):
        if cfg.inject == "all" and i > 0:
            _check_level(levels[i], h, f"deconv {i + 1} input")
            h = concat_channels([h, levels[i].detach()])
        k = cfg.deconv_layer(i)
        h = relu(conv_transpose2d(h, params[f"{pre}.layer{k}.weight"], params[f"{pre}.layer{k}.bias"],
                                  stride=2, padding=1))
    return sigmoid(_conv(params, f"{pre}.layer{cfg.head_layer}", h))


def discriminator_forward(params: ParamStore, m: Tensor, mode: str = "critic",
                          cfg: NetworkConfig | None = None) -> Tensor:
    """Score map of shape (n, 1, h/16, w/16); sigmoid applied in probability mode."""
    cfg = cfg or NetworkConfig()
    if m.data.ndim != 4 or m.shape[1] != 1:
        raise ShapeError(f"discriminator expects a single-channel map, got shape {m.shape}")
    h = m
    n_hidden = len(cfg.disc_widths)
    for k in range(1, n_hidden + 1):
        h = relu(_conv(params, f"disc.layer{k}", h, stride=2 if k in cfg.disc_strided else 1))
    out = _conv(params, f"disc.layer{n_hidden + 1}", h)
    if mode == "probability":
        return sigmoid(out)
    if mode != "critic":
        raise ValueError(f"unknown discriminator mode {mode!r}")
    return out


def make_pyramid(image: Tensor, cfg: NetworkConfig) -> imageops.OutlinePyramid:
    """Outline levels at every decoder resolution (zeros when outlines are disabled)."""
    h, w = image.shape[2:]
    dims = cfg.level_dims(h, w)
    if not cfg.use_outline:
        n = image.shape[0]
        return imageops.OutlinePyramid([Tensor(np.zeros((n, cfg.outline_channels, a, b), dtype=image.dtype))
                                        for a, b in dims], cfg.sigma)
    pyr = imageops.outline_pyramid(image, dims, cfg.sigma, cfg.log_radius)
    if cfg.outline_channels != 1:
        pyr.levels = [Tensor(np.repeat(lv.data, cfg.outline_channels, axis=1)) for lv in pyr.levels]
    return pyr


def check_divisible(image: Tensor) -> None:
    h, w = image.shape[2:]
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ShapeError(f"image dims {h}x{w} must be divisible by {DOWNSAMPLE}; pad first")


def generate(params: ParamStore, image: Tensor, cfg: NetworkConfig, pyramid=None,
             mode: str = "train", two_stage: bool = True) -> tuple[Tensor, Tensor | None]:
    """Run stage 1 and (optionally) stage 2; returns (coarse, fine)."""
    check_divisible(image)
    if pyramid is None:
        pyramid = make_pyramid(image, cfg)
    coarse = decoder_forward(params, 1, encoder_forward(params, 1, image, cfg), pyramid, cfg, mode)
    if not two_stage:
        return coarse, None
    x2 = concat_channels([image, coarse])
    fine = decoder_forward(params, 2, encoder_forward(params, 2, x2, cfg), pyramid, cfg, mode)
    return coarse, fine


def predict(params: ParamStore, image: Tensor, cfg: NetworkConfig | None = None,
            sigma: float | None = None) -> tuple[Tensor, Tensor]:
    """Eval-mode coarse and fine maps for an image whose dims divide by 16."""
    cfg = cfg or NetworkConfig()
    if sigma is not None and sigma != cfg.sigma:
        cfg = dataclasses.replace(cfg, sigma=sigma)
    if image.data.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"predict expects a (n,3,h,w) image, got {image.shape}")
    dtype = params["stage1.encoder.layer1.weight"].dtype
    image = Tensor(image.data.astype(dtype))
    with no_grad():
        coarse, fine = generate(params, image, cfg, mode="eval")
    return coarse, fine


def layer_param_count(cfg: NetworkConfig) -> dict[str, int]:
    """Closed-form parameter counts (unique storage) per group."""
    def conv(oc, ic, k):
        return oc * ic * k * k + oc

    enc1 = sum(conv(*s) for part, k, kind, s in _stage_layer_specs(cfg, 3) if part == "encoder")
    first2 = conv(cfg.encoder_widths[0], 4, 3)
    dec = 0
    for part, k, kind, s in _stage_layer_specs(cfg, 3):
        if part != "decoder":
            continue
        if kind == "bn":
            dec += 2 * s[0]
        elif kind == "deconv":
            ic, oc, kk = s
            dec += ic * oc * kk * kk + oc
        else:
            dec += conv(*s)
    c, disc = 1, 0
    for oc in cfg.disc_widths:
        disc += conv(oc, c, 3)
        c = oc
    disc += conv(1, c, 3)
    return {"generator": enc1 + first2 + dec, "discriminator": disc}
