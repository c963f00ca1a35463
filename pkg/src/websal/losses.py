"""Supervised, adversarial and smoothness losses and their weighted sum."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

from .tensor import (ShapeError, Tensor, add, add_scalar, clamp, log, mean_all, power, scale,
                     square, subtract, sum_all, zero_pad)

GAN_MODES = ("wgan-clip", "standard")
TERMS = ("l1", "l2_g", "l3", "l4_g", "tv")
_PROB_EPS = 1e-7


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 1.0
    lambda3: float = 0.1
    lambda4: float = 1.0
    lambda5: float = 0.1
    alpha: float = 1.0
    gan_mode: str = "wgan-clip"

    def __post_init__(self):
        lams = self.as_tuple()
        if any(not (v >= 0) for v in lams):
            raise ValueError(f"loss weights must be >= 0, got {lams}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.gan_mode not in GAN_MODES:
            raise ValueError(f"gan_mode must be one of {GAN_MODES}, got {self.gan_mode!r}")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class LossReport:
    l1: float
    l2_g: float
    l3: float
    l4_g: float
    tv: float
    total: float
    d_loss: float = 0.0

    @classmethod
    def from_terms(cls, terms: dict[str, float], weights: LossWeights, d_loss: float = 0.0) -> "LossReport":
        total = 0.0
        for lam, key in zip(weights.as_tuple(), TERMS):
            total += lam * terms[key]
        return cls(*(terms[k] for k in TERMS), total=total, d_loss=d_loss)


def _check_pair(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def l2_pixel_loss(pred: Tensor, truth: Tensor) -> Tensor:
    """Sum of squared errors over (c, h, w) divided by 2*C*H*W, averaged over the batch."""
    _check_pair(pred, truth, "l2_pixel_loss")
    n, c, h, w = pred.shape
    return scale(sum_all(square(subtract(truth, pred))), 1.0 / (2.0 * c * h * w * n))


def generator_adv_loss(d_fake: Tensor, mode: str = "wgan-clip") -> Tensor:
    if mode == "wgan-clip":
        return scale(mean_all(d_fake), -1.0)
    if mode == "standard":
        return scale(mean_all(log(clamp(d_fake, _PROB_EPS, 1.0 - _PROB_EPS))), -1.0)
    raise ValueError(f"unknown gan mode {mode!r}")


def discriminator_adv_loss(d_real: Tensor, d_fake: Tensor, mode: str = "wgan-clip") -> Tensor:
    _check_pair(d_real, d_fake, "adversarial score maps")
    if mode == "wgan-clip":
        return subtract(mean_all(d_fake), mean_all(d_real))
    if mode == "standard":
        real = mean_all(log(clamp(d_real, _PROB_EPS, 1.0 - _PROB_EPS)))
        fake = mean_all(log(add_scalar(scale(clamp(d_fake, _PROB_EPS, 1.0 - _PROB_EPS), -1.0), 1.0)))
        return scale(add(real, fake), -1.0)
    raise ValueError(f"unknown gan mode {mode!r}")


def adversarial_losses(d_real: Tensor, d_fake: Tensor, mode: str = "wgan-clip") -> tuple[Tensor, Tensor]:
    """(generator loss, discriminator loss) from critic scores (wgan-clip) or
    probabilities (standard)."""
    return generator_adv_loss(d_fake, mode), discriminator_adv_loss(d_real, d_fake, mode)


def tv_loss(m: Tensor, alpha: float = 1.0, reduction: str = "mean") -> Tensor:
    """Total variation with exponent 1/alpha, batch-averaged.

    Differences toward a missing forward neighbour (last row/column) count as
    zero. ``reduction="mean"`` divides each map's sum by the number of pixels
    that have at least one forward neighbour, C*(H*W - 1), which keeps the term
    on the same per-pixel scale as :func:`l2_pixel_loss`; ``"sum"`` returns the
    raw sum.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    n, c, h, w = m.shape
    if h * w < 2:
        raise ShapeError(f"tv_loss needs at least two pixels, got {h}x{w}")
    per_pixel = None
    if w >= 2:
        dx = subtract(m[:, :, :, 1:], m[:, :, :, :-1])
        per_pixel = zero_pad(square(dx), right=1)
    if h >= 2:
        dy = zero_pad(square(subtract(m[:, :, 1:, :], m[:, :, :-1, :])), bottom=1)
        per_pixel = dy if per_pixel is None else add(per_pixel, dy)
    if alpha != 1.0:
        per_pixel = power(per_pixel, 1.0 / alpha)
    denom = n * (c * (h * w - 1) if reduction == "mean" else 1)
    return scale(sum_all(per_pixel), 1.0 / denom)


def total_loss(terms: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum of the five generator terms."""
    total = None
    for lam, key in zip(weights.as_tuple(), TERMS):
        t = terms[key]
        if not math.isfinite(t.item()):
            raise NonFiniteLossError(f"loss term {key} is not finite ({t.item()})")
        piece = scale(t, lam)
        total = piece if total is None else add(total, piece)
    return total
