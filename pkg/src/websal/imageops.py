"""Classical image processing: LoG outlines, area resampling, fixation
densities, and PNG/PGM input/output."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .nn import conv2d
from .tensor import ShapeError, Tensor, no_grad

# BT.601 luma
LUMA = (0.299, 0.587, 0.114)
DEFAULT_SIGMA = 2.0
# fixation blur of 25 px for a 1360-px-wide screenshot, scaled with width
FIXATION_BLUR_PX = 25.0
FIXATION_BLUR_REF_WIDTH = 1360

# Type alias: a (n, 1, h, w) tensor with values in [0, 1].
SaliencyMap = Tensor


class ImageFormatError(ValueError):
    """Unsupported image format."""


class CorruptImageError(ValueError):
    """File could not be decoded."""


class FixationBoundsError(ValueError):
    pass


@dataclass
class OutlinePyramid:
    levels: list[Tensor]
    sigma: float

    def dims(self) -> list[tuple[int, int]]:
        return [lv.shape[2:] for lv in self.levels]


def default_radius(sigma: float) -> int:
    return max(1, math.ceil(3.0 * sigma))


def default_blur_sigma(width: int) -> float:
    return FIXATION_BLUR_PX * width / FIXATION_BLUR_REF_WIDTH


def log_kernel(sigma: float, radius: int | None = None, zero_mean: bool = True) -> Tensor:
    """Sampled Laplacian-of-Gaussian kernel of shape (1, 1, 2r+1, 2r+1).

    With ``zero_mean`` the samples are shifted so they sum to zero, making the
    response to any constant region exactly zero.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    r = default_radius(sigma) if radius is None else int(radius)
    if r < 1:
        raise ValueError(f"radius must be >= 1, got {r}")
    ax = np.arange(-r, r + 1, dtype=np.float64)
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    q = (xx ** 2 + yy ** 2) / (2.0 * sigma ** 2)
    k = -1.0 / (math.pi * sigma ** 4) * (1.0 - q) * np.exp(-q)
    if zero_mean:
        k = k - k.mean()
    return Tensor(k.reshape(1, 1, 2 * r + 1, 2 * r + 1))


def to_gray(image: Tensor) -> np.ndarray:
    if image.data.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"expected (n,3,h,w) image, got {image.shape}")
    d = image.data
    return (LUMA[0] * d[:, 0] + LUMA[1] * d[:, 1] + LUMA[2] * d[:, 2])[:, None]


def _minmax(a: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    for i in range(a.shape[0]):
        lo, hi = a[i].min(), a[i].max()
        if hi > lo:
            out[i] = (a[i] - lo) / (hi - lo)
    return out


def extract_outline(image: Tensor, sigma: float = DEFAULT_SIGMA, radius: int | None = None,
                    normalize: bool = True) -> Tensor:
    """Edge-strength map |LoG * gray(image)|, min-max scaled per image.

    With ``normalize=False`` the signed filter response is returned instead,
    which is what the constant-shift invariance is defined on.
    """
    kern = log_kernel(sigma, radius)
    r = kern.shape[-1] // 2
    gray = to_gray(image)
    h, w = gray.shape[2:]
    if r >= h or r >= w:
        # reflect padding cannot extend past one full image width
        padded = np.pad(gray, ((0, 0), (0, 0), (r, r), (r, r)), mode="symmetric")
    else:
        padded = np.pad(gray, ((0, 0), (0, 0), (r, r), (r, r)), mode="reflect")
    with no_grad():
        resp = conv2d(Tensor(padded), kern).data
    if not normalize:
        return Tensor(resp)
    return Tensor(_minmax(np.abs(resp)))


def _area_matrix(src: int, dst: int) -> np.ndarray:
    a = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        for k in range(int(math.floor(lo)), min(src, int(math.ceil(hi)))):
            a[i, k] = min(hi, k + 1) - max(lo, k)
        a[i] /= scale
    return a


def downsample(m: Tensor, target_h: int, target_w: int) -> Tensor:
    """Area-average resampling to a smaller grid, allowing fractional bins."""
    h, w = m.shape[2:]
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target dims must be >= 1, got {target_h}x{target_w}")
    if target_h > h or target_w > w:
        raise ValueError(f"downsample cannot upsample {h}x{w} to {target_h}x{target_w}")
    if (target_h, target_w) == (h, w):
        return Tensor(m.data.copy())
    ah = _area_matrix(h, target_h).astype(m.dtype)
    aw = _area_matrix(w, target_w).astype(m.dtype)
    return Tensor(np.einsum("ih,nchw,jw->ncij", ah, m.data, aw))


def outline_pyramid(image: Tensor, dims: Sequence[tuple[int, int]], sigma: float = DEFAULT_SIGMA,
                    radius: int | None = None) -> OutlinePyramid:
    full = extract_outline(image, sigma, radius)
    levels = [Tensor(_minmax(downsample(full, h, w).data).astype(image.dtype)) for h, w in dims]
    return OutlinePyramid(levels, sigma)


def fixations_to_saliency(points: Sequence[tuple[int, int]], h: int, w: int,
                          sigma_blur: float) -> SaliencyMap:
    """Gaussian-blurred binary fixation map, max-normalized to [0, 1]."""
    if not sigma_blur > 0:
        raise ValueError(f"sigma_blur must be > 0, got {sigma_blur}")
    bad = [(x, y) for x, y in points if not (0 <= x < w and 0 <= y < h)]
    if bad:
        raise FixationBoundsError(f"fixations outside {w}x{h} image: {bad}")
    imp = fixation_mask(points, h, w).data[0, 0]
    if not imp.any():
        return Tensor(np.zeros((1, 1, h, w)))
    blurred = ndimage.gaussian_filter(imp, sigma_blur, mode="constant", truncate=4.0)
    return Tensor((blurred / blurred.max()).reshape(1, 1, h, w))


def fixation_mask(points: Sequence[tuple[int, int]], h: int, w: int) -> Tensor:
    m = np.zeros((1, 1, h, w))
    for x, y in points:
        m[0, 0, int(y), int(x)] = 1.0
    return Tensor(m)


# -- file I/O ---------------------------------------------------------------

_FORMATS = {".png": "PNG", ".pgm": "PPM"}


def _open(path) -> Image.Image:
    path = Path(path)
    if path.suffix.lower() not in _FORMATS:
        raise ImageFormatError(f"{path}: unsupported format (PNG and binary PGM only)")
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CorruptImageError(f"{path}: cannot decode image ({exc})") from exc
    if img.format not in ("PNG", "PPM"):
        raise ImageFormatError(f"{path}: unsupported format {img.format}")
    return img


def load_image(path) -> Tensor:
    """Read PNG or P5 PGM into a (1, 3, h, w) tensor scaled to [0, 1]."""
    img = _open(path)
    if img.mode in ("I;16", "I"):
        arr = np.asarray(img, dtype=np.float64) / 65535.0
        arr = np.repeat(arr[..., None], 3, axis=2)
    else:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return Tensor(arr.transpose(2, 0, 1)[None].copy())


def load_gray(path) -> Tensor:
    """Read a single-channel map (PNG or PGM) into (1, 1, h, w) in [0, 1]."""
    img = _open(path)
    if img.mode in ("I;16", "I"):
        arr = np.asarray(img, dtype=np.float64) / 65535.0
    else:
        arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    return Tensor(arr[None, None].copy())


def _to_u8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(a, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _save(arr: np.ndarray, path) -> None:
    path = Path(path)
    fmt = _FORMATS.get(path.suffix.lower())
    if fmt is None:
        raise ImageFormatError(f"{path}: unsupported output format")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format=fmt)


def save_image(image: Tensor, path) -> None:
    """Write a (1, 3, h, w) image as 8-bit RGB PNG (or grayscale PGM)."""
    arr = _to_u8(image.data[0].transpose(1, 2, 0))
    if Path(path).suffix.lower() == ".pgm":
        arr = _to_u8(to_gray(image)[0, 0])
    _save(arr, path)


def save_gray(m: Tensor, path) -> None:
    _save(_to_u8(m.data[0, 0]), path)


@lru_cache(maxsize=1)
def colormap() -> np.ndarray:
    """The shipped 256x3 red-yellow table as uint8."""
    text = resources.files("websal").joinpath("data/redyellow.csv").read_text()
    rows = [line.split(",") for line in text.splitlines() if line and not line.startswith("#")]
    table = np.array([[int(v) for v in r[1:]] for r in rows], dtype=np.uint8)
    assert table.shape == (256, 3)
    return table


def heatmap_overlay(m: Tensor, base: Tensor, alpha: float = 0.5) -> np.ndarray:
    """Blend the colormapped saliency over the stimulus; returns float RGB (h, w, 3) in [0, 1]."""
    sal = m.data[0, 0]
    img = base.data[0].transpose(1, 2, 0)
    if sal.shape != img.shape[:2]:
        raise ShapeError(f"heatmap {sal.shape} does not match image {img.shape[:2]}")
    idx = np.clip(np.rint(sal * 255.0), 0, 255).astype(np.intp)
    colors = colormap()[idx].astype(np.float64) / 255.0
    return (1.0 - alpha) * img + alpha * colors


def save_heatmap(m: Tensor, base: Tensor, path) -> None:
    _save(_to_u8(heatmap_overlay(m, base)), path)


def pad_to_multiple(arr: np.ndarray, multiple: int = 16, mode: str = "reflect") -> np.ndarray:
    """Pad the trailing (h, w) axes up to the next multiple; ``mode`` as for numpy.pad."""
    h, w = arr.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return arr.copy()
    widths = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    if mode == "reflect" and (ph >= h or pw >= w):
        mode = "symmetric"
    return np.pad(arr, widths, mode=mode)


def crop(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    return arr[..., :h, :w].copy()
