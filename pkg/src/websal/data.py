"""Dataset ingestion (FIWI-style layout), splits, batching, and a synthetic
webpage generator with a known saliency rule."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import imageops
from .rng import SplitMix64
from .tensor import Tensor

CATEGORIES = ("textual", "pictorial", "mixed", "synthetic")
IMAGE_SUFFIXES = (".png", ".pgm")
MULTIPLE = 16


class DatasetError(ValueError):
    pass


@dataclass
class WebpageSample:
    id: str
    image: Tensor                      # (1, 3, h, w), padded to multiples of 16
    saliency: Tensor                   # (1, 1, h, w) blurred density in [0, 1]
    fixation_mask: Tensor | None = None
    category: str = "mixed"
    orig_hw: tuple[int, int] = (0, 0)
    points: list[tuple[int, int]] = field(default_factory=list)
    checksum: str = ""

    @property
    def hw(self) -> tuple[int, int]:
        return self.image.shape[2], self.image.shape[3]


def validate_sample(s: WebpageSample) -> None:
    h, w = s.hw
    if s.image.data.ndim != 4 or s.image.shape[:2] != (1, 3):
        raise DatasetError(f"{s.id}: image must be (1,3,h,w), got {s.image.shape}")
    if s.saliency.shape != (1, 1, h, w):
        raise DatasetError(f"{s.id}: saliency {s.saliency.shape} does not match image {h}x{w}")
    if h % MULTIPLE or w % MULTIPLE:
        raise DatasetError(f"{s.id}: dims {h}x{w} not divisible by {MULTIPLE}")
    sal = s.saliency.data
    if sal.min() < 0 or sal.max() > 1:
        raise DatasetError(f"{s.id}: saliency outside [0,1]")
    has_fix = (s.fixation_mask is not None and s.fixation_mask.data.any()) or bool(s.points)
    if has_fix and not math.isclose(float(sal.max()), 1.0, abs_tol=1e-9):
        raise DatasetError(f"{s.id}: saliency max is {sal.max()}, expected 1")
    if s.fixation_mask is not None and s.fixation_mask.shape != (1, 1, h, w):
        raise DatasetError(f"{s.id}: fixation mask {s.fixation_mask.shape} does not match image")
    if s.category not in CATEGORIES:
        raise DatasetError(f"{s.id}: unknown category {s.category!r}")


def _pad_sample(sid, image, saliency, mask, category, points, checksum) -> WebpageSample:
    h, w = image.shape[2:]
    img = imageops.pad_to_multiple(image, MULTIPLE, "reflect")
    sal = imageops.pad_to_multiple(saliency, MULTIPLE, "constant")
    msk = None if mask is None else imageops.pad_to_multiple(mask, MULTIPLE, "constant")
    s = WebpageSample(sid, Tensor(img), Tensor(sal), None if msk is None else Tensor(msk),
                      category, (h, w), list(points), checksum)
    validate_sample(s)
    return s


def read_fixations(path) -> list[tuple[int, int]]:
    """Parse ``x y`` integer pairs, one per line; blank lines and ``#`` comments skipped."""
    pts = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        try:
            x, y = (int(v) for v in parts)
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: expected 'x y' integers, got {line!r}") from None
        pts.append((x, y))
    return pts


def write_fixations(path, points) -> None:
    Path(path).write_text("".join(f"{x} {y}\n" for x, y in points))


def _find(folder: Path, sid: str) -> Path | None:
    for suf in IMAGE_SUFFIXES:
        p = folder / f"{sid}{suf}"
        if p.exists():
            return p
    return None


def _read_categories(root: Path) -> dict[str, str]:
    path = root / "categories.txt"
    if not path.exists():
        return {}
    out = {}
    for line in path.read_text().splitlines():
        parts = line.split()
        if len(parts) == 2:
            out[parts[0]] = parts[1]
    return out


def load_dataset(root, blur_sigma: float | None = None) -> list[WebpageSample]:
    """Load ``stimuli/`` plus ``fixmaps/`` and/or ``fixations/`` from ``root``.

    Images are reflect-padded to multiples of 16; densities and masks are
    zero-padded. When only fixation points exist, the density is built with
    a Gaussian blur (``blur_sigma`` defaults to 25 px per 1360 px of width).
    """
    root = Path(root)
    stim_dir = root / "stimuli"
    if not stim_dir.is_dir():
        raise DatasetError(f"{root}: missing stimuli/ directory")
    stimuli = sorted(p for p in stim_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not stimuli:
        raise DatasetError(f"{stim_dir}: no PNG/PGM stimuli")
    cats = _read_categories(root)
    missing, samples = [], []
    for path in stimuli:
        sid = path.stem
        fixmap = _find(root / "fixmaps", sid)
        fixtxt = root / "fixations" / f"{sid}.txt"
        if fixmap is None and not fixtxt.exists():
            missing.append(str(path))
            continue
        try:
            image = imageops.load_image(path).data
            points = read_fixations(fixtxt) if fixtxt.exists() else []
            h, w = image.shape[2:]
            if fixmap is not None:
                sal = imageops.load_gray(fixmap).data
                if sal.shape[2:] != (h, w):
                    raise DatasetError(f"{fixmap}: size {sal.shape[2:]} differs from stimulus {h}x{w}")
                if sal.max() > 0:
                    sal = sal / sal.max()
            else:
                sigma = blur_sigma if blur_sigma is not None else imageops.default_blur_sigma(w)
                sal = imageops.fixations_to_saliency(points, h, w, sigma).data
            if points:
                bad = [(x, y) for x, y in points if not (0 <= x < w and 0 <= y < h)]
                if bad:
                    raise DatasetError(f"{fixtxt}: fixations outside {w}x{h} image: {bad}")
            mask = imageops.fixation_mask(points, h, w).data if points else None
        except (imageops.ImageFormatError, imageops.CorruptImageError, OSError) as exc:
            raise DatasetError(f"unreadable file for {sid}: {exc}") from exc
        except imageops.FixationBoundsError as exc:
            raise DatasetError(f"{fixtxt}: {exc}") from exc
        checksum = hashlib.sha256(path.read_bytes()).hexdigest()
        samples.append(_pad_sample(sid, image, sal, mask, cats.get(sid, "mixed"), points, checksum))
    if missing:
        raise DatasetError(f"stimuli without fixmaps/ or fixations/ ground truth: {missing}")
    return samples


def manifest(samples: Sequence[WebpageSample]) -> dict:
    return {"count": len(samples),
            "items": [{"id": s.id, "height": s.orig_hw[0], "width": s.orig_hw[1],
                       "padded_height": s.hw[0], "padded_width": s.hw[1],
                       "category": s.category, "checksum": s.checksum} for s in samples]}


def write_manifest(samples: Sequence[WebpageSample], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest(samples), indent=2) + "\n")
    return path


@dataclass
class DatasetSplit:
    train: list[str]
    test: list[str]
    seed: int


def split_dataset(samples: Sequence[WebpageSample], train_count: int, seed: int) -> DatasetSplit:
    n = len(samples)
    if not 0 < train_count < n:
        raise DatasetError(f"train_count must be in (0, {n}), got {train_count}")
    ids = [s.id for s in samples]
    SplitMix64(seed).shuffle(ids)
    return DatasetSplit(ids[:train_count], ids[train_count:], seed)


@dataclass
class Batch:
    ids: list[str]
    images: Tensor
    saliency: Tensor
    masks: Tensor | None


def _collate(items: Sequence[WebpageSample]) -> Batch:
    H = max(s.hw[0] for s in items)
    W = max(s.hw[1] for s in items)

    def grow(a, mode):
        ph, pw = H - a.shape[2], W - a.shape[3]
        if ph == 0 and pw == 0:
            return a
        if mode == "reflect" and (ph >= a.shape[2] or pw >= a.shape[3]):
            mode = "symmetric"
        return np.pad(a, ((0, 0), (0, 0), (0, ph), (0, pw)), mode=mode)

    images = np.concatenate([grow(s.image.data, "reflect") for s in items])
    sal = np.concatenate([grow(s.saliency.data, "constant") for s in items])
    masks = None
    if all(s.fixation_mask is not None for s in items):
        masks = Tensor(np.concatenate([grow(s.fixation_mask.data, "constant") for s in items]))
    return Batch([s.id for s in items], Tensor(images), Tensor(sal), masks)


def batch_iter(samples: Sequence[WebpageSample], batch_size: int, seed: int, epoch: int) -> Iterator[Batch]:
    """Per-epoch shuffled batches (generator seeded with seed XOR epoch); last partial batch kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if not samples:
        raise DatasetError("batch_iter: empty split")
    order = list(range(len(samples)))
    SplitMix64(seed ^ epoch).shuffle(order)
    for i in range(0, len(order), batch_size):
        yield _collate([samples[j] for j in order[i:i + batch_size]])


def select(samples: Sequence[WebpageSample], ids: Sequence[str]) -> list[WebpageSample]:
    by_id = {s.id: s for s in samples}
    return [by_id[i] for i in ids]


# -- synthetic webpages -------------------------------------------------------

BUMP_WEIGHTS = {"logo": 1.0, "card": 0.7, "text": 0.5}
PRIOR_WEIGHT = 0.15


@dataclass
class Layout:
    header: tuple[int, int, int, int]          # (y0, y1, x0, x1), half-open
    nav: tuple[int, int, int, int]
    logo: tuple[int, int, int, int]
    cards: list[tuple[int, int, int, int]]
    stripes: list[tuple[int, int, int, int]]
    text_block: tuple[int, int, int, int]      # bounding box of the first text block


def _center(box) -> tuple[float, float]:
    y0, y1, x0, x1 = box
    return (y0 + y1 - 1) / 2.0, (x0 + x1 - 1) / 2.0


def bump_centers(layout: Layout) -> list[tuple[str, tuple[float, float]]]:
    out = [("logo", _center(layout.logo))]
    out += [("card", _center(c)) for c in layout.cards]
    out.append(("text", _center(layout.text_block)))
    return out


def synth_saliency(layout: Layout, h: int, w: int) -> np.ndarray:
    """Weighted Gaussian bumps combined by pointwise max, plus a top-left prior, max-normalized."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sigma = w / 12.0
    sal = np.zeros((h, w))
    for kind, (cy, cx) in bump_centers(layout):
        bump = BUMP_WEIGHTS[kind] * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        sal = np.maximum(sal, bump)
    sal += PRIOR_WEIGHT * np.exp(-((yy / h) ** 2 + (xx / w) ** 2) / (2 * 0.35 ** 2))
    return sal / sal.max()


def synth_layout(rng: SplitMix64, h: int, w: int) -> Layout:
    u = h / 64.0
    hh = max(6, round(h * rng.uniform(0.12, 0.17)))
    header = (0, hh, 0, w)
    lsz = max(4, round(hh * 0.7))
    lx = max(1, round(w * rng.uniform(0.02, 0.06)))
    ly = (hh - lsz) // 2
    logo = (ly, ly + lsz, lx, lx + lsz)
    nav_w = max(6, round(w * rng.uniform(0.15, 0.22)))
    nav = (hh, h, 0, nav_w)

    margin = max(2, round(2 * u))
    cx0, cx1 = nav_w + margin, w - margin
    n_cards = rng.randint(1, 3)
    gap = margin
    card_w = (cx1 - cx0 - gap * (n_cards - 1)) // n_cards
    card_h = max(6, round(h * rng.uniform(0.2, 0.28)))
    cy0 = hh + margin
    cards = [(cy0, cy0 + card_h, cx0 + i * (card_w + gap), cx0 + i * (card_w + gap) + card_w)
             for i in range(n_cards)]

    stripe_h = max(1, round(u))
    pitch = stripe_h + max(2, round(3 * u))
    ty = cy0 + card_h + margin
    n_stripes = max(3, min(rng.randint(3, 6), (h - ty - margin) // pitch))
    stripes = []
    for i in range(n_stripes):
        length = round((cx1 - cx0) * rng.uniform(0.55, 1.0))
        y = ty + i * pitch
        stripes.append((y, y + stripe_h, cx0, cx0 + length))
    text_block = (ty, stripes[-1][1], cx0, max(s[3] for s in stripes))
    # a few nav links
    for i in range(3):
        y = hh + margin + i * pitch
        if y + stripe_h < h:
            stripes.append((y, y + stripe_h, margin, nav_w - margin))
    return Layout(header, nav, logo, cards, stripes, text_block)


def _hsv_color(rng: SplitMix64, sat: float, val: float) -> np.ndarray:
    import colorsys
    return np.array(colorsys.hsv_to_rgb(rng.random(), sat, val))


def render_layout(layout: Layout, rng: SplitMix64, h: int, w: int) -> np.ndarray:
    img = np.empty((3, h, w))
    bg = rng.uniform(0.93, 0.99)
    img[:] = bg

    def fill(box, color):
        y0, y1, x0, x1 = box
        img[:, y0:y1, x0:x1] = np.asarray(color)[:, None, None]

    fill(layout.nav, np.full(3, bg - rng.uniform(0.06, 0.12)))
    fill(layout.header, _hsv_color(rng, 0.25, 0.55))
    fill(layout.logo, _hsv_color(rng, 0.9, 0.95))
    for c in layout.cards:
        fill(c, _hsv_color(rng, 0.85, 0.85))
    for s in layout.stripes:
        fill(s, np.full(3, rng.uniform(0.1, 0.25)))
    return img


def synth_webpage(seed: int, h: int = 64, w: int = 64, sid: str | None = None) -> WebpageSample:
    """Deterministic webpage-like screenshot with a rule-based ground truth."""
    if h % MULTIPLE or w % MULTIPLE or h < 64 or w < 64:
        raise DatasetError(f"synthetic dims must be multiples of {MULTIPLE} and >= 64, got {h}x{w}")
    rng = SplitMix64(seed)
    layout = synth_layout(rng, h, w)
    image = render_layout(layout, rng, h, w)[None]
    sal = synth_saliency(layout, h, w)[None, None]
    points = [(int(round(cx)), int(round(cy))) for _, (cy, cx) in bump_centers(layout)]
    mask = imageops.fixation_mask(points, h, w).data
    checksum = hashlib.sha256(image.tobytes()).hexdigest()
    s = WebpageSample(sid or f"synth_{seed}", Tensor(image), Tensor(sal), Tensor(mask),
                      "synthetic", (h, w), points, checksum)
    validate_sample(s)
    return s


def synth_dataset(count: int, seed: int = 0, h: int = 64, w: int = 64) -> list[WebpageSample]:
    gen = SplitMix64(seed)
    return [synth_webpage(gen.next_u64(), h, w, sid=f"synth_{i:03d}") for i in range(count)]


def write_fiwi_layout(samples: Sequence[WebpageSample], out_dir) -> Path:
    """Write samples as stimuli/, fixmaps/ and fixations/ (the loader's layout)."""
    out = Path(out_dir)
    for sub in ("stimuli", "fixmaps", "fixations"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        h, w = s.orig_hw
        imageops.save_image(Tensor(s.image.data[..., :h, :w]), out / "stimuli" / f"{s.id}.png")
        imageops.save_gray(Tensor(s.saliency.data[..., :h, :w]), out / "fixmaps" / f"{s.id}.png")
        write_fixations(out / "fixations" / f"{s.id}.txt", s.points)
    (out / "categories.txt").write_text("".join(f"{s.id} {s.category}\n" for s in samples))
    return out


def resolve_dataset(spec: str, blur_sigma: float | None = None, seed: int = 0) -> list[WebpageSample]:
    """``synthetic:N`` or ``synthetic:N:HxW`` generates samples; anything else is a directory."""
    if spec.startswith("synthetic:"):
        parts = spec.split(":")
        try:
            count = int(parts[1])
            h, w = (int(v) for v in parts[2].lower().split("x")) if len(parts) > 2 else (64, 64)
        except (ValueError, IndexError):
            raise DatasetError(f"bad synthetic dataset spec {spec!r}") from None
        if count < 1:
            raise DatasetError(f"synthetic count must be >= 1, got {count}")
        return synth_dataset(count, seed, h, w)
    return load_dataset(spec, blur_sigma)
