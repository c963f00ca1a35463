"""Linear correlation (CC) and normalized scanpath saliency (NSS)."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    """The metric is undefined for this input (zero variance, no fixations)."""


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def cc(pred, truth) -> float:
    """Pearson correlation over all pixels, population moments."""
    p, t = _arr(pred).ravel(), _arr(truth).ravel()
    if p.shape != t.shape:
        raise ValueError(f"cc: shape mismatch {_arr(pred).shape} vs {_arr(truth).shape}")
    pc, tc = p - p.mean(), t - t.mean()
    sp, st = np.sqrt(np.mean(pc * pc)), np.sqrt(np.mean(tc * tc))
    if sp == 0 or st == 0:
        raise UndefinedMetricError("cc undefined for a constant map")
    return float(np.mean(pc * tc) / (sp * st))


def nss(pred, fixations) -> float:
    """Mean z-scored prediction at the fixated pixels."""
    p = _arr(pred)
    mask = _arr(fixations) > 0
    if p.shape != mask.shape:
        raise ValueError(f"nss: shape mismatch {p.shape} vs {mask.shape}")
    if not mask.any():
        raise UndefinedMetricError("nss undefined without fixations")
    sd = p.std()
    if sd == 0:
        raise UndefinedMetricError("nss undefined for a constant map")
    return float(((p - p.mean()) / sd)[mask].mean())


@dataclass
class MetricReport:
    ids: list[str] = field(default_factory=list)
    cc: list[float | None] = field(default_factory=list)
    nss: list[float | None] = field(default_factory=list)

    def add(self, image_id: str, cc_value: float | None, nss_value: float | None) -> None:
        self.ids.append(image_id)
        self.cc.append(cc_value)
        self.nss.append(nss_value)

    @staticmethod
    def _stats(values) -> tuple[float, float, int]:
        v = [x for x in values if x is not None]
        if not v:
            return math.nan, math.nan, 0
        a = np.array(v)
        return float(a.mean()), float(a.std()), len(v)

    @property
    def count(self) -> int:
        return len(self.ids)

    def summary(self) -> dict:
        cc_mean, cc_std, cc_n = self._stats(self.cc)
        nss_mean, nss_std, nss_n = self._stats(self.nss)
        return {
            "count": self.count,
            "cc_mean": cc_mean, "cc_std": cc_std, "cc_count": cc_n,
            "nss_mean": nss_mean, "nss_std": nss_std, "nss_count": nss_n,
            "excluded_cc": self.count - cc_n,
            "excluded_nss": self.count - nss_n,
            "excluded": sum(1 for c, s in zip(self.cc, self.nss) if c is None or s is None),
        }

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / "metrics.csv", out_dir / "summary.json"
        with open(csv_path, "w") as fh:
            fh.write("image_id,cc,nss\n")
            for i, c, s in zip(self.ids, self.cc, self.nss):
                fh.write(f"{i},{'' if c is None else repr(c)},{'' if s is None else repr(s)}\n")
        json_path.write_text(json.dumps(self.summary(), indent=2) + "\n")
        return csv_path, json_path


def score_maps(image_id: str, pred, saliency, mask, report: MetricReport) -> None:
    """Add one image's CC (vs density) and NSS (vs binary mask) to ``report``."""
    try:
        c = cc(pred, saliency)
    except UndefinedMetricError as exc:
        log.warning("%s: %s", image_id, exc)
        c = None
    s = None
    if mask is not None:
        try:
            s = nss(pred, mask)
        except UndefinedMetricError as exc:
            log.warning("%s: %s", image_id, exc)
    report.add(image_id, c, s)


def evaluate_dataset(params, samples, cfg=None, sigma: float | None = None, stage: str = "fine") -> MetricReport:
    """Predict every sample, crop back to its original size, and score it."""
    from .networks import predict

    if not samples:
        raise ValueError("evaluate_dataset: empty dataset")
    report = MetricReport()
    for s in samples:
        if s.saliency is None:
            raise ValueError(f"{s.id}: missing ground-truth saliency")
        coarse, fine = predict(params, s.image, cfg, sigma)
        pred = fine if stage == "fine" else coarse
        h, w = s.orig_hw
        mask = None if s.fixation_mask is None else s.fixation_mask.data[..., :h, :w]
        score_maps(s.id, pred.data[..., :h, :w], s.saliency.data[..., :h, :w], mask, report)
    return report
