"""Detection (P/R/F1/IoU) and reconstruction (PSNR/SSIM) metrics.

Degenerate-case conventions: an empty denominator scores 1.0 (so a
correctly predicted "no change" earns full marks and the P(a,b)=R(b,a)
identity holds exactly), and identical images report PSNR as +inf.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .diff2d import local_ssim_map


@dataclass
class DetectionMetrics:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    iou: float


@dataclass
class ReconMetrics:
    psnr: float
    ssim: float
    region: str = "full"  # full | crop


def _from_counts(tp: int, fp: int, fn: int) -> DetectionMetrics:
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    iou = tp / (tp + fp + fn) if tp + fp + fn else 1.0
    return DetectionMetrics(tp, fp, fn, precision, recall, f1, iou)


def detection_metrics(pred: np.ndarray, gt: np.ndarray) -> DetectionMetrics:
    if pred.shape != gt.shape:
        raise ContractError(f"mask dims differ: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return _from_counts(tp, fp, fn)


def aggregate(metrics: list[DetectionMetrics],
              mode: str = "mean_of_views") -> DetectionMetrics:
    if not metrics:
        raise ContractError("cannot aggregate an empty metric list")
    tp = sum(m.tp for m in metrics)
    fp = sum(m.fp for m in metrics)
    fn = sum(m.fn for m in metrics)
    if mode == "pooled_pixels":
        return _from_counts(tp, fp, fn)
    if mode == "mean_of_views":
        k = len(metrics)
        return DetectionMetrics(
            tp, fp, fn,
            sum(m.precision for m in metrics) / k,
            sum(m.recall for m in metrics) / k,
            sum(m.f1 for m in metrics) / k,
            sum(m.iou for m in metrics) / k,
        )
    raise ContractError(f"unknown aggregation mode {mode!r}")


def psnr(a: np.ndarray, b: np.ndarray, region: np.ndarray | None = None
         ) -> float:
    """10 log10(1 / MSE) on unit-peak images, optionally over a mask."""
    pa = np.asarray(a, np.float64)
    pb = np.asarray(b, np.float64)
    if pa.shape != pb.shape:
        raise ContractError("psnr images must share dims")
    if region is not None:
        m = region.astype(bool)
        if not m.any():
            raise ContractError("psnr region is empty")
        pa, pb = pa[m], pb[m]
    mse = float(np.mean((pa - pb) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def crop_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight bounding box (y0, y1, x0, x1) of a nonempty mask."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise ContractError("cannot crop an empty mask")
    return int(ys.min()), int(ys.max()) + 1, int(xs.min()), int(xs.max()) + 1


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11,
         sigma: float = 1.5) -> float:
    """Mean local SSIM (Gaussian window, standard constants) on luminance."""
    return float(np.mean(local_ssim_map(a, b, window=window, sigma=sigma)))
