"""Segmentation proposals and max-IoU validation of projected change masks.

The built-in proposer is a desk-scale stand-in for a promptable segmenter:
it blurs, quantizes colors, cuts regions along strong edges, and keeps
connected components above a minimum area. Real segmenter output plugs in
through per-view PGM directories with the same layout.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ContractError
from .images import load_mask_pgm, luminance


@dataclass
class SegmentationProposals:
    view_id: int
    masks: list[np.ndarray]
    source: str = "connected_components"  # or external_files


@dataclass
class SegmentParams:
    blur_sigma: float = 1.0
    edge_threshold: float = 0.08
    min_area: int = 60
    levels: int = 6  # color quantization levels per channel


def propose_segments(pixels: np.ndarray, params: SegmentParams | None = None,
                     view_id: int = -1) -> SegmentationProposals:
    """Connected components of the color-quantized, edge-separated image."""
    p = params or SegmentParams()
    img = np.asarray(pixels, np.float64)
    if p.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, (p.blur_sigma, p.blur_sigma, 0),
                                      mode="nearest")
    lum = luminance(img)
    gy = ndimage.sobel(lum, axis=0, mode="nearest")
    gx = ndimage.sobel(lum, axis=1, mode="nearest")
    edges = np.hypot(gx, gy) > p.edge_threshold

    quant = np.clip((img * p.levels).astype(np.int64), 0, p.levels - 1)
    key = (quant[..., 0] * p.levels + quant[..., 1]) * p.levels + quant[..., 2]

    masks = []
    for k in np.unique(key):
        region = (key == k) & ~edges
        if not region.any():
            continue
        labels, count = ndimage.label(region)
        sizes = np.bincount(labels.reshape(-1), minlength=count + 1)
        for lab in range(1, count + 1):
            if sizes[lab] >= p.min_area:
                masks.append(labels == lab)
    return SegmentationProposals(view_id=view_id, masks=masks)


def load_proposals(root, view_id: int) -> SegmentationProposals:
    """Read ``<root>/view_<id>/mask_<k>.pgm`` in ascending k order."""
    vdir = os.path.join(str(root), f"view_{view_id}")
    masks = []
    if os.path.isdir(vdir):
        entries = []
        for name in os.listdir(vdir):
            m = re.fullmatch(r"mask_(\d+)\.pgm", name)
            if m:
                entries.append((int(m.group(1)), name))
        for _, name in sorted(entries):
            masks.append(load_mask_pgm(os.path.join(vdir, name)))
    return SegmentationProposals(view_id=view_id, masks=masks,
                                 source="external_files")


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a | b)
    return inter / union if union else 1.0


def validate(projected: np.ndarray, proposals: SegmentationProposals,
             min_iou: float = 0.3) -> np.ndarray | None:
    """Best-IoU proposal for a projected 3D difference mask.

    Returns the argmax-IoU proposal when it reaches ``min_iou``; ties break
    toward the smaller mask, then the lower index. None when nothing
    qualifies (callers pass the projected mask through, flagged).
    """
    best = None
    best_key = None
    for i, m in enumerate(proposals.masks):
        if m.shape != projected.shape:
            raise ContractError("proposal dims do not match projected mask")
        iou = mask_iou(projected, m)
        key = (-iou, int(np.count_nonzero(m)), i)
        if best_key is None or key < best_key:
            best, best_key = m, key
    if best is None or -best_key[0] < min_iou:
        return None
    return best
