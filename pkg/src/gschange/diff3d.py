"""Aggregate per-view 2D masks into a per-Gaussian 3D difference.

Single-view voting sums each Gaussian's compositing contribution over
masked pixels and normalizes by the view maximum; multi-view voting
averages the normalized scores either uniformly over views or by the
number of views in which the Gaussian is actually seen. Pruning then
drops voted Gaussians whose centers fall outside the 2D masks in more
than a tau fraction of the views that see them, and the surviving
fraction (retention rate) decides which directional mask family traces
real pre-change geometry versus background.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, EmptyVoteError, FormatError
from .render import ContributionRecord, NEAR_PLANE, render
from .scene import CameraSet, GaussianScene, PinholeCamera

GDIF_MAGIC = b"GDIF"


@dataclass
class PruneConfig:
    tau: float = 0.5            # outside-fraction above which a Gaussian dies
    seen_epsilon: float = 1e-4  # min per-view contribution mass to count as seen
    weight_floor: float = 0.1   # min final weight for a Gaussian to be selected

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ContractError("tau must be in [0, 1]")


@dataclass
class SingleViewVote:
    raw: np.ndarray       # (n,) S_i: masked contribution sums
    w_max: float          # max over Gaussians in this view
    skipped: bool         # empty mask or zero w_max


@dataclass
class VoteAccumulator:
    n_gaussians: int
    sum_norm_contrib: np.ndarray  # (n,) sum over views of S_i / w_max
    n_seen: np.ndarray            # (n,) views where the Gaussian is visible
    weight: np.ndarray            # (n,) final normalized weight in [0, 1]
    n_views_used: int             # non-skipped views
    skipped_views: list = field(default_factory=list)
    n_out: np.ndarray | None = None  # filled by pruning


@dataclass
class RetentionStats:
    n_selected: int
    n_pruned: int
    retention: float
    degenerate: bool = False

    def report_line(self) -> str:
        return (f"N={self.n_selected} N_p={self.n_pruned} "
                f"R={self.retention:.6f}"
                + (" degenerate" if self.degenerate else ""))


@dataclass
class DiffSelection:
    indices: np.ndarray  # (k,) sorted Gaussian indices
    weights: np.ndarray  # (k,) matching weights in [0, 1]

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.indices.shape != self.weights.shape:
            raise ContractError("selection indices/weights length mismatch")

    def __len__(self):
        return len(self.indices)

    @staticmethod
    def empty() -> "DiffSelection":
        return DiffSelection(np.zeros(0, np.int64), np.zeros(0))


def vote_single_view(record: ContributionRecord,
                     mask: np.ndarray) -> SingleViewVote:
    """Eq.-5 weights for one view: S_i = sum of alpha*T over masked pixels."""
    if mask.shape != (record.height, record.width):
        raise ContractError(
            f"mask shape {mask.shape} vs view {record.height}x{record.width}")
    flat = mask.reshape(-1).astype(bool)
    if not flat.any():
        return SingleViewVote(np.zeros(record.n_gaussians), 0.0, True)
    inside = flat[record.pixel_indices]
    raw = np.bincount(record.gaussian_indices[inside],
                      weights=(record.alphas * record.transmittances)[inside],
                      minlength=record.n_gaussians)
    w_max = float(raw.max()) if len(raw) else 0.0
    return SingleViewVote(raw, w_max, skipped=(w_max <= 0.0))


def vote_multi_view(records: list[ContributionRecord],
                    masks: list[np.ndarray],
                    mode: str = "visibility_aware",
                    cfg: PruneConfig | None = None) -> VoteAccumulator:
    """Combine per-view votes; Eq. 6 (uniform) or Eq. 7 (visibility-aware).

    Skipped views (empty mask or zero view maximum) drop out of both the
    numerator and the denominator. A Gaussian counts as seen in a view
    when its total mask-independent contribution there reaches
    ``seen_epsilon``; Gaussians seen nowhere get weight 0.
    """
    if mode not in ("uniform", "visibility_aware"):
        raise ContractError(f"unknown vote mode {mode!r}")
    if len(records) != len(masks) or not records:
        raise ContractError("records and masks must align, one per view")
    cfg = cfg or PruneConfig()
    n = records[0].n_gaussians
    sum_norm = np.zeros(n)
    sum_norm_seen = np.zeros(n)
    n_seen = np.zeros(n, dtype=np.int64)
    skipped = []
    used = 0
    for rec, mask in zip(records, masks):
        if rec.n_gaussians != n:
            raise ContractError("records disagree on scene size")
        vote = vote_single_view(rec, mask)
        if vote.skipped:
            skipped.append(rec.view_id)
            continue
        used += 1
        seen = rec.total_contribution() >= cfg.seen_epsilon
        n_seen += seen
        norm = vote.raw / vote.w_max
        sum_norm += norm
        sum_norm_seen += np.where(seen, norm, 0.0)
    if used == 0:
        raise EmptyVoteError("every view was skipped")
    if mode == "uniform":
        weight = sum_norm / used
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            weight = np.where(n_seen > 0, sum_norm_seen / np.maximum(n_seen, 1),
                              0.0)
    return VoteAccumulator(n_gaussians=n, sum_norm_contrib=sum_norm,
                           n_seen=n_seen, weight=weight, n_views_used=used,
                           skipped_views=skipped)


def select_by_weight(acc: VoteAccumulator,
                     cfg: PruneConfig | None = None) -> DiffSelection:
    cfg = cfg or PruneConfig()
    idx = np.nonzero(acc.weight >= cfg.weight_floor)[0]
    return DiffSelection(idx, np.clip(acc.weight[idx], 0.0, 1.0))


def prune_multi_view(scene: GaussianScene, selection: DiffSelection,
                     cameras: CameraSet, masks: list[np.ndarray],
                     cfg: PruneConfig | None = None,
                     near: float = NEAR_PLANE
                     ) -> tuple[DiffSelection, RetentionStats]:
    """Eq.-8 pruning: drop selected Gaussians whose projected centers fall
    outside the 2D masks in more than tau of the views that see them.

    A center is "seen" by a view when it projects in front of the near
    plane and inside the image bounds.
    """
    cfg = cfg or PruneConfig()
    n_sel = len(selection)
    if n_sel == 0:
        return (DiffSelection.empty(),
                RetentionStats(0, 0, 0.0, degenerate=True))
    if len(cameras) != len(masks):
        raise ContractError("one mask per camera required")
    pos = scene.positions[selection.indices].astype(np.float64)
    n_seen = np.zeros(n_sel, dtype=np.int64)
    n_out = np.zeros(n_sel, dtype=np.int64)
    for cam, mask in zip(cameras, masks):
        if mask.shape != (cam.height, cam.width):
            raise ContractError("mask shape does not match camera")
        uv, z = cam.project(pos)
        col = np.floor(uv[:, 0]).astype(np.int64)
        row = np.floor(uv[:, 1]).astype(np.int64)
        seen = ((z > near) & (col >= 0) & (col < cam.width)
                & (row >= 0) & (row < cam.height))
        n_seen += seen
        inside = np.zeros(n_sel, dtype=bool)
        sidx = np.nonzero(seen)[0]
        inside[sidx] = mask[row[sidx], col[sidx]]
        n_out += seen & ~inside
    keep = ~(n_out > cfg.tau * n_seen)
    n_pruned = int(n_sel - keep.sum())
    stats = RetentionStats(n_sel, n_pruned, (n_sel - n_pruned) / n_sel)
    return DiffSelection(selection.indices[keep], selection.weights[keep]), stats


@dataclass
class DirectionAssignment:
    pre_family: int         # 1 or 2: which mask family is pre-change
    ambiguous: bool = False
    no_change: bool = False

    @property
    def post_family(self) -> int:
        return 2 if self.pre_family == 1 else 1


TIE_MARGIN = 0.05
SINGLE_FAMILY_RETENTION = 0.5


def resolve_direction(stats_m1: RetentionStats, stats_m2: RetentionStats
                      ) -> DirectionAssignment:
    """Label the mask family tracing pre-change geometry.

    Both families were voted against the pre-change scene: the family with
    the higher retention traces objects that exist there. When only one
    family produced votes at all, it is compared against an absolute
    retention threshold instead (background tracing of an insertion yields
    low retention, a real pre-change object high retention). Near-ties are
    flagged ambiguous and fall back to the larger selection.
    """
    deg1, deg2 = stats_m1.degenerate, stats_m2.degenerate
    if deg1 and deg2:
        return DirectionAssignment(pre_family=1, no_change=True)
    if deg1 or deg2:
        live, live_stats = (2, stats_m2) if deg1 else (1, stats_m1)
        if live_stats.retention >= SINGLE_FAMILY_RETENTION:
            return DirectionAssignment(pre_family=live)
        return DirectionAssignment(pre_family=(1 if live == 2 else 2))
    dr = stats_m1.retention - stats_m2.retention
    if abs(dr) < TIE_MARGIN:
        pre = 1 if stats_m1.n_selected >= stats_m2.n_selected else 2
        return DirectionAssignment(pre_family=pre, ambiguous=True)
    return DirectionAssignment(pre_family=1 if dr > 0 else 2)


def project_selection(scene: GaussianScene, selection: DiffSelection,
                      cam: PinholeCamera,
                      render_threshold: float = 0.5) -> np.ndarray:
    """Render the selection's membership through the compositing pipeline
    and threshold the accumulated visibility into a mask."""
    diff = np.zeros(len(scene), dtype=np.float32)
    diff[selection.indices] = 1.0
    # Reuse the color pathway with the membership as a gray payload; the
    # red channel accumulates sum(diff * alpha * T).
    payload = np.repeat(diff[:, None], 3, axis=1)
    ghost = GaussianScene(scene.positions, scene.scales, scene.rotations,
                          scene.opacities, payload)
    img = render(ghost, cam, background=(0.0, 0.0, 0.0))
    return img.pixels[:, :, 0] >= render_threshold


# ---------------------------------------------------------------------------
# GDIF selection file: magic, u32 count, then count x (u32 index, f32 weight)


def save_selection(sel: DiffSelection, path) -> None:
    with open(path, "wb") as f:
        f.write(GDIF_MAGIC)
        f.write(struct.pack("<I", len(sel)))
        rec = np.empty(len(sel), dtype=[("i", "<u4"), ("w", "<f4")])
        rec["i"] = sel.indices
        rec["w"] = sel.weights
        f.write(rec.tobytes())


def load_selection(path) -> DiffSelection:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8 or data[:4] != GDIF_MAGIC:
        raise FormatError(f"{path}: missing GDIF magic")
    count = struct.unpack_from("<I", data, 4)[0]
    if len(data) != 8 + count * 8:
        raise FormatError(f"{path}: truncated GDIF payload")
    rec = np.frombuffer(data, dtype=[("i", "<u4"), ("w", "<f4")], offset=8)
    return DiffSelection(rec["i"].astype(np.int64), rec["w"].astype(np.float64))
