"""Forward software rasterizer for Gaussian scenes with analytic gradients.

Gaussians are projected to screen-space ellipses (EWA-style: cov2d =
J Sigma_cam J^T + 0.3 I), globally sorted front-to-back by camera-space
depth (ties broken by index), and alpha-composited. The compositing loop
runs once per Gaussian over its 3-sigma pixel rectangle with vectorized
inner math, which reproduces exact per-pixel front-to-back order because
every pixel sees the global order restricted to the Gaussians covering it.

All math is float64; scenes stay in their float32 storage until projected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .images import ImageBuffer
from .scene import Gaussian3D, GaussianScene, PinholeCamera, quat_to_matrix

NEAR_PLANE = 0.01
COV2D_REG = 0.3          # px^2 added to the diagonal, standard splatting floor
ALPHA_CLAMP = 0.999
ALPHA_SKIP = 1.0 / 255.0
BBOX_SIGMA = 3.0


@dataclass
class Projected2D:
    gaussian_index: int
    mean2d: np.ndarray   # (2,) continuous pixel coords
    cov2d: np.ndarray    # (2, 2) symmetric, regularized
    depth: float         # camera-space z
    bbox: tuple[int, int, int, int]  # (x0, y0, x1, y1) slice bounds


@dataclass
class ContributionRecord:
    """Sparse per-view record of every composited (gaussian, pixel) term.

    Parallel arrays, grouped by Gaussian in compositing (front-to-back)
    order; ``alphas[k] * transmittances[k]`` is the Eq.-5 contribution of
    ``gaussian_indices[k]`` at flat pixel ``pixel_indices[k]``.
    """

    view_id: int
    width: int
    height: int
    n_gaussians: int
    gaussian_indices: np.ndarray  # (m,) int32
    pixel_indices: np.ndarray     # (m,) int32, row-major flat index
    alphas: np.ndarray            # (m,) float64
    transmittances: np.ndarray    # (m,) float64, T before compositing

    def total_contribution(self) -> np.ndarray:
        """Mask-independent per-Gaussian sum of alpha * T (visibility mass)."""
        return np.bincount(self.gaussian_indices,
                           weights=self.alphas * self.transmittances,
                           minlength=self.n_gaussians)


@dataclass
class RenderGradients:
    position: np.ndarray  # (n, 3)
    opacity: np.ndarray   # (n,)
    color: np.ndarray     # (n, 3)
    loss: float
    n_masked: int


@dataclass
class _ProjectedScene:
    """Culling + projection results for a whole scene, depth-sorted."""

    index: np.ndarray    # (m,) original Gaussian indices, compositing order
    mean2d: np.ndarray   # (m, 2)
    cov: np.ndarray      # (m, 3) upper triangle (a, b, c) of cov2d
    inv_cov: np.ndarray  # (m, 3) upper triangle of cov2d^-1
    depth: np.ndarray    # (m,)
    bbox: np.ndarray     # (m, 4) int: x0, y0, x1, y1
    opacity: np.ndarray  # (m,)
    color: np.ndarray    # (m, 3)
    cam_pos: np.ndarray  # (m, 3) camera-space positions
    sigma_cam: np.ndarray  # (m, 6) camera-frame covariance S00,S01,S02,S11,S12,S22


def _pixel_range(lo: np.ndarray, hi: np.ndarray, n: int):
    """Integer pixel index range whose centers fall inside [lo, hi]."""
    i0 = np.ceil(lo - 0.5).astype(np.int64)
    i1 = np.floor(hi - 0.5).astype(np.int64) + 1
    return np.clip(i0, 0, n), np.clip(i1, 0, n)


def project_scene(scene: GaussianScene, cam: PinholeCamera,
                  near: float = NEAR_PLANE) -> _ProjectedScene:
    n = len(scene)
    r_wc = quat_to_matrix(cam.rotation)
    pos = scene.positions.astype(np.float64)
    pc = pos @ r_wc.T + cam.translation
    z = pc[:, 2]
    vis = z > near
    if not np.any(vis):
        return _ProjectedScene(*(np.zeros((0,) + s, d) for s, d in [
            ((), np.int64), ((2,), np.float64), ((3,), np.float64),
            ((3,), np.float64), ((), np.float64), ((4,), np.int64),
            ((), np.float64), ((3,), np.float64), ((3,), np.float64),
            ((6,), np.float64)]))

    idx = np.nonzero(vis)[0]
    pc = pc[idx]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy

    # World covariance M M^T with M = R(q) diag(scale), then camera frame.
    rot = quat_to_matrix(scene.rotations[idx])
    m = rot * scene.scales[idx].astype(np.float64)[:, None, :]
    sigma_w = m @ np.transpose(m, (0, 2, 1))
    sigma_c = r_wc @ sigma_w @ r_wc.T

    s00, s01, s02 = sigma_c[:, 0, 0], sigma_c[:, 0, 1], sigma_c[:, 0, 2]
    s11, s12, s22 = sigma_c[:, 1, 1], sigma_c[:, 1, 2], sigma_c[:, 2, 2]
    z2, z3, z4 = z * z, z ** 3, z ** 4
    q11 = s00 / z2 - 2 * s02 * x / z3 + s22 * x * x / z4
    q12 = s01 / z2 - s12 * x / z3 - s02 * y / z3 + s22 * x * y / z4
    q22 = s11 / z2 - 2 * s12 * y / z3 + s22 * y * y / z4
    a = cam.fx ** 2 * q11 + COV2D_REG
    b = cam.fx * cam.fy * q12
    c = cam.fy ** 2 * q22 + COV2D_REG

    # 3-sigma radius from the largest eigenvalue of cov2d.
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum((0.5 * (a - c)) ** 2 + b * b, 0.0))
    radius = BBOX_SIGMA * np.sqrt(lam_max)

    x0, x1 = _pixel_range(u - radius, u + radius, cam.width)
    y0, y1 = _pixel_range(v - radius, v + radius, cam.height)
    on_image = (x0 < x1) & (y0 < y1)

    keep = np.nonzero(on_image)[0]
    idx, u, v, z = idx[keep], u[keep], v[keep], z[keep]
    a, b, c = a[keep], b[keep], c[keep]
    x0, x1, y0, y1 = x0[keep], x1[keep], y0[keep], y1[keep]
    pc = pc[keep]
    sig6 = np.stack([s00, s01, s02, s11, s12, s22], axis=1)[keep]

    det = a * c - b * b
    inv = np.stack([c / det, -b / det, a / det], axis=1)

    order = np.lexsort((idx, z))
    return _ProjectedScene(
        index=idx[order],
        mean2d=np.stack([u, v], axis=1)[order],
        cov=np.stack([a, b, c], axis=1)[order],
        inv_cov=inv[order],
        depth=z[order],
        bbox=np.stack([x0, y0, x1, y1], axis=1)[order],
        opacity=scene.opacities[idx[order]].astype(np.float64),
        color=scene.colors[idx[order]].astype(np.float64),
        cam_pos=pc[order],
        sigma_cam=sig6[order],
    )


def project_gaussian(g: Gaussian3D, cam: PinholeCamera,
                     near: float = NEAR_PLANE) -> Projected2D | None:
    """Project one Gaussian; None when depth-culled or off-image."""
    scene = GaussianScene(g.position[None], g.scale[None], g.rotation[None],
                          np.array([g.opacity]), g.color[None])
    ps = project_scene(scene, cam, near=near)
    if len(ps.index) == 0:
        return None
    a, b, c = ps.cov[0]
    return Projected2D(
        gaussian_index=0,
        mean2d=ps.mean2d[0],
        cov2d=np.array([[a, b], [b, c]]),
        depth=float(ps.depth[0]),
        bbox=tuple(int(t) for t in ps.bbox[0]),
    )


def _alpha_grid(ps: _ProjectedScene, k: int):
    """Alpha over Gaussian k's bbox; returns (alpha, ys slice, xs slice)."""
    x0, y0, x1, y1 = ps.bbox[k]
    u, v = ps.mean2d[k]
    ia, ib, ic = ps.inv_cov[k]
    dx = np.arange(x0, x1, dtype=np.float64) + 0.5 - u
    dy = np.arange(y0, y1, dtype=np.float64) + 0.5 - v
    q = (ia * dx * dx)[None, :] + (2.0 * ib) * dy[:, None] * dx[None, :] \
        + (ic * dy * dy)[:, None]
    alpha = ps.opacity[k] * np.exp(-0.5 * q)
    np.minimum(alpha, ALPHA_CLAMP, out=alpha)
    return alpha


def _rasterize(scene: GaussianScene, cam: PinholeCamera, background,
               collect_threshold: float | None = None,
               view_id: int = -1, near: float = NEAR_PLANE):
    h, w = cam.height, cam.width
    bg = np.asarray(background, dtype=np.float64)
    color_acc = np.zeros((h, w, 3))
    depth_acc = np.zeros((h, w))
    trans = np.ones((h, w))
    ps = project_scene(scene, cam, near=near)

    collect = collect_threshold is not None
    ent_g, ent_p, ent_a, ent_t = [], [], [], []

    for k in range(len(ps.index)):
        x0, y0, x1, y1 = ps.bbox[k]
        alpha = _alpha_grid(ps, k)
        live = alpha >= ALPHA_SKIP
        if not live.any():
            continue
        alpha = np.where(live, alpha, 0.0)
        t_before = trans[y0:y1, x0:x1]
        contrib = alpha * t_before
        color_acc[y0:y1, x0:x1] += contrib[:, :, None] * ps.color[k]
        depth_acc[y0:y1, x0:x1] += contrib * ps.depth[k]
        if collect:
            sel = live & (contrib >= collect_threshold)
            if sel.any():
                yy, xx = np.nonzero(sel)
                ent_g.append(np.full(len(yy), ps.index[k], dtype=np.int32))
                ent_p.append(((yy + y0) * w + (xx + x0)).astype(np.int32))
                ent_a.append(alpha[sel])
                ent_t.append(t_before[sel])
        trans[y0:y1, x0:x1] = t_before * (1.0 - alpha)

    pixels = color_acc + trans[:, :, None] * bg
    covered = 1.0 - trans
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(covered > 1e-9, depth_acc / covered, np.inf)
    img = ImageBuffer(w, h, pixels, trans, depth=depth)
    if not collect:
        return img, None

    cat = (lambda xs, dt: np.concatenate(xs) if xs else np.zeros(0, dt))
    rec = ContributionRecord(
        view_id=view_id, width=w, height=h, n_gaussians=len(scene),
        gaussian_indices=cat(ent_g, np.int32),
        pixel_indices=cat(ent_p, np.int32),
        alphas=cat(ent_a, np.float64),
        transmittances=cat(ent_t, np.float64),
    )
    return img, rec


def render(scene: GaussianScene, cam: PinholeCamera,
           background=(0.0, 0.0, 0.0), near: float = NEAR_PLANE) -> ImageBuffer:
    img, _ = _rasterize(scene, cam, background, near=near)
    return img


def render_with_contributions(
        scene: GaussianScene, cam: PinholeCamera,
        mask_threshold: float = 1e-5, background=(0.0, 0.0, 0.0),
        view_id: int = -1) -> tuple[ImageBuffer, ContributionRecord]:
    if mask_threshold < 0:
        raise ContractError("mask_threshold must be >= 0")
    img, rec = _rasterize(scene, cam, background,
                          collect_threshold=mask_threshold, view_id=view_id)
    return img, rec


# ---------------------------------------------------------------------------
# Masked photometric loss and its analytic gradients


def masked_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray,
                kind: str = "l2") -> float:
    """Photometric loss over masked pixels, averaged over pixels x channels."""
    m = mask.astype(bool)
    n = int(m.sum())
    if n == 0:
        return 0.0
    r = pred[m] - target[m]
    if kind == "l2":
        return float(np.sum(r * r) / (3 * n))
    if kind == "l1":
        return float(np.sum(np.abs(r)) / (3 * n))
    raise ContractError(f"unknown loss kind {kind!r}")


def _cov2d_position_jacobians(ps: _ProjectedScene, cam: PinholeCamera,
                              r_wc: np.ndarray):
    """d(mean2d)/d(mu_world) and d(cov2d)/d(mu_world) for every Gaussian.

    Returns du (m, 2, 3) and da, db, dc each (m, 3) for the upper-triangle
    cov2d entries; all already chained through pc = R mu + t.
    """
    x, y, z = ps.cam_pos[:, 0], ps.cam_pos[:, 1], ps.cam_pos[:, 2]
    s00, s01, s02, s11, s12, s22 = (ps.sigma_cam[:, i] for i in range(6))
    fx, fy = cam.fx, cam.fy
    z2, z3, z4, z5 = z ** 2, z ** 3, z ** 4, z ** 5

    j_proj = np.zeros((len(z), 2, 3))
    j_proj[:, 0, 0] = fx / z
    j_proj[:, 0, 2] = -fx * x / z2
    j_proj[:, 1, 1] = fy / z
    j_proj[:, 1, 2] = -fy * y / z2
    du = j_proj @ r_wc

    d_q11 = np.stack([
        -2 * s02 / z3 + 2 * s22 * x / z4,
        np.zeros_like(z),
        -2 * s00 / z3 + 6 * s02 * x / z4 - 4 * s22 * x * x / z5,
    ], axis=1)
    d_q12 = np.stack([
        -s12 / z3 + s22 * y / z4,
        -s02 / z3 + s22 * x / z4,
        -2 * s01 / z3 + 3 * s12 * x / z4 + 3 * s02 * y / z4
        - 4 * s22 * x * y / z5,
    ], axis=1)
    d_q22 = np.stack([
        np.zeros_like(z),
        -2 * s12 / z3 + 2 * s22 * y / z4,
        -2 * s11 / z3 + 6 * s12 * y / z4 - 4 * s22 * y * y / z5,
    ], axis=1)
    da = (fx * fx) * d_q11 @ r_wc
    db = (fx * fy) * d_q12 @ r_wc
    dc = (fy * fy) * d_q22 @ r_wc
    return du, da, db, dc


def render_gradients(scene: GaussianScene, cam: PinholeCamera,
                     target: ImageBuffer | np.ndarray, pixel_mask: np.ndarray,
                     active, background=(0.0, 0.0, 0.0),
                     kind: str = "l2") -> RenderGradients:
    """Exact gradients of the masked photometric loss.

    Differentiates the actual compositing function (including the alpha
    clamp and the 1/255 skip as hard gates) w.r.t. position, opacity and
    color. Gaussians outside ``active`` never receive gradient but still
    participate in compositing. Computation is confined to the bounding
    box of the mask; pixels outside the mask contribute exactly zero.
    """
    tgt = target.pixels if isinstance(target, ImageBuffer) else np.asarray(target)
    if tgt.shape != (cam.height, cam.width, 3):
        raise ContractError(f"target shape {tgt.shape} does not match camera")
    if pixel_mask.shape != (cam.height, cam.width):
        raise ContractError("pixel_mask shape does not match camera")
    n = len(scene)
    grads = RenderGradients(np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)),
                            0.0, int(pixel_mask.sum()))
    active_flags = np.zeros(n, dtype=bool)
    ai = np.fromiter(active, dtype=np.int64) if len(active) else np.zeros(0, np.int64)
    if len(ai) and (ai.min() < 0 or ai.max() >= n):
        raise ContractError("active indices outside scene")
    active_flags[ai] = True

    mask = pixel_mask.astype(bool)
    if not mask.any():
        return grads
    ys, xs = np.nonzero(mask)
    cy0, cy1 = int(ys.min()), int(ys.max()) + 1
    cx0, cx1 = int(xs.min()), int(xs.max()) + 1
    ch, cw = cy1 - cy0, cx1 - cx0
    mask_c = mask[cy0:cy1, cx0:cx1]
    tgt_c = np.asarray(tgt, np.float64)[cy0:cy1, cx0:cx1]
    bg = np.asarray(background, dtype=np.float64)

    ps = project_scene(scene, cam)
    r_wc = quat_to_matrix(cam.rotation)
    du, da, db, dc = _cov2d_position_jacobians(ps, cam, r_wc)

    # Forward pass over the crop, keeping per-Gaussian footprints.
    color_acc = np.zeros((ch, cw, 3))
    trans = np.ones((ch, cw))
    entries = []  # (k, slice bounds in crop coords, alpha, t_before)
    for k in range(len(ps.index)):
        x0, y0, x1, y1 = ps.bbox[k]
        ex0, ex1 = max(x0, cx0), min(x1, cx1)
        ey0, ey1 = max(y0, cy0), min(y1, cy1)
        if ex0 >= ex1 or ey0 >= ey1:
            continue
        u, v = ps.mean2d[k]
        ia, ib, ic = ps.inv_cov[k]
        dxv = np.arange(ex0, ex1, dtype=np.float64) + 0.5 - u
        dyv = np.arange(ey0, ey1, dtype=np.float64) + 0.5 - v
        q = (ia * dxv * dxv)[None, :] + (2.0 * ib) * dyv[:, None] * dxv[None, :] \
            + (ic * dyv * dyv)[:, None]
        alpha = ps.opacity[k] * np.exp(-0.5 * q)
        clamped = alpha > ALPHA_CLAMP
        np.minimum(alpha, ALPHA_CLAMP, out=alpha)
        live = alpha >= ALPHA_SKIP
        if not live.any():
            continue
        alpha = np.where(live, alpha, 0.0)
        sy, sx = ey0 - cy0, ex0 - cx0
        sl = (slice(sy, sy + ey1 - ey0), slice(sx, sx + ex1 - ex0))
        t_before = trans[sl].copy()
        color_acc[sl] += (alpha * t_before)[:, :, None] * ps.color[k]
        trans[sl] = t_before * (1.0 - alpha)
        entries.append((k, sl, alpha, t_before, clamped, (dxv, dyv)))

    pred = color_acc + trans[:, :, None] * bg
    n_masked = int(mask_c.sum())
    resid = pred - tgt_c
    if kind == "l2":
        loss = float(np.sum((resid[mask_c]) ** 2) / (3 * n_masked))
        g = np.where(mask_c[:, :, None], 2.0 * resid / (3 * n_masked), 0.0)
    elif kind == "l1":
        loss = float(np.sum(np.abs(resid[mask_c])) / (3 * n_masked))
        g = np.where(mask_c[:, :, None], np.sign(resid) / (3 * n_masked), 0.0)
    else:
        raise ContractError(f"unknown loss kind {kind!r}")
    grads.loss = loss
    grads.n_masked = n_masked

    # Reverse scan: B holds the composited color strictly behind the
    # current Gaussian (background included).
    behind = np.broadcast_to(bg, (ch, cw, 3)).copy()
    for k, sl, alpha, t_before, clamped, dxy in reversed(entries):
        gi = int(ps.index[k])
        gpix = g[sl]
        col = ps.color[k]
        if active_flags[gi]:
            dl_dalpha = np.einsum("yxc,c->yx", gpix, col) \
                - np.einsum("yxc,yxc->yx", gpix, behind[sl])
            dl_dalpha *= t_before
            w_alpha = dl_dalpha * alpha       # dL/dalpha * alpha, reused below
            live_grad = np.where(clamped, 0.0, dl_dalpha)

            # Opacity: alpha = o * G, dalpha/do = G = alpha / o.
            o = ps.opacity[k]
            if o > 0:
                grads.opacity[gi] += float(
                    np.sum(live_grad * alpha) / o)
            # Color: dC/dc = alpha * T at each pixel.
            grads.color[gi] += np.einsum(
                "yxc,yx->c", gpix, alpha * t_before)
            # Position: through mean2d and through cov2d.
            ia, ib, ic = ps.inv_cov[k]
            dxv, dyv = dxy
            mdx = (ia * dxv)[None, :] + ib * dyv[:, None]
            mdy = (ib * dxv)[None, :] + ic * dyv[:, None]
            w = np.where(clamped, 0.0, -0.5 * w_alpha)
            term = np.zeros(3)
            # dq/du = -2 (mdx, mdy); du/dmu = du[k]
            su = -2.0 * np.array([np.sum(w * mdx), np.sum(w * mdy)])
            term += su @ du[k]
            # dq/dA = -(Md)(Md)^T, symmetric off-diagonal counted twice.
            term += -np.sum(w * mdx * mdx) * da[k]
            term += -2.0 * np.sum(w * mdx * mdy) * db[k]
            term += -np.sum(w * mdy * mdy) * dc[k]
            grads.position[gi] += term
        bsl = behind[sl]
        behind[sl] = alpha[:, :, None] * col + (1.0 - alpha[:, :, None]) * bsl
    return grads
