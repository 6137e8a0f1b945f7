"""Controlled synthetic scenes, camera trajectories, change scripts, and
detector-independent ground-truth change masks.

Scenes are Gaussian-native (room box of flat slabs plus solid ellipsoid
object clusters with distinct colors), so the pre-change model is exact by
construction; an optional jitter flag reintroduces fitting-style noise.
Every artifact is deterministic per seed.
"""

from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, DataError, PlacementError
from .images import save_fimg, save_mask_pgm, save_png
from .render import render
from .scene import (CameraSet, GaussianScene, PinholeCamera, matrix_to_quat,
                    quat_multiply, save_cameras, save_scene)

WORLD_UP = np.array([0.0, 0.0, 1.0])
GT_VISIBILITY = 0.5          # silhouette threshold, matches diff3d default
DEFAULT_BACKGROUND = (0.02, 0.02, 0.03)


@dataclass
class ObjectTable:
    """Maps object ids to index ranges in the scene's Gaussian list."""

    room: tuple[int, int]
    objects: dict[int, tuple[int, int]]
    radii: dict[int, float]  # bounding radius incl. splat extent

    def center(self, scene: GaussianScene, oid: int) -> np.ndarray:
        s, e = self.objects[oid]
        return scene.positions[s:e].astype(np.float64).mean(axis=0)

    def indices(self, oid: int) -> np.ndarray:
        s, e = self.objects[oid]
        return np.arange(s, e, dtype=np.int64)


@dataclass
class ChangeOp:
    kind: str  # insert | remove | translate | rotate
    object_id: int
    delta: np.ndarray | None = None  # translate displacement
    axis: np.ndarray | None = None   # rotate axis (unit)
    angle: float = 0.0               # rotate angle, radians


@dataclass
class ChangeScript:
    ops: list[ChangeOp]
    seed: int = 0

    def validate(self, table: ObjectTable) -> None:
        seen = set()
        for op in self.ops:
            if op.object_id in seen:
                raise DataError(f"object {op.object_id} changed twice")
            seen.add(op.object_id)
            if op.kind != "insert" and op.object_id not in table.objects:
                raise DataError(f"object {op.object_id} not in scene")
            if op.kind == "insert" and op.object_id in table.objects:
                raise DataError(f"insert id {op.object_id} already exists")


@dataclass
class SceneSpec:
    n_objects: int = 3
    room_extent: float = 8.0
    gaussians_per_object: int = 120
    seed: int = 0


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _slab_grid(center, u_axis, v_axis, nu, nv, thickness_axis, size_u, size_v,
               color, rng):
    """Grid of flattened Gaussians forming one wall/floor slab."""
    us = (np.arange(nu) + 0.5) / nu - 0.5
    vs = (np.arange(nv) + 0.5) / nv - 0.5
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    pos = (center[None, :] + uu.reshape(-1, 1) * u_axis * size_u
           + vv.reshape(-1, 1) * v_axis * size_v)
    n = len(pos)
    su, sv = 0.62 * size_u / nu, 0.62 * size_v / nv
    st = 0.02 * min(size_u, size_v) / max(nu, nv) * 4
    rot = np.stack([u_axis, v_axis, thickness_axis], axis=1)
    quat = matrix_to_quat(rot)
    scales = np.tile([su, sv, st], (n, 1))
    colors = np.clip(color[None, :] + rng.normal(0, 0.015, (n, 3)), 0, 1)
    return GaussianScene(
        positions=pos, scales=scales,
        rotations=np.tile(quat, (n, 1)),
        opacities=np.full(n, 0.96),
        colors=colors)


def _object_cluster(center, semi_axes, yaw, color, n, rng):
    """Solid ellipsoid cluster of n Gaussians."""
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = rng.uniform(0.0, 1.0, n) ** (1.0 / 3.0)
    pts = u * r[:, None] * semi_axes[None, :]
    cy, sy = np.cos(yaw), np.sin(yaw)
    rot_z = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1.0]])
    pts = pts @ rot_z.T + center
    mean_ax = float(np.mean(semi_axes))
    sg = 0.48 * mean_ax / n ** (1.0 / 3.0) * rng.uniform(0.8, 1.3, n)
    quat = matrix_to_quat(rot_z)
    colors = np.clip(color[None, :] + rng.normal(0, 0.03, (n, 3)), 0, 1)
    return GaussianScene(
        positions=pts,
        scales=np.repeat(sg[:, None], 3, axis=1),
        rotations=np.tile(quat, (n, 1)),
        opacities=np.clip(rng.uniform(0.82, 0.95, n), 0, 0.98),
        colors=colors)


def _object_geometry(rng, room_extent):
    """Random elongated semi-axes and the bounding radius they imply."""
    base = room_extent * rng.uniform(0.055, 0.075)
    semi = base * np.array([1.9, 0.75, 1.0]) * rng.uniform(0.9, 1.1, 3)
    return semi, float(semi.max()) * 1.35


def _place(rng, room_extent, radius, others, max_tries=60):
    """Find a free floor position; others is a list of (center, radius)."""
    lim = 0.30 * room_extent
    for _ in range(max_tries):
        xy = rng.uniform(-lim, lim, 2)
        ok = all(np.linalg.norm(xy - c[:2]) > radius + r * 1.05
                 for c, r in others)
        if ok:
            return xy
    raise PlacementError("no free placement found")


def generate_scene(spec: SceneSpec) -> tuple[GaussianScene, ObjectTable]:
    """Room box plus n distinct-color object clusters; deterministic per seed."""
    if spec.n_objects < 1:
        raise ContractError("need at least one object")
    rng = np.random.default_rng(spec.seed)
    e = spec.room_extent
    half, wall_h = e / 2.0, 0.55 * e
    ex, ey, ez = np.eye(3)

    floor_col = np.array([0.42, 0.40, 0.38])
    wall_col = np.array([0.62, 0.63, 0.60])
    parts = [
        _slab_grid(np.array([0, 0, 0.0]), ex, ey, 14, 14, ez, e, e,
                   floor_col, rng),
        _slab_grid(np.array([0, half, wall_h / 2]), ex, ez, 14, 8, ey,
                   e, wall_h, wall_col, rng),
        _slab_grid(np.array([0, -half, wall_h / 2]), ex, ez, 14, 8, ey,
                   e, wall_h, wall_col * 0.96, rng),
        _slab_grid(np.array([half, 0, wall_h / 2]), ey, ez, 14, 8, ex,
                   e, wall_h, wall_col * 1.04, rng),
        _slab_grid(np.array([-half, 0, wall_h / 2]), ey, ez, 14, 8, ex,
                   e, wall_h, wall_col * 0.92, rng),
    ]
    room = GaussianScene.concatenate(parts)

    objects = {}
    radii = {}
    placed = []
    clusters = []
    cursor = len(room)
    for k in range(spec.n_objects):
        semi, bound = _object_geometry(rng, e)
        xy = _place(rng, e, bound, placed)
        center = np.array([xy[0], xy[1], semi[2]])
        color = _hsv(0.05 + k * 0.618034, 0.78, 0.86)
        yaw = rng.uniform(0, 2 * np.pi)
        cl = _object_cluster(center, semi, yaw, color,
                             spec.gaussians_per_object, rng)
        clusters.append(cl)
        objects[k] = (cursor, cursor + len(cl))
        radii[k] = bound
        placed.append((center, bound))
        cursor += len(cl)

    scene = GaussianScene.concatenate([room] + clusters)
    table = ObjectTable(room=(0, len(room)), objects=objects, radii=radii)
    _check_layout(scene, table)
    return scene, table


def _check_layout(scene: GaussianScene, table: ObjectTable) -> None:
    """Objects must not interpenetrate (centers farther than summed radii)."""
    ids = sorted(table.objects)
    for i, a in enumerate(ids):
        ca = table.center(scene, a)
        for b in ids[i + 1:]:
            cb = table.center(scene, b)
            if np.linalg.norm(ca - cb) <= 0.85 * (table.radii[a] + table.radii[b]):
                raise PlacementError(f"objects {a} and {b} interpenetrate")


def _rotation_about(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, np.float64)
    axis = axis / np.linalg.norm(axis)
    c, s = np.cos(angle), np.sin(angle)
    k = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) * c + s * k + (1 - c) * np.outer(axis, axis)


def apply_changes(scene: GaussianScene, table: ObjectTable,
                  script: ChangeScript
                  ) -> tuple[GaussianScene, ObjectTable]:
    """Execute a change script, producing the post scene and its table."""
    script.validate(table)
    rng = np.random.default_rng(script.seed ^ 0x9E3779B9)
    pos = scene.positions.astype(np.float64).copy()
    rot = scene.rotations.astype(np.float64).copy()

    removed = set()
    new_centers = {}
    for op in script.ops:
        if op.kind == "remove":
            removed.add(op.object_id)
        elif op.kind == "translate":
            s, e = table.objects[op.object_id]
            pos[s:e] += np.asarray(op.delta, np.float64)
            new_centers[op.object_id] = pos[s:e].mean(axis=0)
        elif op.kind == "rotate":
            s, e = table.objects[op.object_id]
            c = pos[s:e].mean(axis=0)
            rm = _rotation_about(op.axis, op.angle)
            pos[s:e] = (pos[s:e] - c) @ rm.T + c
            qr = matrix_to_quat(rm)
            rot[s:e] = quat_multiply(qr, rot[s:e])
            norms = np.linalg.norm(rot[s:e], axis=1, keepdims=True)
            rot[s:e] /= norms
        elif op.kind == "insert":
            pass  # handled after existing objects are final
        else:
            raise DataError(f"unknown change kind {op.kind!r}")

    # Overlap check for moved objects against everything still present.
    others = [(table.center(scene, oid), table.radii[oid])
              for oid in table.objects
              if oid not in removed and oid not in new_centers]
    for oid, c in new_centers.items():
        r = table.radii[oid]
        if any(np.linalg.norm(c[:2] - oc[:2]) <= r + orr
               for oc, orr in others):
            raise PlacementError(f"object {oid} overlaps after move")
        others.append((c, r))

    keep_ids = [oid for oid in sorted(table.objects) if oid not in removed]
    room_s, room_e = table.room
    parts = [GaussianScene(pos[room_s:room_e], scene.scales[room_s:room_e],
                           rot[room_s:room_e], scene.opacities[room_s:room_e],
                           scene.colors[room_s:room_e])]
    new_objects = {}
    new_radii = {}
    cursor = room_e - room_s
    for oid in keep_ids:
        s, e = table.objects[oid]
        parts.append(GaussianScene(pos[s:e], scene.scales[s:e], rot[s:e],
                                   scene.opacities[s:e], scene.colors[s:e]))
        new_objects[oid] = (cursor, cursor + (e - s))
        new_radii[oid] = table.radii[oid]
        cursor += e - s

    room_extent = 2.0 * float(np.abs(
        scene.positions[room_s:room_e, :2]).max())
    n_per = (next(iter(table.objects.values()))[1]
             - next(iter(table.objects.values()))[0]) if table.objects else 120
    for op in script.ops:
        if op.kind != "insert":
            continue
        semi, bound = _object_geometry(rng, room_extent)
        occupied = [(np.array([*_mid(parts, new_objects[oid]), 0.0]),
                     new_radii[oid]) for oid in new_objects]
        xy = _place(rng, room_extent, bound, occupied, max_tries=10)
        center = np.array([xy[0], xy[1], semi[2]])
        color = _hsv(0.05 + op.object_id * 0.618034 + 0.31, 0.8, 0.85)
        cl = _object_cluster(center, semi, rng.uniform(0, 2 * np.pi), color,
                             n_per, rng)
        parts.append(cl)
        new_objects[op.object_id] = (cursor, cursor + len(cl))
        new_radii[op.object_id] = bound
        cursor += len(cl)

    post = GaussianScene.concatenate(parts)
    post_table = ObjectTable(room=(0, room_e - room_s), objects=new_objects,
                             radii=new_radii)
    _check_layout(post, post_table)
    return post, post_table


def _mid(parts, rng_pair):
    cat = GaussianScene.concatenate(parts)
    s, e = rng_pair
    return cat.positions[s:e, :2].astype(np.float64).mean(axis=0)


# ---------------------------------------------------------------------------
# Trajectories


@dataclass
class TrajectorySpec:
    n_pre: int = 64
    n_post: int = 8
    n_test: int = 4
    style: str = "orbit"  # orbit | walkthrough
    seed: int = 0


@dataclass
class CameraIntrinsics:
    width: int = 128
    height: int = 128
    focal: float = 110.0


def look_at_quaternion(position: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World-to-camera quaternion for a +z-forward, y-down camera."""
    f = np.asarray(target, np.float64) - position
    f = f / np.linalg.norm(f)
    down = -WORLD_UP
    right = np.cross(down, f)
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # looking straight up/down; pick an arbitrary right
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down_c = np.cross(f, right)
    r_wc = np.stack([right, down_c, f], axis=0)
    return matrix_to_quat(r_wc)


def _camera_at(cam_id, position, target, intr: CameraIntrinsics
               ) -> PinholeCamera:
    q = look_at_quaternion(position, target)
    from .scene import quat_to_matrix
    t = -quat_to_matrix(q) @ position
    return PinholeCamera(id=cam_id, width=intr.width, height=intr.height,
                         fx=intr.focal, fy=intr.focal,
                         cx=intr.width / 2.0, cy=intr.height / 2.0,
                         rotation=q, translation=t)


def _orbit_ring(n, phase, room_extent, centroid, intr, id_base):
    radius = 0.40 * room_extent
    height = 0.34 * room_extent
    cams = []
    for k in range(n):
        ang = phase + 2 * np.pi * k / n
        p = np.array([radius * np.cos(ang), radius * np.sin(ang), height])
        cams.append(_camera_at(id_base + k, p, centroid, intr))
    return cams


def _walkthrough(n, rng, room_extent, centroid, intr, id_base):
    lim = 0.38 * room_extent
    n_way = max(4, n // 8)
    way = np.column_stack([
        rng.uniform(-lim, lim, n_way),
        rng.uniform(-lim, lim, n_way),
        rng.uniform(0.25, 0.42, n_way) * room_extent,
    ])
    # Resample the polyline to n points, then smooth.
    t = np.linspace(0, n_way - 1, n)
    i0 = np.clip(np.floor(t).astype(int), 0, n_way - 2)
    frac = (t - i0)[:, None]
    path = way[i0] * (1 - frac) + way[i0 + 1] * frac
    k = max(1, n // 16)
    kernel = np.ones(2 * k + 1) / (2 * k + 1)
    for c in range(3):
        path[:, c] = np.convolve(np.pad(path[:, c], k, mode="edge"),
                                 kernel, mode="valid")
    cams = []
    for j in range(n):
        ahead = path[min(j + max(1, n // 10), n - 1)]
        target = 0.45 * ahead + 0.55 * centroid
        cams.append(_camera_at(id_base + j, path[j], target, intr))
    return cams


def make_trajectories(spec: TrajectorySpec, room_extent: float,
                      centroid: np.ndarray,
                      intrinsics: CameraIntrinsics | None = None
                      ) -> tuple[CameraSet, CameraSet, CameraSet]:
    """Dense pre, sparse post, and test camera sets around the scene."""
    if spec.n_pre < 4 * spec.n_post:
        raise ContractError("need n_pre >= 4 * n_post")
    intr = intrinsics or CameraIntrinsics()
    rng = np.random.default_rng(spec.seed ^ 0xCA11)
    if spec.style == "orbit":
        ph = rng.uniform(0, 2 * np.pi, 3)
        pre = _orbit_ring(spec.n_pre, ph[0], room_extent, centroid, intr, 0)
        post = _orbit_ring(spec.n_post, ph[1], room_extent, centroid, intr,
                           1000)
        test = _orbit_ring(spec.n_test, ph[2], room_extent, centroid, intr,
                           2000)
    elif spec.style == "walkthrough":
        pre = _walkthrough(spec.n_pre, rng, room_extent, centroid, intr, 0)
        post = _walkthrough(spec.n_post, rng, room_extent, centroid, intr,
                            1000)
        test = _walkthrough(spec.n_test, rng, room_extent, centroid, intr,
                            2000)
    else:
        raise ContractError(f"unknown trajectory style {spec.style!r}")
    return (CameraSet(pre, "pre"), CameraSet(post, "post"),
            CameraSet(test, "test"))


def cameras_see_point(cams: CameraSet, point: np.ndarray,
                      margin: float = 0.0) -> bool:
    for cam in cams:
        uv, z = cam.project(point[None])
        if not (z[0] > 0 and margin <= uv[0, 0] < cam.width - margin
                and margin <= uv[0, 1] < cam.height - margin):
            return False
    return True


# ---------------------------------------------------------------------------
# Ground-truth masks


def membership_mask(scene: GaussianScene, indices: np.ndarray,
                    cam: PinholeCamera,
                    threshold: float = GT_VISIBILITY) -> np.ndarray:
    """Silhouette of a Gaussian subset: accumulated alpha-visibility of the
    members, thresholded. Independent of any detector state."""
    member = np.zeros(len(scene), dtype=np.float32)
    member[np.asarray(indices, np.int64)] = 1.0
    payload = np.repeat(member[:, None], 3, axis=1)
    ghost = GaussianScene(scene.positions, scene.scales, scene.rotations,
                          scene.opacities, payload)
    img = render(ghost, cam, background=(0.0, 0.0, 0.0))
    return img.pixels[:, :, 0] >= threshold


def changed_object_ids(script: ChangeScript) -> tuple[list[int], list[int]]:
    """Object ids changed in the pre state and in the post state."""
    pre_ids = [op.object_id for op in script.ops
               if op.kind in ("remove", "translate", "rotate")]
    post_ids = [op.object_id for op in script.ops
                if op.kind in ("insert", "translate", "rotate")]
    return pre_ids, post_ids


def render_gt_masks(pre_scene: GaussianScene, post_scene: GaussianScene,
                    pre_table: ObjectTable, post_table: ObjectTable,
                    script: ChangeScript, cams: CameraSet
                    ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-view (pre-state, post-state) silhouettes of the changed objects."""
    pre_ids, post_ids = changed_object_ids(script)
    pre_idx = (np.concatenate([pre_table.indices(i) for i in pre_ids])
               if pre_ids else np.zeros(0, np.int64))
    post_idx = (np.concatenate([post_table.indices(i) for i in post_ids])
                if post_ids else np.zeros(0, np.int64))
    out = []
    for cam in cams:
        pre_mask = (membership_mask(pre_scene, pre_idx, cam) if len(pre_idx)
                    else np.zeros((cam.height, cam.width), bool))
        post_mask = (membership_mask(post_scene, post_idx, cam)
                     if len(post_idx)
                     else np.zeros((cam.height, cam.width), bool))
        out.append((pre_mask, post_mask))
    return out


# ---------------------------------------------------------------------------
# Change-script construction and bundles


def make_change_script(scene: GaussianScene, table: ObjectTable, kind: str,
                       n_changed: int, seed: int,
                       room_extent: float) -> ChangeScript:
    """Script with ``n_changed`` ops of the requested family.

    ``inout`` alternates remove/insert across the changed objects (and
    across seeds for single-object scripts); ``mixed`` samples a kind per
    object.
    """
    rng = np.random.default_rng(seed ^ 0x5C417)
    ids = sorted(table.objects)
    if n_changed > len(ids) and kind not in ("insert", "inout"):
        raise ContractError("more changes requested than objects available")
    chosen = list(rng.permutation(ids)[:min(n_changed, len(ids))])
    next_id = max(ids) + 1 if ids else 0
    ops = []
    for k in range(n_changed):
        if kind == "mixed":
            op_kind = ["remove", "insert", "translate", "rotate"][
                int(rng.integers(4))]
        elif kind == "inout":
            op_kind = "remove" if (k + seed) % 2 == 0 else "insert"
        else:
            op_kind = kind
        if op_kind == "insert":
            ops.append(ChangeOp("insert", next_id))
            next_id += 1
            continue
        oid = chosen.pop() if chosen else None
        if oid is None:  # ran out of objects; fall back to insertion
            ops.append(ChangeOp("insert", next_id))
            next_id += 1
            continue
        if op_kind == "remove":
            ops.append(ChangeOp("remove", oid))
        elif op_kind == "translate":
            ang = rng.uniform(0, 2 * np.pi)
            mag = room_extent * rng.uniform(0.22, 0.34)
            ops.append(ChangeOp("translate", oid,
                                delta=np.array([mag * np.cos(ang),
                                                mag * np.sin(ang), 0.0])))
        elif op_kind == "rotate":
            tilt = rng.uniform(-0.25, 0.25, 2)
            axis = np.array([tilt[0], tilt[1], 1.0])
            axis /= np.linalg.norm(axis)
            angle = rng.uniform(np.pi / 3, 2 * np.pi / 3)
            if rng.uniform() < 0.5:
                angle = -angle
            ops.append(ChangeOp("rotate", oid, axis=axis, angle=angle))
    return ChangeScript(ops=ops, seed=seed)


def apply_jitter(scene: GaussianScene, pos_sigma: float, opacity_sigma: float,
                 seed: int) -> GaussianScene:
    """Fitting-noise stand-in: perturb positions and opacities."""
    if pos_sigma == 0 and opacity_sigma == 0:
        return scene
    rng = np.random.default_rng(seed ^ 0x71773E)
    pos = scene.positions.astype(np.float64) + rng.normal(
        0, pos_sigma, scene.positions.shape)
    opac = np.clip(scene.opacities.astype(np.float64) + rng.normal(
        0, opacity_sigma, len(scene)), 0.01, 0.98)
    return GaussianScene(pos, scene.scales, scene.rotations, opac,
                         scene.colors, scene.diff_channel)


@dataclass
class BundleSpec:
    n_objects: int = 3
    room_extent: float = 8.0
    gaussians_per_object: int = 120
    resolution: int = 128
    focal: float = 110.0
    n_pre: int = 64
    n_post: int = 8
    n_test: int = 4
    style: str = "orbit"
    change_kind: str = "translate"
    n_changed: int = 1
    seed: int = 0
    jitter_position: float = 0.0
    jitter_opacity: float = 0.0


@dataclass
class SynthBundle:
    spec: BundleSpec
    pre_scene: GaussianScene             # the detector's input (jittered)
    pre_scene_clean: GaussianScene
    post_scene: GaussianScene
    pre_table: ObjectTable
    post_table: ObjectTable
    script: ChangeScript
    pre_cams: CameraSet
    post_cams: CameraSet
    test_cams: CameraSet
    post_images: list[np.ndarray]
    test_images: list[np.ndarray]
    gt_post: list[tuple[np.ndarray, np.ndarray]]
    gt_test: list[tuple[np.ndarray, np.ndarray]]
    background: tuple = DEFAULT_BACKGROUND


def make_bundle(spec: BundleSpec) -> SynthBundle:
    """Generate a full change-detection bundle, retrying placements."""
    last_err = None
    for attempt in range(10):
        try:
            return _make_bundle_once(replace(spec, seed=spec.seed),
                                     salt=attempt)
        except PlacementError as e:
            last_err = e
    raise PlacementError(f"bundle generation failed after 10 tries: {last_err}")


def _make_bundle_once(spec: BundleSpec, salt: int) -> SynthBundle:
    scene, table = generate_scene(SceneSpec(
        n_objects=spec.n_objects, room_extent=spec.room_extent,
        gaussians_per_object=spec.gaussians_per_object,
        seed=spec.seed * 101 + salt))
    script = make_change_script(scene, table, spec.change_kind,
                                spec.n_changed, spec.seed * 101 + salt,
                                spec.room_extent)
    post_scene, post_table = apply_changes(scene, table, script)

    intr = CameraIntrinsics(spec.resolution, spec.resolution, spec.focal)
    centroid = np.array([0.0, 0.0, 0.12 * spec.room_extent])
    pre_cams, post_cams, test_cams = make_trajectories(
        TrajectorySpec(spec.n_pre, spec.n_post, spec.n_test, spec.style,
                       spec.seed * 101 + salt),
        spec.room_extent, centroid, intr)

    # Every changed region must be visible from at least one post camera.
    pre_ids, post_ids = changed_object_ids(script)
    for oid in pre_ids:
        c = table.center(scene, oid)
        if not any(cameras_see_point(CameraSet([cam], "post"), c)
                   for cam in post_cams):
            raise PlacementError(f"pre-state object {oid} unseen by post cams")
    for oid in post_ids:
        c = post_table.center(post_scene, oid)
        if not any(cameras_see_point(CameraSet([cam], "post"), c)
                   for cam in post_cams):
            raise PlacementError(f"post-state object {oid} unseen by post cams")

    pre_jittered = apply_jitter(scene, spec.jitter_position,
                                spec.jitter_opacity, spec.seed * 101 + salt)
    bg = DEFAULT_BACKGROUND
    post_images = [render(post_scene, cam, bg).pixels for cam in post_cams]
    test_images = [render(post_scene, cam, bg).pixels for cam in test_cams]
    gt_post = render_gt_masks(scene, post_scene, table, post_table, script,
                              post_cams)
    gt_test = render_gt_masks(scene, post_scene, table, post_table, script,
                              test_cams)
    return SynthBundle(spec=spec, pre_scene=pre_jittered,
                       pre_scene_clean=scene, post_scene=post_scene,
                       pre_table=table, post_table=post_table, script=script,
                       pre_cams=pre_cams, post_cams=post_cams,
                       test_cams=test_cams, post_images=post_images,
                       test_images=test_images, gt_post=gt_post,
                       gt_test=gt_test, background=bg)


# ---------------------------------------------------------------------------
# Bundle directory io


def save_script(script: ChangeScript, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# seed {script.seed}\n")
        for op in script.ops:
            if op.kind == "remove":
                f.write(f"remove {op.object_id}\n")
            elif op.kind == "insert":
                f.write(f"insert {op.object_id}\n")
            elif op.kind == "translate":
                d = op.delta
                f.write(f"translate {op.object_id} "
                        f"{d[0]!r} {d[1]!r} {d[2]!r}\n")
            elif op.kind == "rotate":
                a = op.axis
                f.write(f"rotate {op.object_id} "
                        f"{a[0]!r} {a[1]!r} {a[2]!r} {op.angle!r}\n")


def load_script(path) -> ChangeScript:
    ops = []
    seed = 0
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            s = line.strip()
            if s.startswith("# seed"):
                seed = int(s.split()[2])
                continue
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            kind, oid = parts[0], int(parts[1])
            if kind in ("remove", "insert"):
                ops.append(ChangeOp(kind, oid))
            elif kind == "translate":
                ops.append(ChangeOp(kind, oid,
                                    delta=np.array([float(x)
                                                    for x in parts[2:5]])))
            elif kind == "rotate":
                ops.append(ChangeOp(kind, oid,
                                    axis=np.array([float(x)
                                                   for x in parts[2:5]]),
                                    angle=float(parts[5])))
            else:
                raise DataError(f"unknown script op {kind!r}")
    return ChangeScript(ops=ops, seed=seed)


def write_bundle(bundle: SynthBundle, out_dir) -> None:
    out = str(out_dir)
    os.makedirs(os.path.join(out, "images"), exist_ok=True)
    os.makedirs(os.path.join(out, "gt"), exist_ok=True)
    save_scene(bundle.pre_scene, os.path.join(out, "pre.gscn"))
    save_scene(bundle.post_scene, os.path.join(out, "post.gscn"))
    save_cameras(bundle.pre_cams, os.path.join(out, "cams_pre.txt"))
    save_cameras(bundle.post_cams, os.path.join(out, "cams_post.txt"))
    save_cameras(bundle.test_cams, os.path.join(out, "cams_test.txt"))
    save_script(bundle.script, os.path.join(out, "script.txt"))
    for cam, img in zip(bundle.post_cams, bundle.post_images):
        save_png(img, os.path.join(out, "images", f"post_{cam.id}.png"))
        save_fimg(img, os.path.join(out, "images", f"post_{cam.id}.fimg"))
    for cam, img in zip(bundle.test_cams, bundle.test_images):
        save_png(img, os.path.join(out, "images", f"test_{cam.id}.png"))
        save_fimg(img, os.path.join(out, "images", f"test_{cam.id}.fimg"))
    for cam, (mp, mq) in zip(bundle.post_cams, bundle.gt_post):
        save_mask_pgm(mp, os.path.join(out, "gt", f"post_{cam.id}_pre.pgm"))
        save_mask_pgm(mq, os.path.join(out, "gt", f"post_{cam.id}_post.pgm"))
    for cam, (mp, mq) in zip(bundle.test_cams, bundle.gt_test):
        save_mask_pgm(mp, os.path.join(out, "gt", f"test_{cam.id}_pre.pgm"))
        save_mask_pgm(mq, os.path.join(out, "gt", f"test_{cam.id}_post.pgm"))
    with open(os.path.join(out, "meta.txt"), "w", encoding="utf-8") as f:
        f.write(f"background {bundle.background[0]!r} "
                f"{bundle.background[1]!r} {bundle.background[2]!r}\n")
        f.write(f"resolution {bundle.spec.resolution}\n")
        f.write(f"room_extent {bundle.spec.room_extent!r}\n")
