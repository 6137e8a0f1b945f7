"""Gaussian scene and camera data types plus their on-disk formats.

A scene is an ordered collection of anisotropic 3D Gaussians stored as
float32 column arrays. Scenes serialize to a little-endian binary format
(magic "GSCN"); cameras to a plain-text format, one pinhole camera per
line. Both round-trip byte-exactly: save -> load -> save yields identical
files.

Loaded arrays are frozen (numpy writeable=False). Code that mutates a
scene must build a new one from copies.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError

SCENE_MAGIC = b"GSCN"
SCENE_VERSION = 1
FLAG_DIFF_CHANNEL = 1
_REC_FLOATS = 14  # pos 3 + scale 3 + quat 4 + opacity 1 + color 3

# Quaternion norm drift: below RENORM_EPS the stored values are kept
# verbatim (required for byte-exact round-trips), up to DRIFT_MAX they are
# renormalized, beyond that the file is rejected.
RENORM_EPS = 1e-6
DRIFT_MAX = 1e-3


@dataclass
class Gaussian3D:
    """A single anisotropic Gaussian; used at API edges, not in bulk storage."""

    position: np.ndarray  # (3,) world units
    scale: np.ndarray     # (3,) strictly positive std-devs
    rotation: np.ndarray  # (4,) unit quaternion (w, x, y, z)
    opacity: float        # in [0, 1], post-activation
    color: np.ndarray     # (3,) RGB in [0, 1]


@dataclass
class GaussianScene:
    """Column-array storage for an ordered list of Gaussians.

    The optional ``diff_channel`` holds one scalar change weight in [0, 1]
    per Gaussian.
    """

    positions: np.ndarray            # (n, 3) f32
    scales: np.ndarray               # (n, 3) f32
    rotations: np.ndarray            # (n, 4) f32, (w, x, y, z)
    opacities: np.ndarray            # (n,)  f32
    colors: np.ndarray               # (n, 3) f32
    diff_channel: np.ndarray | None = None  # (n,) f32

    def __post_init__(self):
        n = len(self.positions)
        for name in ("positions", "scales", "rotations", "opacities", "colors"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            if len(arr) != n:
                raise DataError(f"{name} has {len(arr)} rows, expected {n}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.diff_channel is not None:
            dc = np.ascontiguousarray(self.diff_channel, dtype=np.float32)
            if len(dc) != n:
                raise DataError(
                    f"diff_channel has {len(dc)} entries for {n} Gaussians")
            dc.setflags(write=False)
            self.diff_channel = dc

    def __len__(self):
        return len(self.positions)

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            position=self.positions[i].copy(),
            scale=self.scales[i].copy(),
            rotation=self.rotations[i].copy(),
            opacity=float(self.opacities[i]),
            color=self.colors[i].copy(),
        )

    def with_diff_channel(self, diff: np.ndarray | None) -> "GaussianScene":
        return GaussianScene(self.positions, self.scales, self.rotations,
                             self.opacities, self.colors, diff)

    def subset(self, indices: np.ndarray) -> "GaussianScene":
        """New scene keeping only ``indices`` (in the given order)."""
        idx = np.asarray(indices, dtype=np.int64)
        dc = self.diff_channel[idx] if self.diff_channel is not None else None
        return GaussianScene(self.positions[idx], self.scales[idx],
                             self.rotations[idx], self.opacities[idx],
                             self.colors[idx], dc)

    @staticmethod
    def empty() -> "GaussianScene":
        z = np.zeros((0, 3), np.float32)
        return GaussianScene(z, z.copy(), np.zeros((0, 4), np.float32),
                             np.zeros(0, np.float32), z.copy())

    @staticmethod
    def concatenate(parts: list["GaussianScene"]) -> "GaussianScene":
        if not parts:
            return GaussianScene.empty()
        has_diff = all(p.diff_channel is not None for p in parts)
        dc = (np.concatenate([p.diff_channel for p in parts])
              if has_diff else None)
        return GaussianScene(
            np.concatenate([p.positions for p in parts]),
            np.concatenate([p.scales for p in parts]),
            np.concatenate([p.rotations for p in parts]),
            np.concatenate([p.opacities for p in parts]),
            np.concatenate([p.colors for p in parts]),
            dc,
        )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions, shape (..., 4) -> (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - z * w)
    m[..., 0, 2] = 2 * (x * z + y * w)
    m[..., 1, 0] = 2 * (x * y + z * w)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - x * w)
    m[..., 2, 0] = 2 * (x * z - y * w)
    m[..., 2, 1] = 2 * (y * z + x * w)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0 for a rotation matrix."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(m[i, i] - m[j, j] - m[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b for (..., 4) quaternion arrays (w, x, y, z)."""
    aw, ax, ay, az = (np.asarray(a, np.float64)[..., i] for i in range(4))
    bw, bx, by, bz = (np.asarray(b, np.float64)[..., i] for i in range(4))
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


@dataclass
class PinholeCamera:
    """Pinhole camera with a world-to-camera rigid transform.

    The camera looks down +z; image x grows right, image y grows down.
    ``rotation`` is a unit quaternion (w, x, y, z); camera coordinates of a
    world point p are R(q) @ p + t.
    """

    id: int
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray    # (4,)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        vals = [self.fx, self.fy, self.cx, self.cy,
                *self.rotation, *self.translation]
        if not np.all(np.isfinite(vals)):
            raise DataError(f"camera {self.id}: non-finite parameter")
        if self.fx <= 0 or self.fy <= 0:
            raise DataError(f"camera {self.id}: fx, fy must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DataError(f"camera {self.id}: principal point outside image")
        n = float(np.linalg.norm(self.rotation))
        if abs(n - 1.0) >= DRIFT_MAX:
            raise DataError(f"camera {self.id}: quaternion norm {n:.6f}")
        if abs(n - 1.0) >= RENORM_EPS:
            self.rotation = self.rotation / n

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation_matrix.T + self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Continuous pixel coordinates (u, v) and camera-space depth z."""
        pc = self.world_to_camera(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[..., 0] / z + self.cx
            v = self.fy * pc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation_matrix.T @ self.translation


@dataclass
class CameraSet:
    cameras: list[PinholeCamera]
    role: str = "post"  # pre | post | test

    def __post_init__(self):
        if self.role not in ("pre", "post", "test"):
            raise DataError(f"unknown camera role {self.role!r}")
        ids = [c.id for c in self.cameras]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate camera id in set")

    def __len__(self):
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, i):
        return self.cameras[i]


# ---------------------------------------------------------------------------
# GSCN binary scene format


def _validate_scene_fields(rec: np.ndarray, diff: np.ndarray | None):
    if not np.all(np.isfinite(rec)):
        raise DataError("non-finite field in scene record")
    scales = rec[:, 3:6]
    if np.any(scales <= 0):
        raise DataError("non-positive scale component")
    opac = rec[:, 10]
    if np.any(opac < 0) or np.any(opac > 1):
        raise DataError("opacity outside [0, 1]")
    colors = rec[:, 11:14]
    if np.any(colors < 0) or np.any(colors > 1):
        raise DataError("color channel outside [0, 1]")
    if diff is not None:
        if not np.all(np.isfinite(diff)):
            raise DataError("non-finite diff channel value")
        if np.any(diff < 0) or np.any(diff > 1):
            raise DataError("diff channel value outside [0, 1]")


def load_scene(path) -> GaussianScene:
    """Load a GSCN file, enforcing per-Gaussian invariants.

    Quaternions within RENORM_EPS of unit norm are kept bit-exact;
    drift up to DRIFT_MAX is renormalized; larger drift is rejected.
    """
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16 or data[:4] != SCENE_MAGIC:
        raise FormatError(f"{path}: missing GSCN magic")
    version, count, flags = struct.unpack_from("<III", data, 4)
    if version != SCENE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    has_diff = bool(flags & FLAG_DIFF_CHANNEL)
    expect = 16 + count * _REC_FLOATS * 4 + (count * 4 if has_diff else 0)
    if len(data) != expect:
        raise FormatError(
            f"{path}: size {len(data)} does not match count {count}")
    rec = np.frombuffer(data, dtype="<f4", count=count * _REC_FLOATS,
                        offset=16).reshape(count, _REC_FLOATS)
    diff = None
    if has_diff:
        diff = np.frombuffer(data, dtype="<f4", count=count,
                             offset=16 + count * _REC_FLOATS * 4).copy()
    rec = rec.astype(np.float32).copy()
    _validate_scene_fields(rec, diff)

    quats = rec[:, 6:10]
    norms = np.linalg.norm(quats.astype(np.float64), axis=1)
    drift = np.abs(norms - 1.0)
    if np.any(drift >= DRIFT_MAX):
        i = int(np.argmax(drift))
        raise DataError(f"quaternion {i} norm drift {drift[i]:.2e} >= {DRIFT_MAX}")
    fix = drift >= RENORM_EPS
    if np.any(fix):
        rec[fix, 6:10] = (quats[fix].astype(np.float64)
                          / norms[fix, None]).astype(np.float32)

    return GaussianScene(rec[:, 0:3], rec[:, 3:6], rec[:, 6:10], rec[:, 10],
                         rec[:, 11:14], diff)


def save_scene(scene: GaussianScene, path) -> None:
    """Write a GSCN file; identical scenes yield identical bytes."""
    n = len(scene)
    flags = FLAG_DIFF_CHANNEL if scene.diff_channel is not None else 0
    rec = np.empty((n, _REC_FLOATS), dtype="<f4")
    rec[:, 0:3] = scene.positions
    rec[:, 3:6] = scene.scales
    rec[:, 6:10] = scene.rotations
    rec[:, 10] = scene.opacities
    rec[:, 11:14] = scene.colors
    with open(path, "wb") as f:
        f.write(SCENE_MAGIC)
        f.write(struct.pack("<III", SCENE_VERSION, n, flags))
        f.write(rec.tobytes())
        if scene.diff_channel is not None:
            f.write(scene.diff_channel.astype("<f4").tobytes())


# ---------------------------------------------------------------------------
# Camera text format


def load_cameras(path, role: str = "post") -> CameraSet:
    """Parse the camera text format.

    Data lines: ``id width height fx fy cx cy qw qx qy qz tx ty tz``,
    comments start with '#'.
    """
    cameras = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 14:
                raise FormatError(
                    f"{path}:{lineno}: expected 14 fields, got {len(parts)}")
            try:
                cam_id, width, height = (int(parts[i]) for i in range(3))
                vals = [float(p) for p in parts[3:]]
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
            cameras.append(PinholeCamera(
                id=cam_id, width=width, height=height,
                fx=vals[0], fy=vals[1], cx=vals[2], cy=vals[3],
                rotation=np.array(vals[4:8]),
                translation=np.array(vals[8:11]),
            ))
    return CameraSet(cameras, role=role)


def save_cameras(cams: CameraSet, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("# id width height fx fy cx cy qw qx qy qz tx ty tz\n")
        for c in cams:
            nums = [c.fx, c.fy, c.cx, c.cy, *c.rotation, *c.translation]
            f.write(" ".join([str(c.id), str(c.width), str(c.height)]
                             + [repr(float(x)) for x in nums]) + "\n")
