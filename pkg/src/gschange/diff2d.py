"""Per-view 2D change masks from paired rendered/captured images.

The pipeline here: extract per-pixel features, find the principal axis of
the pooled feature cloud of both images, project per-pixel feature
differences onto it (a signed distance), and threshold the signed map
into two directional masks. One direction collects pixels whose content
existed before the change, the other pixels whose content is new; which
is which gets resolved later from 3D retention rates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ContractError, DataError, DegenerateAxisError, FormatError
from .images import luminance

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1

PCA_MAX_SAMPLES = 65536
QUANTILE_DEFAULT = 0.95


@dataclass
class FeatureMap:
    height: int
    width: int
    dim: int
    data: np.ndarray  # (h, w, d) float64

    def __post_init__(self):
        if self.data.shape != (self.height, self.width, self.dim):
            raise ContractError(f"feature data shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise DataError("non-finite feature value")


@dataclass
class PrincipalAxis:
    v: np.ndarray  # (d,) unit vector
    explained_variance_ratio: float


@dataclass
class SignedDistanceMap:
    height: int
    width: int
    values: np.ndarray  # (h, w) float64


@dataclass
class DiffThresholds:
    eps1: float = 0.0           # threshold for the positive direction
    eps2: float = 0.0           # threshold for the negative direction (<= 0)
    mode: str = "quantile"      # fixed | quantile
    q: float = QUANTILE_DEFAULT

    def __post_init__(self):
        if self.mode not in ("fixed", "quantile"):
            raise ContractError(f"unknown threshold mode {self.mode!r}")
        if self.eps1 < 0 or self.eps2 > 0:
            raise ContractError("need eps1 >= 0 >= eps2")


def save_fmap(data: np.ndarray, path) -> None:
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.ndim != 3:
        raise ContractError(f"FMAP expects (h, w, d), got {arr.shape}")
    h, w, d = arr.shape
    with open(path, "wb") as f:
        f.write(FMAP_MAGIC)
        f.write(struct.pack("<IIII", FMAP_VERSION, h, w, d))
        f.write(arr.tobytes())


def load_fmap(path) -> FeatureMap:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 20 or data[:4] != FMAP_MAGIC:
        raise FormatError(f"{path}: missing FMAP magic")
    version, h, w, d = struct.unpack_from("<IIII", data, 4)
    if version != FMAP_VERSION:
        raise FormatError(f"{path}: unsupported FMAP version {version}")
    if len(data) != 20 + h * w * d * 4:
        raise FormatError(f"{path}: truncated FMAP payload")
    arr = np.frombuffer(data, dtype="<f4", offset=20).reshape(h, w, d)
    return FeatureMap(h, w, d, arr.astype(np.float64))


def bilinear_upsample(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resize of (h, w, d); exact at grid corners."""
    h, w = data.shape[:2]
    ys = (np.arange(out_h) * ((h - 1) / (out_h - 1)) if out_h > 1
          else np.zeros(out_h))
    xs = (np.arange(out_w) * ((w - 1) / (out_w - 1)) if out_w > 1
          else np.zeros(out_w))
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    d = np.asarray(data, np.float64)
    top = d[y0][:, x0] * (1 - fx) + d[y0][:, x1] * fx
    bot = d[y1][:, x0] * (1 - fx) + d[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def extract_features(pixels: np.ndarray, provider: str = "rgb",
                     external_path=None) -> FeatureMap:
    """Per-pixel features: rgb passthrough, 3x3 patch stack, or an external
    FMAP file bilinearly upsampled to the image resolution."""
    img = np.asarray(pixels, np.float64)
    h, w = img.shape[:2]
    if provider == "rgb":
        return FeatureMap(h, w, 3, img.copy())
    if provider == "patch":
        padded = np.pad(img, ((1, 1), (1, 1), (0, 0)))
        planes = [padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
                  for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
        return FeatureMap(h, w, 27, np.concatenate(planes, axis=2))
    if provider == "external":
        if external_path is None:
            raise ContractError("external provider needs a file path")
        fm = load_fmap(external_path)
        up = bilinear_upsample(fm.data, h, w)
        if up.shape[:2] != (h, w):
            raise DataError("external feature map does not match image dims")
        return FeatureMap(h, w, fm.dim, up)
    raise ContractError(f"unknown feature provider {provider!r}")


def principal_axis(fa: FeatureMap, fb: FeatureMap,
                   max_samples: int = PCA_MAX_SAMPLES,
                   seed: int = 0) -> PrincipalAxis:
    """First principal component of the pooled pixel features of both maps.

    Pixels are pooled from both maps, mean-centered, and (if needed)
    uniformly subsampled to ``max_samples`` with a seeded RNG. The sign is
    fixed so the largest-magnitude component of v is positive.
    """
    if (fa.height, fa.width) != (fb.height, fb.width) or fa.dim != fb.dim:
        raise ContractError("feature maps must share dims")
    if max_samples < 2:
        raise ContractError("max_samples must be >= 2")
    pooled = np.concatenate([fa.data.reshape(-1, fa.dim),
                             fb.data.reshape(-1, fb.dim)], axis=0)
    if len(pooled) > max_samples:
        rng = np.random.default_rng(seed)
        sel = rng.choice(len(pooled), size=max_samples, replace=False)
        pooled = pooled[np.sort(sel)]
    centered = pooled - pooled.mean(axis=0)
    cov = centered.T @ centered / max(len(pooled) - 1, 1)
    if not np.any(np.abs(cov) > 0):
        raise DegenerateAxisError("all pooled features identical")
    evals, evecs = np.linalg.eigh(cov)
    v = evecs[:, -1]
    k = int(np.argmax(np.abs(v)))
    if v[k] < 0:
        v = -v
    total = float(evals.sum())
    ratio = float(evals[-1] / total) if total > 0 else 0.0
    return PrincipalAxis(v=v, explained_variance_ratio=ratio)


def signed_distance(fa: FeatureMap, fb: FeatureMap,
                    axis: PrincipalAxis) -> SignedDistanceMap:
    """Per-pixel projection of (fa - fb) onto the principal axis."""
    if (fa.height, fa.width, fa.dim) != (fb.height, fb.width, fb.dim):
        raise ContractError("feature maps must share dims")
    v = axis.v / np.linalg.norm(axis.v)
    vals = (fa.data - fb.data) @ v
    return SignedDistanceMap(fa.height, fa.width, vals)


def resolve_thresholds(sd: SignedDistanceMap,
                       th: DiffThresholds) -> tuple[float, float]:
    """Effective (eps1, eps2); quantile mode derives them from the map."""
    if th.mode == "fixed":
        return th.eps1, th.eps2
    pos = sd.values[sd.values > 0]
    neg = sd.values[sd.values < 0]
    eps1 = float(np.quantile(pos, th.q)) if len(pos) else 0.0
    eps2 = float(np.quantile(neg, 1.0 - th.q)) if len(neg) else 0.0
    return eps1, eps2


def threshold_directional(sd: SignedDistanceMap, th: DiffThresholds
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Directional binary masks (D > eps1, D < eps2); always disjoint."""
    eps1, eps2 = resolve_thresholds(sd, th)
    m1 = sd.values > eps1
    m2 = sd.values < eps2
    return m1, m2


# ---------------------------------------------------------------------------
# 2D ablation baselines


def local_ssim_map(a: np.ndarray, b: np.ndarray, window: int = 11,
                   sigma: float = 1.5) -> np.ndarray:
    """Per-pixel SSIM on luminance with a Gaussian window."""
    la, lb = luminance(a), luminance(b)
    if la.shape[0] < window or la.shape[1] < window:
        raise ContractError("image smaller than SSIM window")
    t = (window - 1) / 2.0
    blur = lambda im: ndimage.gaussian_filter(im, sigma, truncate=t / sigma,
                                              mode="nearest")
    mu_a, mu_b = blur(la), blur(lb)
    var_a = blur(la * la) - mu_a * mu_a
    var_b = blur(lb * lb) - mu_b * mu_b
    cov = blur(la * lb) - mu_a * mu_b
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)
            / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))


BASELINE_KINDS = ("pixel", "ssim", "feature", "pixel_x_feature",
                  "ssim_x_feature")


def baseline_diff(a: np.ndarray, b: np.ndarray, kind: str,
                  pixel_threshold: float = 0.1,
                  ssim_threshold: float = 0.3,
                  feature_threshold: float | None = None,
                  feature_q: float = QUANTILE_DEFAULT,
                  seed: int = 0) -> np.ndarray:
    """Single-mask 2D change baselines used by the ablation study.

    pixel: RGB L2 distance above ``pixel_threshold``. ssim: structural
    dissimilarity (1 - local SSIM) above ``ssim_threshold``. feature: |signed
    distance| above ``feature_threshold`` (or its ``feature_q`` quantile over
    nonzero magnitudes when the threshold is None). Product kinds AND the two
    component masks.
    """
    if a.shape != b.shape:
        raise ContractError("baseline images must share dims")
    if kind == "pixel":
        d = np.linalg.norm(np.asarray(a, np.float64) - b, axis=2)
        return d > pixel_threshold
    if kind == "ssim":
        return (1.0 - local_ssim_map(a, b)) > ssim_threshold
    if kind == "feature":
        fa = extract_features(a, "rgb")
        fb = extract_features(b, "rgb")
        axis = principal_axis(fa, fb, seed=seed)
        mag = np.abs(signed_distance(fa, fb, axis).values)
        if feature_threshold is None:
            nz = mag[mag > 0]
            feature_threshold = float(np.quantile(nz, feature_q)) if len(nz) else 0.0
            if feature_threshold == 0.0:
                return np.zeros_like(mag, dtype=bool)
        return mag > feature_threshold
    if kind == "pixel_x_feature":
        return (baseline_diff(a, b, "pixel", pixel_threshold=pixel_threshold)
                & baseline_diff(a, b, "feature",
                                feature_threshold=feature_threshold,
                                feature_q=feature_q, seed=seed))
    if kind == "ssim_x_feature":
        return (baseline_diff(a, b, "ssim", ssim_threshold=ssim_threshold)
                & baseline_diff(a, b, "feature",
                                feature_threshold=feature_threshold,
                                feature_q=feature_q, seed=seed))
    raise ContractError(f"unknown baseline kind {kind!r}")
