"""Image buffers, binary masks, and their file formats.

Images move between stages as 8-bit PNG (human-facing) and as a raw f32
container ("FIMG") that avoids quantization; binary masks travel as P5
PGM with 0 = unchanged and 255 = changed.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ContractError, FormatError

FIMG_MAGIC = b"FIMG"


@dataclass
class ImageBuffer:
    """Rendered RGB image plus the per-pixel leftover transmittance."""

    width: int
    height: int
    pixels: np.ndarray               # (h, w, 3) float64 in [0, 1]
    final_transmittance: np.ndarray  # (h, w) float64 in [0, 1]
    depth: np.ndarray | None = None  # (h, w) alpha-weighted mean depth

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width, 3):
            raise ContractError(
                f"pixels shape {self.pixels.shape} vs {self.height}x{self.width}")
        if self.final_transmittance.shape != (self.height, self.width):
            raise ContractError("final_transmittance shape mismatch")

    @staticmethod
    def from_array(pixels: np.ndarray) -> "ImageBuffer":
        h, w = pixels.shape[:2]
        return ImageBuffer(w, h, np.asarray(pixels, np.float64),
                           np.zeros((h, w)))


def luminance(pixels: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of an (h, w, 3) array."""
    p = np.asarray(pixels, dtype=np.float64)
    return 0.299 * p[..., 0] + 0.587 * p[..., 1] + 0.114 * p[..., 2]


# ---------------------------------------------------------------------------
# PNG (8-bit, via Pillow)


def save_png(pixels: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(pixels, np.float64), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        u8 = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return u8.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# FIMG raw float images: magic, u32 h, u32 w, u32 channels(=3), f32 data


def save_fimg(pixels: np.ndarray, path) -> None:
    arr = np.ascontiguousarray(pixels, dtype="<f4")
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ContractError(f"FIMG expects (h, w, 3), got {arr.shape}")
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(FIMG_MAGIC)
        f.write(struct.pack("<III", h, w, c))
        f.write(arr.tobytes())


def load_fimg(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16 or data[:4] != FIMG_MAGIC:
        raise FormatError(f"{path}: missing FIMG magic")
    h, w, c = struct.unpack_from("<III", data, 4)
    if c != 3:
        raise FormatError(f"{path}: expected 3 channels, got {c}")
    if len(data) != 16 + h * w * c * 4:
        raise FormatError(f"{path}: truncated FIMG payload")
    arr = np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w, c)
    return arr.astype(np.float64)


def load_image_auto(path) -> np.ndarray:
    """Load PNG or FIMG by extension, preferring a sibling .fimg if present."""
    import os
    base, ext = os.path.splitext(str(path))
    if ext == ".fimg":
        return load_fimg(path)
    sib = base + ".fimg"
    if os.path.exists(sib):
        return load_fimg(sib)
    return load_png(path)


# ---------------------------------------------------------------------------
# PGM binary masks (P5, maxval 255)


def save_mask_pgm(mask: np.ndarray, path) -> None:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ContractError(f"mask must be 2-D, got shape {m.shape}")
    h, w = m.shape
    payload = np.where(m.astype(bool), 255, 0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(payload.tobytes())


def load_mask_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    # Header: magic, whitespace/comment-separated width, height, maxval.
    m = re.match(
        rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise FormatError(f"{path}: not a binary P5 PGM")
    w, h, maxval = (int(m.group(i)) for i in (1, 2, 3))
    if maxval != 255:
        raise FormatError(f"{path}: expected maxval 255, got {maxval}")
    payload = data[m.end():]
    if len(payload) != w * h:
        raise FormatError(f"{path}: payload size {len(payload)} != {w * h}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return arr >= 128
