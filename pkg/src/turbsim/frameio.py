"""Image file I/O with sRGB transfer handling.

In memory, frames are linear-light float64 RGB (or gray) in [0, 1].
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def srgb_to_linear(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(v: np.ndarray) -> np.ndarray:
    v = np.clip(np.asarray(v, dtype=float), 0.0, 1.0)
    return np.where(v <= 0.0031308, 12.92 * v, 1.055 * v ** (1 / 2.4) - 0.055)


def read_image(path, linear: bool = True) -> np.ndarray:
    """Read an 8- or 16-bit image as float RGB (or gray) in [0, 1]."""
    if not Path(path).is_file():
        raise FileNotFoundError(f"cannot read image {path}: no such file")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"cannot read image {path}")
    if raw.dtype == np.uint8:
        v = raw / 255.0
    elif raw.dtype == np.uint16:
        v = raw / 65535.0
    else:
        raise ValueError(f"unsupported pixel type {raw.dtype} in {path}")
    if v.ndim == 3:
        v = v[..., :3][..., ::-1]  # BGR(A) -> RGB
    return srgb_to_linear(v) if linear else np.ascontiguousarray(v)


def encode_image(img: np.ndarray, bit_depth: int = 8, linear: bool = True) -> np.ndarray:
    """Quantize a float frame to the integer array written by :func:`write_image`."""
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    v = linear_to_srgb(img) if linear else np.clip(img, 0.0, 1.0)
    peak = 255 if bit_depth == 8 else 65535
    out = np.rint(v * peak).astype(np.uint8 if bit_depth == 8 else np.uint16)
    if out.ndim == 3:
        out = np.ascontiguousarray(out[..., ::-1])
    return out


def write_image(path, img: np.ndarray, bit_depth: int = 8, linear: bool = True) -> None:
    path = Path(path)
    if not cv2.imwrite(str(path), encode_image(img, bit_depth, linear)):
        raise OSError(f"cannot write image {path}")


def list_frames(directory) -> list[Path]:
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise OSError(f"no image frames in {directory}")
    return files
