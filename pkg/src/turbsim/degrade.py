"""Image formation: spatially varying blur, tilt warping and additive noise.

Frames are float arrays in linear light, shaped ``(H, W)`` or ``(H, W, C)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from .psf import PsfBasis, project_to_basis

ORDERS = ("blur-warp", "warp-blur")
_PIXEL_CHUNK = 16384
_KERNEL_CHUNK = 8


@dataclass(frozen=True)
class WarpGrid:
    """Per-pixel backward displacements in pixels (``dx`` along columns)."""

    dx: np.ndarray = field(repr=False)
    dy: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.dx.shape != self.dy.shape or self.dx.ndim != 2:
            raise ValueError("dx and dy must be matching 2-D arrays")
        if not (np.all(np.isfinite(self.dx)) and np.all(np.isfinite(self.dy))):
            raise ValueError("displacements must be finite")

    @property
    def height(self) -> int:
        return self.dx.shape[0]

    @property
    def width(self) -> int:
        return self.dx.shape[1]

    @classmethod
    def zeros(cls, h: int, w: int) -> "WarpGrid":
        return cls(np.zeros((h, w)), np.zeros((h, w)))


def tilt_to_warp(zf, tilt_gain: float) -> WarpGrid:
    """Scale the Noll-2 plane to ``dx`` and the Noll-3 plane to ``dy``."""
    if not tilt_gain > 0:
        raise ValueError(f"tilt_gain must be positive, got {tilt_gain}")
    return WarpGrid(tilt_gain * zf.tilt[..., 0], tilt_gain * zf.tilt[..., 1])


def warp_image(img: np.ndarray, grid: WarpGrid) -> np.ndarray:
    """Backward bilinear warp ``out[y, x] = img[y + dy, x + dx]`` with edge clamping.

    All channels share the grid. A zero grid returns the input bit-exactly.
    """
    img = np.asarray(img, dtype=float)
    h, w = img.shape[:2]
    if (grid.height, grid.width) != (h, w):
        raise ValueError(f"grid {grid.height}x{grid.width} does not match image {h}x{w}")
    ys = np.clip(np.arange(h)[:, None] + grid.dy, 0, h - 1)
    xs = np.clip(np.arange(w)[None, :] + grid.dx, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    fy = ys - y0
    fx = xs - x0
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    if img.ndim == 3:
        fy, fx = fy[..., None], fx[..., None]
    top = (1 - fx) * img[y0, x0] + fx * img[y0, x1]
    bottom = (1 - fx) * img[y1, x0] + fx * img[y1, x1]
    return (1 - fy) * top + fy * bottom


class _PaddedSpectrum:
    """FFT of a reflect-padded single-channel image, reused across kernels."""

    def __init__(self, plane: np.ndarray, half: int):
        self.h, self.w = plane.shape
        self.half = half
        if half >= min(self.h, self.w):
            raise ValueError("image smaller than the kernel radius")
        padded = np.pad(plane, half, mode="reflect")
        self.shape = (
            sfft.next_fast_len(padded.shape[0] + 2 * half, real=True),
            sfft.next_fast_len(padded.shape[1] + 2 * half, real=True),
        )
        self.spec = sfft.rfft2(padded, s=self.shape)

    def convolve(self, kernels: np.ndarray) -> np.ndarray:
        """True convolution with a stack ``(n, k, k)``; returns ``(n, H, W)``."""
        kspec = sfft.rfft2(kernels, s=self.shape, axes=(-2, -1))
        full = sfft.irfft2(kspec * self.spec, s=self.shape, axes=(-2, -1))
        o = 2 * self.half
        return full[:, o:o + self.h, o:o + self.w]


def convolve_reflect(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Convolve every channel with one odd kernel, reflect-101 borders."""
    img = np.asarray(img, dtype=float)
    planes = img[..., None] if img.ndim == 2 else img
    out = np.stack(
        [_PaddedSpectrum(planes[..., c], kernel.shape[0] // 2).convolve(kernel[None])[0]
         for c in range(planes.shape[-1])],
        axis=-1,
    )
    return out[..., 0] if img.ndim == 2 else out


def basis_weights(highorder: np.ndarray, basis: PsfBasis) -> np.ndarray:
    """Per-pixel projector output, shape ``(K, H, W)``."""
    h, w, _ = highorder.shape
    flat = highorder.reshape(-1, highorder.shape[-1])
    out = np.empty((basis.rank, h * w))
    for lo in range(0, len(flat), _PIXEL_CHUNK):
        out[:, lo:lo + _PIXEL_CHUNK] = project_to_basis(flat[lo:lo + _PIXEL_CHUNK], basis).T
    return out.reshape(basis.rank, h, w)


def spatially_varying_blur(img: np.ndarray, basis: PsfBasis, weights: np.ndarray,
                           kernel_size: int) -> np.ndarray:
    """``img * mean + sum_k w_k (img * b_k)`` with kernels resized to ``kernel_size``.

    ``weights`` is ``(K, H, W)``, ``(H, W, K)`` is accepted as well when
    unambiguous. Borders are reflect-padded (without repeating the edge).
    """
    img = np.asarray(img, dtype=float)
    h, w = img.shape[:2]
    weights = np.asarray(weights, dtype=float)
    if weights.shape == (h, w, basis.rank) and weights.shape[0] != basis.rank:
        weights = np.moveaxis(weights, -1, 0)
    if weights.shape[0] != basis.rank:
        raise ValueError(f"weights carry {weights.shape[0]} components, basis rank is {basis.rank}")
    if weights.shape[1:] != (h, w):
        raise ValueError(f"weights {weights.shape[1:]} do not match image {(h, w)}")
    mean, kernels = basis.resized(kernel_size)
    planes = img[..., None] if img.ndim == 2 else img
    out = np.empty(planes.shape)
    for c in range(planes.shape[-1]):
        ps = _PaddedSpectrum(planes[..., c], kernel_size // 2)
        acc = ps.convolve(mean[None])[0]
        for lo in range(0, basis.rank, _KERNEL_CHUNK):
            conv = ps.convolve(kernels[lo:lo + _KERNEL_CHUNK])
            acc += np.einsum("khw,khw->hw", weights[lo:lo + _KERNEL_CHUNK], conv)
        out[..., c] = acc
    return out[..., 0] if img.ndim == 2 else out


def add_noise(img: np.ndarray, variance: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. Gaussian noise of ``variance`` and clip to [0, 1]."""
    if variance < 0:
        raise ValueError(f"noise variance must be >= 0, got {variance}")
    img = np.asarray(img, dtype=float)
    if variance == 0:
        return np.clip(img, 0.0, 1.0)
    return np.clip(img + rng.normal(0.0, np.sqrt(variance), img.shape), 0.0, 1.0)


def degrade_frame(clean: np.ndarray, zf, basis: PsfBasis, profile, rng: np.random.Generator,
                  order: str = "blur-warp", weights: np.ndarray | None = None):
    """Return ``(blur_only, degraded)`` for one frame.

    ``blur-warp`` (default) computes ``noise(warp(blur(clean)))``;
    ``warp-blur`` swaps the first two stages for ablations. ``blur_only`` is
    always the distortion-free ``blur(clean)``, clipped to [0, 1].
    """
    if order not in ORDERS:
        raise ValueError(f"order must be one of {ORDERS}")
    clean = np.asarray(clean, dtype=float)
    if (zf.height, zf.width) != clean.shape[:2]:
        raise ValueError("Zernike field and frame sizes differ")
    if weights is None:
        weights = basis_weights(zf.highorder, basis)
    grid = tilt_to_warp(zf, profile.tilt_gain)
    blur_only = np.clip(spatially_varying_blur(clean, basis, weights, profile.kernel_size), 0.0, 1.0)
    if order == "blur-warp":
        distorted = warp_image(blur_only, grid)
    else:
        warped = warp_image(clean, grid)
        distorted = np.clip(spatially_varying_blur(warped, basis, weights, profile.kernel_size), 0.0, 1.0)
    return blur_only, add_noise(distorted, profile.noise_variance, rng)
