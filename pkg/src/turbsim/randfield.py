"""Spatio-temporally correlated Zernike coefficient fields.

White seeds evolve frame to frame by an AR(1) recursion; each frame's seeds are
shaped into wide-sense-stationary fields by FFT filtering with the square root
of a kernel's power spectrum, and the 33 high-order planes are then mixed per
pixel with the Cholesky factor of the Noll covariance.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from . import correlation, zernike
from .correlation import CorrelationKernel, CorrelationLut

logger = logging.getLogger(__name__)

CLAMP_WARNING_FRACTION = 0.05
HIGHORDER_PAD_CAP = 128


def odd_fast_len(n: int) -> int:
    """Smallest odd 7-smooth integer >= ``n`` (fast for pocketfft)."""
    m = max(int(n), 1)
    if m % 2 == 0:
        m += 1
    while True:
        k = m
        for p in (3, 5, 7):
            while k % p == 0:
                k //= p
        if k == 1:
            return m
        m += 2


@dataclass(frozen=True)
class SeedField:
    """I.i.d. standard normal planes, shape ``(n_modes, height, width)``."""

    values: np.ndarray = field(repr=False)
    frame_index: int = 0

    @property
    def n_modes(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def draw_seed(h: int, w: int, n_modes: int, rng: np.random.Generator, frame_index: int = 0) -> SeedField:
    if h < 1 or w < 1 or n_modes < 1:
        raise ValueError("seed dimensions must be positive")
    return SeedField(rng.standard_normal((n_modes, h, w)), frame_index)


def ar1_step(prev: SeedField, alpha: float, rng: np.random.Generator) -> SeedField:
    """Advance the seed one frame: ``alpha * prev + sqrt(1 - alpha^2) * eps``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 1.0:
        return SeedField(prev.values.copy(), prev.frame_index + 1)
    eps = rng.standard_normal(prev.values.shape)
    return SeedField(alpha * prev.values + math.sqrt(1.0 - alpha * alpha) * eps, prev.frame_index + 1)


class SpectralFactor:
    """Square-root power spectrum of a kernel embedded on a periodic grid.

    Negative spectral values (the circulant embedding is not always PSD) are
    clamped to zero and the amplitude is rescaled so that filtered white noise
    has marginal variance equal to the kernel centre.
    """

    def __init__(self, kernel: CorrelationKernel, shape: tuple[int, int]):
        H, W = shape
        kh, kw = kernel.values.shape
        if kh > H or kw > W:
            raise ValueError(f"kernel {kernel.values.shape} larger than field {shape}")
        grid = np.zeros((H, W))
        y0, x0 = H // 2 - kh // 2, W // 2 - kw // 2
        grid[y0:y0 + kh, x0:x0 + kw] = kernel.values
        spectrum = sfft.rfft2(sfft.ifftshift(grid)).real
        # full-plane masses from the half-plane rfft layout
        weights = np.full(spectrum.shape[1], 2.0)
        weights[0] = 1.0
        if W % 2 == 0:
            weights[-1] = 1.0
        neg = np.minimum(spectrum, 0.0)
        total = float((np.abs(spectrum) * weights).sum())
        self.clamped_fraction = max(0.0, float(-(neg * weights).sum() / total)) if total > 0 else 0.0
        clamped = spectrum - neg
        variance = float((clamped * weights).sum()) / (H * W)
        center = kernel.center
        self.scale = math.sqrt(center / variance) if variance > 0 else 0.0
        self.amplitude = np.sqrt(clamped) * self.scale
        self.shape = (H, W)
        self.kind = kernel.kind
        if self.clamped_fraction > CLAMP_WARNING_FRACTION:
            logger.warning(
                "%s kernel: %.1f%% of spectral mass clamped", kernel.kind, 100 * self.clamped_fraction
            )

    def apply(self, planes: np.ndarray) -> np.ndarray:
        """Filter one plane ``(H, W)`` or a stack ``(..., H, W)``."""
        if planes.shape[-2:] != self.shape:
            raise ValueError(f"plane shape {planes.shape[-2:]} != filter shape {self.shape}")
        spec = sfft.rfft2(planes, axes=(-2, -1))
        spec *= self.amplitude
        return sfft.irfft2(spec, s=self.shape, axes=(-2, -1))


def fft_filter(seed: np.ndarray, kernel: CorrelationKernel) -> np.ndarray:
    """Correlate a white plane (or stack of planes) with ``kernel``."""
    seed = np.asarray(seed, dtype=float)
    return SpectralFactor(kernel, seed.shape[-2:]).apply(seed)


def mix_highorder(independent: np.ndarray, factor: np.ndarray, mode_axis: int = -1) -> np.ndarray:
    """Apply ``factor`` to the mode vector of every pixel."""
    independent = np.asarray(independent)
    factor = np.asarray(factor)
    k = independent.shape[mode_axis]
    if factor.shape != (k, k):
        raise ValueError(f"factor shape {factor.shape} does not match {k} modes")
    moved = np.moveaxis(independent, mode_axis, -1)
    return np.moveaxis(moved @ factor.T, -1, mode_axis)


@dataclass(frozen=True)
class FrameSeed:
    """White seeds for one frame: 2 tilt planes and 33 high-order planes."""

    tilt: SeedField
    highorder: SeedField

    @property
    def frame_index(self) -> int:
        return self.tilt.frame_index

    @property
    def n_modes(self) -> int:
        return self.tilt.n_modes + self.highorder.n_modes


@dataclass(frozen=True)
class ZernikeField:
    """Per-pixel Zernike coefficients: tilt ``(H, W, 2)``, high-order ``(H, W, 33)``."""

    tilt: np.ndarray = field(repr=False)
    highorder: np.ndarray = field(repr=False)
    profile_id: str = ""

    @property
    def height(self) -> int:
        return self.tilt.shape[0]

    @property
    def width(self) -> int:
        return self.tilt.shape[1]

    @classmethod
    def zeros(cls, h: int, w: int, profile_id: str = "") -> "ZernikeField":
        return cls(np.zeros((h, w, 2)), np.zeros((h, w, zernike.N_HIGHORDER)), profile_id)

    def dump(self, path) -> None:
        """Flat little-endian float64 block behind a one-line text header."""
        header = (
            f"turbsim-zfield 1 {self.height} {self.width} 2 {self.highorder.shape[-1]} "
            f"{self.profile_id}\n"
        ).encode()
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(self.tilt, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.highorder, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ZernikeField":
        with open(path, "rb") as fh:
            head = fh.readline().decode().split()
            if head[:2] != ["turbsim-zfield", "1"]:
                raise ValueError(f"{path} is not a field dump")
            h, w, nt, nh = map(int, head[2:6])
            data = np.frombuffer(fh.read(), dtype="<f8")
        tilt = data[: h * w * nt].reshape(h, w, nt)
        high = data[h * w * nt:].reshape(h, w, nh)
        return cls(tilt.copy(), high.copy(), head[6] if len(head) > 6 else "")


def highorder_pad(beta: float) -> int:
    return min(math.ceil(4.0 / beta), HIGHORDER_PAD_CAP)


class FieldGenerator:
    """Everything needed to turn frame seeds into Zernike fields for one profile.

    Kernels are built on the full (odd) generation grid, i.e. evaluated at
    every wrapped lag, and fields are cropped back to ``shape``.
    """

    def __init__(self, profile, shape: tuple[int, int], lut: CorrelationLut):
        from .params import pixel_pitch_over_d

        H, W = shape
        self.shape = (int(H), int(W))
        self.profile_id = profile.profile_id
        self.tilt_grid = (odd_fast_len(2 * H - 1), odd_fast_len(2 * W - 1))
        pad = highorder_pad(profile.beta_highorder)
        self.highorder_grid = (odd_fast_len(H + pad), odd_fast_len(W + pad))

        pitch = pixel_pitch_over_d(profile, W)
        kx, ky = correlation.tilt_kernel_2d(self.tilt_grid, pitch, profile.d_over_r0, lut)
        self.tilt_filters = (SpectralFactor(kx, self.tilt_grid), SpectralFactor(ky, self.tilt_grid))
        ho = correlation.highorder_kernel(profile.beta_highorder, self.highorder_grid)
        self.highorder_filter = SpectralFactor(ho, self.highorder_grid)
        self.covariance = zernike.noll_covariance(zernike.N_HIGHORDER, profile.d_over_r0)
        self.tilt_variance = kx.center

        self.warnings = []
        for f in (*self.tilt_filters, self.highorder_filter):
            if f.clamped_fraction > CLAMP_WARNING_FRACTION:
                self.warnings.append(
                    f"{f.kind}: {100 * f.clamped_fraction:.1f}% of spectral mass clamped"
                )
        self.clamped_fractions = {f.kind: f.clamped_fraction for f in (*self.tilt_filters, self.highorder_filter)}

    def draw_seed(self, rng: np.random.Generator, frame_index: int = 0) -> FrameSeed:
        return FrameSeed(
            draw_seed(*self.tilt_grid, 2, rng, frame_index),
            draw_seed(*self.highorder_grid, zernike.N_HIGHORDER, rng, frame_index),
        )

    def step(self, prev: FrameSeed, alpha: float, rng: np.random.Generator) -> FrameSeed:
        return FrameSeed(ar1_step(prev.tilt, alpha, rng), ar1_step(prev.highorder, alpha, rng))

    def generate(self, seed: FrameSeed) -> ZernikeField:
        H, W = self.shape
        if seed.tilt.values.shape[1:] != self.tilt_grid or seed.highorder.values.shape[1:] != self.highorder_grid:
            raise ValueError("seed grid does not match this generator")
        tx = self.tilt_filters[0].apply(seed.tilt.values[0])[:H, :W]
        ty = self.tilt_filters[1].apply(seed.tilt.values[1])[:H, :W]
        ho = self.highorder_filter.apply(seed.highorder.values)[:, :H, :W]
        mixed = mix_highorder(np.moveaxis(ho, 0, -1), self.covariance.cholesky)
        return ZernikeField(np.stack([tx, ty], axis=-1), mixed, self.profile_id)


def seed_chain(generator: FieldGenerator, alpha: float, master_seed: int, n_frames: int):
    """Yield the AR(1) seed chain ``W_0 .. W_{T-1}`` for one sequence."""
    from .rng import Purpose, stream

    seed = generator.draw_seed(stream(master_seed, Purpose.FIELD, 0), 0)
    yield seed
    for t in range(1, n_frames):
        seed = generator.step(seed, alpha, stream(master_seed, Purpose.FIELD, t))
        yield seed


def generate_zernike_field(profile, frame_seed: FrameSeed, shape, lut: CorrelationLut) -> ZernikeField:
    """One-shot convenience wrapper around :class:`FieldGenerator`."""
    return FieldGenerator(profile, shape, lut).generate(frame_seed)

