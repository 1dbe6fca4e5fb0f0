"""Spatial autocorrelation kernels for the Zernike coefficient fields.

Tilt modes (Noll 2 and 3) use the anisotropic Bessel-integral model

    E[a_j(x1) a_j(x2)] = c2 / 2^{5/3} (D/r0)^{5/3} [I0(s) +/- cos(2 phi0) I2(s)]

with ``s = |x1 - x2| / D``, evaluated through a tabulated :class:`CorrelationLut`.
High-order modes use an isotropic ``exp(-beta * r)`` decay in pixels.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, special

logger = logging.getLogger(__name__)

C2 = 7.7554
TILT_PREFACTOR = C2 / 2 ** (5 / 3)
# Closed form of I0(0) (Weber-Schafheitlin); used only for calibration constants.
I0_AT_ZERO = special.gamma(14 / 3) * special.gamma(1 / 6) / (
    2 ** (14 / 3) * special.gamma(17 / 6) ** 2 * special.gamma(29 / 6)
)

LUT_FORMAT = "turbsim-correlation-lut"
LUT_VERSION = 1
DEFAULT_S_MAX = 8.0
DEFAULT_N_SAMPLES = 4096

_SPLIT = 1.0
_TAIL_BOUND = 1e-8
# With |J_i| <= 1 the tail beyond T is below 3/11 T^{-11/3}.
_UPPER = (3 / 11 / _TAIL_BOUND) ** (3 / 11)


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not reach the requested accuracy."""

    def __init__(self, msg, estimate, error_bound):
        super().__init__(f"{msg}: estimate={estimate!r}, error bound={error_bound!r}")
        self.estimate = estimate
        self.error_bound = error_bound


def bessel_integral(order: int, s, *, epsrel: float = 1e-9, epsabs: float = 1e-13):
    """Evaluate ``I_i(s) = int_0^inf z^{-14/3} J_i(2 s z) J_2(z)^2 dz``.

    ``s`` may be a scalar or an array; arrays are integrated jointly with
    :func:`scipy.integrate.quad_vec`. The range is split at ``z = 1``: on
    ``[0, 1]`` the substitution ``z = t^3`` removes the ``z^{-2/3}`` endpoint
    behaviour, ``[1, T]`` is integrated adaptively, and the remainder beyond
    ``T`` is bounded analytically by 1e-8.
    """
    if order not in (0, 2):
        raise ValueError(f"order must be 0 or 2, got {order}")
    s = np.asarray(s, dtype=float)
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise ValueError("s must be finite and non-negative")
    flat = np.atleast_1d(s).ravel()
    near_zero = 3.0 / 64.0 if order == 0 else 0.0

    def head(t):
        z = t**3
        if z == 0.0:
            return np.full(flat.shape, near_zero)
        j2 = special.jv(2, z) / (z * z)
        return 3.0 * special.jv(order, 2.0 * flat * z) * j2 * j2

    def body(z):
        return z ** (-14 / 3) * special.jv(order, 2.0 * flat * z) * special.jv(2, z) ** 2

    total = np.zeros_like(flat)
    err_total = 0.0
    for fn, lo, hi in ((head, 0.0, 1.0), (body, _SPLIT, _UPPER)):
        val, err, info = integrate.quad_vec(
            fn, lo, hi, epsabs=epsabs, epsrel=epsrel, norm="max",
            limit=20000, full_output=True,
        )
        if not info.success:
            raise QuadratureError(
                f"quadrature on [{lo}, {hi:.1f}] did not converge", val + total, err
            )
        total += val
        err_total += err
    if err_total > max(1e-6 * np.abs(total).max(), 1e-10):
        raise QuadratureError("accuracy target missed", total, err_total)
    return float(total[0]) if s.ndim == 0 else total.reshape(s.shape)


@dataclass(frozen=True)
class CorrelationLut:
    """Tabulated ``I0(s)`` and ``I2(s)`` with linear interpolation.

    Lookups beyond ``s_max`` saturate at the last tabulated value.
    """

    s_values: np.ndarray = field(repr=False)
    i0_values: np.ndarray = field(repr=False)
    i2_values: np.ndarray = field(repr=False)

    def __post_init__(self):
        s = self.s_values
        if s.ndim != 1 or len(s) < 2 or s[0] != 0.0 or np.any(np.diff(s) <= 0):
            raise ValueError("s_values must be strictly increasing from 0")
        if self.i0_values.shape != s.shape or self.i2_values.shape != s.shape:
            raise ValueError("value columns must match s_values")
        if not (np.all(np.isfinite(self.i0_values)) and np.all(np.isfinite(self.i2_values))):
            raise ValueError("non-finite LUT entries")
        for a in (self.s_values, self.i0_values, self.i2_values):
            a.setflags(write=False)

    @property
    def s_max(self) -> float:
        return float(self.s_values[-1])

    @property
    def n_samples(self) -> int:
        return len(self.s_values)

    def lookup(self, s):
        """Return ``(I0(s), I2(s))`` by linear interpolation."""
        return (
            np.interp(s, self.s_values, self.i0_values),
            np.interp(s, self.s_values, self.i2_values),
        )

    def save(self, path) -> None:
        path = Path(path)
        header = (
            f"{LUT_FORMAT} {LUT_VERSION}\n"
            f"s_max {self.s_max!r}\n"
            f"n_samples {self.n_samples}\n"
            "columns s i0 i2"
        )
        table = np.column_stack([self.s_values, self.i0_values, self.i2_values])
        tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
        np.savetxt(tmp, table, fmt="%.17g", header=header)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "CorrelationLut":
        with open(path) as fh:
            first = fh.readline().lstrip("# ").split()
        if len(first) != 2 or first[0] != LUT_FORMAT:
            raise ValueError(f"{path} is not a correlation LUT file")
        if int(first[1]) != LUT_VERSION:
            raise ValueError(f"unsupported LUT version {first[1]}")
        table = np.loadtxt(path, ndmin=2)
        return cls(table[:, 0].copy(), table[:, 1].copy(), table[:, 2].copy())


def build_lut(s_max: float = DEFAULT_S_MAX, n_samples: int = DEFAULT_N_SAMPLES) -> CorrelationLut:
    """Tabulate both Bessel integrals on ``n_samples`` uniform nodes in ``[0, s_max]``."""
    if not s_max > 0:
        raise ValueError("s_max must be positive")
    if n_samples < 256:
        raise ValueError("n_samples must be >= 256")
    s = np.linspace(0.0, s_max, n_samples)
    i0 = bessel_integral(0, s)
    i2 = bessel_integral(2, s)
    i2[0] = 0.0
    return CorrelationLut(s, i0, i2)


def lut_cache_path(cache_dir, s_max=DEFAULT_S_MAX, n_samples=DEFAULT_N_SAMPLES) -> Path:
    return Path(cache_dir) / f"lut_v{LUT_VERSION}_s{s_max:g}_n{n_samples}.txt"


def default_cache_dir() -> Path:
    return Path(os.environ.get("TURBSIM_CACHE", Path.home() / ".cache" / "turbsim"))


def load_or_build_lut(cache_dir=None, s_max=DEFAULT_S_MAX, n_samples=DEFAULT_N_SAMPLES,
                      rebuild: bool = False) -> CorrelationLut:
    """Load the LUT from ``cache_dir`` or build and store it there."""
    cache_dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    path = lut_cache_path(cache_dir, s_max, n_samples)
    if path.exists() and not rebuild:
        return CorrelationLut.load(path)
    logger.info("building correlation LUT (s_max=%g, n=%d)", s_max, n_samples)
    lut = build_lut(s_max, n_samples)
    cache_dir.mkdir(parents=True, exist_ok=True)
    lut.save(path)
    return lut


def tilt_correlation(s, phi0, d_over_r0: float, lut: CorrelationLut, sign: int = 1):
    """Tilt-coefficient covariance at separation ``s`` (in aperture diameters).

    ``sign`` is +1 for the x-tilt (Noll 2) and -1 for the y-tilt (Noll 3),
    with ``phi0`` measured from the x axis.
    """
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    i0, i2 = lut.lookup(s)
    return TILT_PREFACTOR * d_over_r0 ** (5 / 3) * (i0 + sign * np.cos(2 * phi0) * i2)


@dataclass(frozen=True)
class CorrelationKernel:
    """Centred correlation kernel on an odd pixel support."""

    values: np.ndarray = field(repr=False)
    kind: str

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def center(self) -> float:
        return float(self.values[self.height // 2, self.width // 2])


def _offsets(support):
    h, w = support
    if h % 2 == 0 or w % 2 == 0 or h < 1 or w < 1:
        raise ValueError(f"kernel support must be odd, got {support}")
    dy = np.arange(h, dtype=float)[:, None] - h // 2
    dx = np.arange(w, dtype=float)[None, :] - w // 2
    return dy, dx


def tilt_kernel_2d(support, pixel_pitch_over_d: float, d_over_r0: float, lut: CorrelationLut):
    """Build the x-tilt and y-tilt correlation kernels on a pixel lattice.

    Returns ``(kernel_x, kernel_y)``. Both share the isotropic ``I0`` part and
    carry opposite signs of the ``cos(2 phi0) I2`` term.
    """
    dy, dx = _offsets(support)
    dx2, dy2 = dx * dx, dy * dy
    r2 = dx2 + dy2
    i0, i2 = lut.lookup(pixel_pitch_over_d * np.sqrt(r2))
    with np.errstate(invalid="ignore", divide="ignore"):
        cos2 = np.where(r2 > 0, (dx2 - dy2) / r2, 0.0)
    aniso = cos2 * i2
    scale = TILT_PREFACTOR * d_over_r0 ** (5 / 3)
    kx = scale * (i0 + aniso)
    ky = scale * (i0 - aniso)
    return CorrelationKernel(kx, "tilt-x"), CorrelationKernel(ky, "tilt-y")


def highorder_kernel(beta: float, support) -> CorrelationKernel:
    """Isotropic ``exp(-beta * r)`` kernel, ``r`` in pixels."""
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    dy, dx = _offsets(support)
    return CorrelationKernel(np.exp(-beta * np.sqrt(dx * dx + dy * dy)), "high-order")
