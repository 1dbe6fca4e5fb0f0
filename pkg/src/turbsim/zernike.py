"""Zernike polynomials in Noll ordering and Kolmogorov inter-mode statistics.

All modes use the Noll normalization (unit RMS over the unit disk), and all
coefficient covariances are expressed in radians^2 of pupil phase.
"""

from __future__ import annotations

import logging
from functools import lru_cache
from dataclasses import dataclass, field
from math import factorial

import numpy as np
from scipy.special import gamma

logger = logging.getLogger(__name__)

# Kolmogorov prefactor of the Noll covariance in units of (D/r0)^{5/3}.
# Derived from the phase spectrum 0.0229 r0^{-5/3} f^{-11/3} via the
# Weber-Schafheitlin integral; gives <a_2^2> = 0.4489 (D/r0)^{5/3}.
NOLL_PREFACTOR = (
    gamma(14 / 3)
    * ((24 / 5) * gamma(6 / 5)) ** (5 / 6)
    * gamma(11 / 6) ** 2
    / (2 ** (8 / 3) * np.pi)
)

FIRST_HIGHORDER_MODE = 4
N_HIGHORDER = 33
N_MODES = 36

_JITTER_LADDER = (0.0, 1e-12, 1e-11, 1e-10, 1e-9)


class FactorizationError(np.linalg.LinAlgError):
    """Raised when a covariance matrix cannot be Cholesky-factored."""


def noll_to_nm(j: int) -> tuple[int, int]:
    """Map a Noll index to its (radial order, signed azimuthal order) pair.

    Even ``j`` carries the cosine term (``m > 0``), odd ``j`` the sine term
    (``m < 0``).

    >>> noll_to_nm(4)
    (2, 0)
    >>> noll_to_nm(7)
    (3, -1)
    """
    j = int(j)
    if j < 1:
        raise ValueError(f"Noll index must be >= 1, got {j}")
    n = 0
    while (n + 1) * (n + 2) // 2 < j:
        n += 1
    # |m| values of row n in Noll order: 0 once (if present), then each nonzero twice
    abs_m = []
    for m in range(n % 2, n + 1, 2):
        abs_m.extend([m] if m == 0 else [m, m])
    m = abs_m[j - n * (n + 1) // 2 - 1]
    if m != 0 and j % 2 == 1:
        m = -m
    return n, m


def nm_to_noll(n: int, m: int) -> int:
    """Inverse of :func:`noll_to_nm`."""
    _check_nm(n, m)
    for j in range(n * (n + 1) // 2 + 1, (n + 1) * (n + 2) // 2 + 1):
        if noll_to_nm(j) == (n, m):
            return j
    raise AssertionError("unreachable")  # pragma: no cover


def _check_nm(n: int, m: int) -> None:
    if n < 0 or abs(m) > n or (n - abs(m)) % 2:
        raise ValueError(f"invalid Zernike order (n={n}, m={m})")


@dataclass(frozen=True)
class PupilGrid:
    """Cell-centred square sampling of the unit disk.

    Sample ``i`` sits at ``(i - (N - 1) / 2) / (N / 2)``, so the grid is
    symmetric under flips and transposition and the disk spans all N samples.
    """

    resolution: int
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    rho: np.ndarray = field(repr=False)
    theta: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, resolution: int = 256) -> "PupilGrid":
        if resolution < 32:
            raise ValueError(f"pupil resolution must be >= 32, got {resolution}")
        c = (np.arange(resolution) - (resolution - 1) / 2) / (resolution / 2)
        x, y = np.meshgrid(c, c)
        rho = np.hypot(x, y)
        theta = np.arctan2(y, x)
        for a in (x, y, rho, theta):
            a.setflags(write=False)
        mask = rho <= 1.0
        mask.setflags(write=False)
        return cls(resolution, x, y, rho, theta, mask)

    @property
    def n_inside(self) -> int:
        return int(self.mask.sum())


def radial_polynomial(n: int, m: int, rho: np.ndarray) -> np.ndarray:
    m = abs(m)
    out = np.zeros_like(rho, dtype=float)
    for k in range((n - m) // 2 + 1):
        c = (-1) ** k * factorial(n - k) / (
            factorial(k) * factorial((n + m) // 2 - k) * factorial((n - m) // 2 - k)
        )
        out += c * rho ** (n - 2 * k)
    return out


def evaluate_mode(nm: tuple[int, int], grid: PupilGrid) -> np.ndarray:
    """Sample the Noll-normalized Zernike mode ``Z_n^m`` on ``grid``.

    Points outside the unit disk are zero.
    """
    n, m = nm
    _check_nm(n, m)
    r = grid.rho[grid.mask]
    t = grid.theta[grid.mask]
    radial = radial_polynomial(n, m, r)
    if m == 0:
        vals = np.sqrt(n + 1) * radial
    elif m > 0:
        vals = np.sqrt(2 * (n + 1)) * radial * np.cos(m * t)
    else:
        vals = np.sqrt(2 * (n + 1)) * radial * np.sin(-m * t)
    out = np.zeros(grid.rho.shape)
    out[grid.mask] = vals
    return out


def mode_stack(modes, grid: PupilGrid) -> np.ndarray:
    """Return an ``(len(modes), n_inside)`` array of in-disk mode samples."""
    return np.stack([evaluate_mode(noll_to_nm(j), grid)[grid.mask] for j in modes])


def noll_pair_covariance(j1: int, j2: int) -> float:
    """Kolmogorov covariance <a_j1 a_j2> at D/r0 = 1 (Noll's closed form)."""
    n1, m1 = noll_to_nm(j1)
    n2, m2 = noll_to_nm(j2)
    if abs(m1) != abs(m2):
        return 0.0
    # cos/sin partners of the same |m| are uncorrelated
    if m1 != 0 and (j1 - j2) % 2:
        return 0.0
    if j1 == 1 or j2 == 1:
        raise ValueError("piston variance diverges for Kolmogorov statistics")
    m = abs(m1)
    sign = (-1) ** ((n1 + n2 - 2 * m) // 2)
    return float(
        NOLL_PREFACTOR
        * sign
        * np.sqrt((n1 + 1) * (n2 + 1))
        * gamma((n1 + n2 - 5 / 3) / 2)
        / (
            gamma((n1 - n2 + 17 / 3) / 2)
            * gamma((n2 - n1 + 17 / 3) / 2)
            * gamma((n1 + n2 + 23 / 3) / 2)
        )
    )


@lru_cache(maxsize=8)
def _unit_noll_matrix(modes: tuple[int, ...]) -> np.ndarray:
    k = len(modes)
    out = np.zeros((k, k))
    for a in range(k):
        for b in range(a, k):
            out[a, b] = out[b, a] = noll_pair_covariance(modes[a], modes[b])
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ModeCovariance:
    """Covariance of a block of Noll modes and its lower Cholesky factor."""

    modes: tuple[int, ...]
    matrix: np.ndarray = field(repr=False)
    cholesky: np.ndarray = field(repr=False)
    jitter: float = 0.0

    @property
    def dim(self) -> int:
        return len(self.modes)

    def dump(self, path) -> None:
        """Write matrix and factor as plain-text row-major grids."""
        with open(path, "w") as fh:
            fh.write(f"# modes {self.modes[0]}..{self.modes[-1]} jitter {self.jitter:.3e}\n")
            fh.write("# matrix\n")
            np.savetxt(fh, self.matrix, fmt="%.17g")
            fh.write("# cholesky\n")
            np.savetxt(fh, self.cholesky, fmt="%.17g")


def cholesky_factor(matrix) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of a symmetric PSD matrix.

    If the plain factorization fails, a diagonal jitter
    ``eps * trace / dim`` is added with ``eps`` escalating from 1e-12 to 1e-9.

    Returns
    -------
    factor, eps
        The factor and the relative jitter that was needed (0.0 if none).
    """
    if isinstance(matrix, ModeCovariance):
        matrix = matrix.matrix
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {matrix.shape}")
    if not np.allclose(matrix, matrix.T, rtol=1e-12, atol=0):
        raise FactorizationError("matrix is not symmetric")
    scale = np.trace(matrix) / matrix.shape[0]
    for eps in _JITTER_LADDER:
        try:
            factor = np.linalg.cholesky(matrix + eps * scale * np.eye(matrix.shape[0]))
        except np.linalg.LinAlgError:
            continue
        if eps:
            logger.warning("Cholesky needed diagonal jitter %.1e", eps)
        return factor, eps
    w = np.linalg.eigvalsh(matrix)
    raise FactorizationError(
        f"matrix not PSD beyond jitter budget: min eigenvalue {w[0]:.3e}, "
        f"max {w[-1]:.3e}"
    )


def noll_covariance(
    dim: int = N_HIGHORDER, d_over_r0: float = 1.0, first_mode: int = FIRST_HIGHORDER_MODE
) -> ModeCovariance:
    """Noll inter-mode covariance of modes ``first_mode .. first_mode + dim - 1``.

    Entries scale exactly as ``d_over_r0 ** (5/3)``.
    """
    if not d_over_r0 > 0:
        raise ValueError(f"d_over_r0 must be positive, got {d_over_r0}")
    if first_mode < 2:
        raise ValueError("piston is excluded from the covariance")
    modes = tuple(range(first_mode, first_mode + dim))
    matrix = _unit_noll_matrix(modes) * d_over_r0 ** (5 / 3)
    matrix.setflags(write=False)
    factor, eps = cholesky_factor(matrix)
    factor.setflags(write=False)
    return ModeCovariance(modes, matrix, factor, eps)
