"""Phase-to-PSF synthesis, a low-rank PSF basis for the fast path, and kernel resizing.

The exact path squares the Fourier transform of the aberrated pupil. The fast
path expands every PSF around the diffraction-limited kernel ``p0`` in a PCA
basis; basis weights are predicted from Zernike coefficients by a polynomial
least-squares projector. No intercept is fitted, so zero aberration maps to
``p0`` exactly.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import fft as sfft

from . import zernike
from .zernike import PupilGrid

logger = logging.getLogger(__name__)

BASIS_FORMAT = "turbsim-psf-basis"
BASIS_VERSION = 1
BASE_SIZE = 33
PUPIL_RESOLUTION = 256
TRUNCATION_FRACTION = 0.5
# Monomials of whitened coefficients: (degree, number of leading eigen-directions).
DEFAULT_FEATURES = ((1, 33), (2, 23), (3, 10), (4, 5))
MAX_FEATURES = 600
HIGHORDER_MODES = tuple(range(zernike.FIRST_HIGHORDER_MODE, zernike.N_MODES + 1))


@dataclass(frozen=True)
class Psf:
    """Nonnegative square kernel, unit energy after normalization."""

    values: np.ndarray = field(repr=False)
    crop_fraction: float = 1.0
    warnings: tuple = ()

    @property
    def size(self) -> int:
        return self.values.shape[0]

    @property
    def energy(self) -> float:
        return float(self.values.sum())


def _check_out_size(out_size: int) -> None:
    if out_size < 1 or out_size % 2 == 0:
        raise ValueError(f"out_size must be a positive odd integer, got {out_size}")


def fft_size(grid: PupilGrid, pixel_scale: float) -> int:
    """Padded transform size giving PSF pixels of ``pixel_scale`` lambda/D."""
    if not pixel_scale > 0:
        raise ValueError("pixel_scale must be positive")
    return int(round(grid.resolution / pixel_scale))


@lru_cache(maxsize=4)
def _pupil_basis(resolution: int, modes: tuple) -> tuple[PupilGrid, np.ndarray]:
    grid = PupilGrid.build(resolution)
    stack = zernike.mode_stack(modes, grid)
    stack.setflags(write=False)
    return grid, stack


def pupil_phase(coeffs, grid: PupilGrid, tilt=None) -> np.ndarray:
    """In-disk phase samples for 33 high-order coefficients plus an optional tilt pair."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (zernike.N_HIGHORDER,):
        raise ValueError(f"expected {zernike.N_HIGHORDER} high-order coefficients, got {coeffs.shape}")
    if not np.all(np.isfinite(coeffs)):
        raise ValueError("coefficients must be finite")
    _, modes = _pupil_basis(grid.resolution, HIGHORDER_MODES)
    phase = coeffs @ modes
    if tilt is not None:
        tilt = np.asarray(tilt, dtype=float)
        if tilt.shape != (2,) or not np.all(np.isfinite(tilt)):
            raise ValueError("tilt must be a finite pair (a2, a3)")
        _, tmodes = _pupil_basis(grid.resolution, (2, 3))
        phase = phase + tilt @ tmodes
    return phase


def phase_to_psf(coeffs, grid: PupilGrid | None = None, out_size: int = BASE_SIZE,
                 pixel_scale: float = 0.25, tilt=None, return_parseval: bool = False):
    """Render the exact PSF of an aberrated circular pupil.

    Parameters
    ----------
    coeffs : (33,) array
        Noll coefficients of modes 4..36 in radians.
    grid : PupilGrid, optional
        Pupil sampling; 256x256 when omitted.
    out_size : int
        Odd side length of the centre crop.
    pixel_scale : float
        PSF pixel pitch in units of lambda/D; sets the zero padding.
    tilt : (2,) array, optional
        Noll 2/3 coefficients. They shift the PSF; the standard pipeline
        leaves them out because tilt is realized by warping.
    return_parseval : bool
        Also return ``(pupil_energy, spectrum_energy)`` before cropping.
    """
    _check_out_size(out_size)
    grid = grid or PupilGrid.build(PUPIL_RESOLUTION)
    if grid.resolution < 4 * out_size:
        raise ValueError(f"pupil resolution {grid.resolution} < 4 * out_size ({4 * out_size})")
    n_fft = fft_size(grid, pixel_scale)
    if n_fft < out_size:
        raise ValueError("padded transform smaller than the requested crop")
    pupil = np.zeros((n_fft, n_fft), dtype=complex)
    n = grid.resolution
    pupil[:n, :n][grid.mask] = np.exp(1j * pupil_phase(coeffs, grid, tilt))
    spectrum = sfft.fftshift(sfft.fft2(pupil, norm="ortho"))
    intensity = spectrum.real**2 + spectrum.imag**2
    total = float(intensity.sum())
    c, h = n_fft // 2, out_size // 2
    crop = intensity[c - h:c + h + 1, c - h:c + h + 1]
    frac = float(crop.sum()) / total
    warnings = ()
    if frac < TRUNCATION_FRACTION:
        msg = f"PSF truncated: crop keeps {100 * frac:.1f}% of the energy"
        logger.warning(msg)
        warnings = (msg,)
    psf = Psf(crop / crop.sum(), frac, warnings)
    if return_parseval:
        return psf, (float(grid.n_inside), total)
    return psf


class PsfRenderer:
    """Batched exact renderer using matrix Fourier transforms.

    Only the ``out_size`` frequencies inside the crop are evaluated, which is
    equivalent to cropping the zero-padded FFT but far cheaper per PSF.
    """

    def __init__(self, out_size: int = BASE_SIZE, pixel_scale: float = 0.25,
                 resolution: int = PUPIL_RESOLUTION):
        _check_out_size(out_size)
        self.grid, self.modes = _pupil_basis(resolution, HIGHORDER_MODES)
        if resolution < 4 * out_size:
            raise ValueError(f"pupil resolution {resolution} < 4 * out_size ({4 * out_size})")
        self.out_size = out_size
        self.pixel_scale = pixel_scale
        n_fft = fft_size(self.grid, pixel_scale)
        h = out_size // 2
        u = np.arange(-h, h + 1)
        # pupil sample i sits at FFT index i, matching phase_to_psf
        self.dft = np.exp(-2j * np.pi * np.outer(u, np.arange(resolution)) / n_fft) / math.sqrt(n_fft)

    def render(self, coeffs: np.ndarray, chunk: int = 64) -> np.ndarray:
        """Unit-energy PSFs for a batch ``(B, 33)`` of coefficient vectors."""
        coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float))
        out = np.empty((len(coeffs), self.out_size, self.out_size))
        n = self.grid.resolution
        A = self.dft
        for lo in range(0, len(coeffs), chunk):
            a = coeffs[lo:lo + chunk]
            pupil = np.zeros((len(a), n, n), dtype=complex)
            pupil[:, self.grid.mask] = np.exp(1j * (a @ self.modes))
            spec = np.einsum("ux,bxy,vy->buv", A, pupil, A, optimize=True)
            inten = spec.real**2 + spec.imag**2
            out[lo:lo + chunk] = inten / inten.sum(axis=(1, 2), keepdims=True)
        return out


# --- symmetry augmentation -------------------------------------------------

def _image_op(q, fx, fy, t, c):
    if fx:
        q = q[..., :, ::-1]
    if fy:
        q = q[..., ::-1, :]
    if t:
        q = np.swapaxes(q, -1, -2)
    if c:
        q = q[..., ::-1, ::-1]
    return q


@lru_cache(maxsize=2)
def _coefficient_maps(resolution: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Signed permutations taking coefficients through x-flip, y-flip and transpose."""
    grid, modes = _pupil_basis(resolution, HIGHORDER_MODES)
    full = np.zeros((len(modes), resolution, resolution))
    full[:, grid.mask] = modes
    gram = modes @ modes.T

    def project(op):
        moved = np.stack([op(z) for z in full])[:, grid.mask]
        m = np.linalg.solve(gram, modes @ moved.T).T
        r = np.round(m)
        if np.abs(m - r).max() > 1e-6:
            raise AssertionError("pupil grid is not symmetric under the dihedral group")
        return r

    return (project(lambda z: z[:, ::-1]), project(lambda z: z[::-1, :]), project(lambda z: z.T))


def symmetry_group(resolution: int = PUPIL_RESOLUTION):
    """All 16 pairs ``(T, op)`` with ``render(a @ T) == op(render(a))``.

    The group is the 8 symmetries of the square lattice times conjugation
    (negating all coefficients rotates the intensity PSF by 180 degrees).
    """
    tx, ty, tt = _coefficient_maps(resolution)
    eye = np.eye(zernike.N_HIGHORDER)
    out = []
    for fx, fy, t, c in itertools.product((0, 1), repeat=4):
        m = eye
        if fx:
            m = m @ tx
        if fy:
            m = m @ ty
        if t:
            m = m @ tt
        if c:
            m = -m
        out.append((m, lambda q, k=(fx, fy, t, c): _image_op(q, *k)))
    return out


# --- features ----------------------------------------------------------------

def _monomials(spec):
    return [c for deg, m in spec for c in itertools.combinations_with_replacement(range(m), deg)]


def n_features(spec=DEFAULT_FEATURES) -> int:
    return len(_monomials(spec))


def features(coeffs, whitening: np.ndarray, spec=DEFAULT_FEATURES) -> np.ndarray:
    """Monomial features of whitened coefficients, shape ``(..., n_features)``.

    ``whitening`` maps coefficients to uncorrelated unit-variance coordinates
    ordered by decreasing variance; ``(d, m)`` in ``spec`` adds all degree-d
    monomials in the first ``m`` coordinates.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    y = coeffs @ whitening
    cols = []
    for deg, m in spec:
        for combo in itertools.combinations_with_replacement(range(m), deg):
            v = y[..., combo[0]]
            for i in combo[1:]:
                v = v * y[..., i]
            cols.append(v)
    return np.stack(cols, axis=-1)


# --- basis -------------------------------------------------------------------

class DegenerateBasisError(ValueError):
    """The sampled PSFs do not span the requested rank."""


@dataclass(frozen=True)
class PsfBasis:
    """Low-rank fast-path model of the PSFs of one turbulence strength.

    ``mean_kernel`` is the diffraction-limited PSF. ``basis_kernels`` holds K
    orthonormal principal components of ``PSF - mean_kernel``. Basis weights
    are ``features(coeffs) @ projector``.
    """

    mean_kernel: np.ndarray = field(repr=False)
    basis_kernels: np.ndarray = field(repr=False)
    projector: np.ndarray = field(repr=False)
    whitening: np.ndarray = field(repr=False)
    feature_spec: tuple
    residuals: dict
    training_profile: dict

    def __post_init__(self):
        # same memory layout whether built or loaded, so results are bit-identical
        for name in ("mean_kernel", "basis_kernels", "projector", "whitening"):
            object.__setattr__(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))

    @property
    def rank(self) -> int:
        return self.basis_kernels.shape[0]

    @property
    def size(self) -> int:
        return self.mean_kernel.shape[0]

    @property
    def residual_bound(self) -> float:
        return self.residuals["bound"]

    def reconstruct(self, weights) -> np.ndarray:
        weights = np.asarray(weights, dtype=float)
        return self.mean_kernel + np.tensordot(weights, self.basis_kernels, axes=(-1, 0))

    def resized(self, target_size: int) -> tuple[np.ndarray, np.ndarray]:
        """Mean and basis kernels mapped to ``target_size`` by the resize operator."""
        r = resize_matrix(self.size, target_size)
        mean = r @ self.mean_kernel @ r.T
        basis = np.einsum("ij,kjl,ml->kim", r, self.basis_kernels, r)
        return mean, basis

    def header(self) -> dict:
        return {
            "format": BASIS_FORMAT,
            "version": BASIS_VERSION,
            "rank": self.rank,
            "size": self.size,
            "feature_spec": [list(s) for s in self.feature_spec],
            "residuals": self.residuals,
            "training_profile": self.training_profile,
        }

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp.npz")
        np.savez(
            tmp,
            header=np.array(json.dumps(self.header(), sort_keys=True)),
            mean_kernel=self.mean_kernel,
            basis_kernels=self.basis_kernels,
            projector=self.projector,
            whitening=self.whitening,
        )
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "PsfBasis":
        with np.load(path, allow_pickle=False) as z:
            head = json.loads(str(z["header"]))
            if head.get("format") != BASIS_FORMAT or head.get("version") != BASIS_VERSION:
                raise ValueError(f"{path} is not a version-{BASIS_VERSION} PSF basis")
            arrays = {k: z[k].copy() for k in ("mean_kernel", "basis_kernels", "projector", "whitening")}
        return cls(
            feature_spec=tuple(tuple(s) for s in head["feature_spec"]),
            residuals=head["residuals"],
            training_profile=head["training_profile"],
            **arrays,
        )


def project_to_basis(coeffs, basis: PsfBasis) -> np.ndarray:
    """Basis weights for coefficient vectors of shape ``(..., 33)``."""
    return features(coeffs, basis.whitening, basis.feature_spec) @ basis.projector


def _relative_errors(rec, ref):
    return np.linalg.norm(rec - ref, axis=-1) / np.linalg.norm(ref, axis=-1)


def build_psf_basis(profile, n_samples: int = 2000, rank: int = 100,
                    rng: np.random.Generator | None = None, *, out_size: int = BASE_SIZE,
                    feature_spec=DEFAULT_FEATURES, augment: bool = True,
                    resolution: int = PUPIL_RESOLUTION) -> PsfBasis:
    """Fit a rank-``rank`` PSF basis and projector for ``profile``'s turbulence strength.

    Draws ``n_samples`` training and ``n_samples // 5`` held-out coefficient
    vectors from the Noll covariance and renders them exactly. Training data
    are augmented by the 16 exact symmetries of the pupil grid. Held-out
    relative L2 errors of the full fast path are stored in ``residuals``.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if n_samples < 10 * rank:
        raise ValueError(f"n_samples ({n_samples}) must be >= 10 * rank ({10 * rank})")
    spec = tuple(tuple(s) for s in feature_spec)
    nf = n_features(spec)
    if nf > MAX_FEATURES:
        raise ValueError(f"feature spec has {nf} features, cap is {MAX_FEATURES}")
    rng = rng if rng is not None else np.random.default_rng(0)

    cov = zernike.noll_covariance(zernike.N_HIGHORDER, profile.d_over_r0)
    ev, vecs = np.linalg.eigh(cov.matrix)
    order = np.argsort(ev)[::-1]
    ev, vecs = ev[order], vecs[:, order]
    whitening = vecs / np.sqrt(ev)

    n_hold = max(n_samples // 5, 1)
    draws = rng.standard_normal((n_samples + n_hold, zernike.N_HIGHORDER)) @ cov.cholesky.T
    renderer = PsfRenderer(out_size, profile.psf_pixel_scale, resolution)
    psfs = renderer.render(draws)
    p0 = renderer.render(np.zeros((1, zernike.N_HIGHORDER)))[0]
    a_tr, a_te = draws[:n_samples], draws[n_samples:]
    p_tr, p_te = psfs[:n_samples], psfs[n_samples:]

    group = symmetry_group(resolution) if augment else [(np.eye(zernike.N_HIGHORDER), lambda q: q)]
    a_aug = np.concatenate([a_tr @ m for m, _ in group])
    d_aug = np.concatenate([op(p_tr) for _, op in group]).reshape(len(a_aug), -1) - p0.ravel()

    gram = d_aug.T @ d_aug
    w, v = np.linalg.eigh(gram)
    w, v = w[::-1], v[:, ::-1]
    if rank > len(w) or not w[rank - 1] > 1e-12 * w[0]:
        raise DegenerateBasisError(
            f"sampled PSF deviations do not span rank {rank} (eigenvalue ratio "
            f"{w[min(rank, len(w)) - 1] / w[0] if w[0] > 0 else 0:.2e})"
        )
    basis = v[:, :rank].T
    basis *= np.sign(basis[np.arange(rank), np.abs(basis).argmax(axis=1)])[:, None]

    targets = d_aug @ basis.T
    feats = features(a_aug, whitening, spec)
    projector, *_ = np.linalg.lstsq(feats, targets, rcond=None)

    flat_te = p_te.reshape(n_hold, -1)
    fast = p0.ravel() + features(a_te, whitening, spec) @ projector @ basis
    err = _relative_errors(fast, flat_te)
    pca = p0.ravel() + ((flat_te - p0.ravel()) @ basis.T) @ basis
    pca_err = _relative_errors(pca, flat_te)
    residuals = {
        "mean": float(err.mean()),
        "p95": float(np.quantile(err, 0.95)),
        "max": float(err.max()),
        # safety factor over the worst held-out case
        "bound": float(2.0 * err.max()),
        "pca_mean": float(pca_err.mean()),
        "n_holdout": int(n_hold),
    }
    provenance = {
        "d_over_r0": float(profile.d_over_r0),
        "psf_pixel_scale": float(profile.psf_pixel_scale),
        "n_samples": int(n_samples),
        "augmented": bool(augment),
        "pupil_resolution": int(resolution),
    }
    logger.info("PSF basis D/r0=%g rank=%d: held-out error mean %.4f max %.4f",
                profile.d_over_r0, rank, residuals["mean"], residuals["max"])
    return PsfBasis(
        p0, basis.reshape(rank, out_size, out_size), projector, whitening, spec,
        residuals, provenance,
    )


def basis_cache_key(profile, n_samples: int, rank: int, seed: int,
                    feature_spec=DEFAULT_FEATURES, out_size: int = BASE_SIZE) -> str:
    """Hash of everything that determines a basis (PSF shape depends only on these)."""
    key = {
        "v": BASIS_VERSION,
        "d_over_r0": float(profile.d_over_r0),
        "psf_pixel_scale": float(profile.psf_pixel_scale),
        "n_samples": int(n_samples),
        "rank": int(rank),
        "seed": int(seed),
        "features": [list(s) for s in feature_spec],
        "size": int(out_size),
        "pupil": PUPIL_RESOLUTION,
    }
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:20]


def load_or_build_basis(profile, cache_dir=None, n_samples: int = 2000, rank: int = 100,
                        seed: int = 0, feature_spec=DEFAULT_FEATURES) -> PsfBasis:
    """Fetch a basis from ``cache_dir`` or build it from stream ``seed``."""
    from .rng import Purpose, stream

    path = None
    if cache_dir is not None:
        key = basis_cache_key(profile, n_samples, rank, seed, feature_spec)
        path = Path(cache_dir) / f"basis_{key}.npz"
        if path.exists():
            return PsfBasis.load(path)
    basis = build_psf_basis(profile, n_samples, rank, stream(seed, Purpose.BASIS),
                            feature_spec=feature_spec)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        basis.save(path)
    return basis


# --- resizing ----------------------------------------------------------------

def resize_matrix(src: int, dst: int) -> np.ndarray:
    """``(dst, src)`` antialiased tent-interpolation matrix with unit column sums.

    Output pixel ``j`` samples input coordinate ``c_j`` with both grids
    centred; the tent is widened by the shrink factor when downsizing. Unit
    column sums make ``R @ K @ R.T`` preserve the total of any kernel ``K``.
    """
    if src == dst:
        return np.eye(src)
    s = dst / src
    width = min(s, 1.0)
    c = (np.arange(dst) - (dst - 1) / 2) / s + (src - 1) / 2
    r = np.maximum(0.0, 1.0 - np.abs(np.arange(src)[None, :] - c[:, None]) * width)
    return r / r.sum(axis=0, keepdims=True)


def resize_kernel(psf, target_size: int) -> Psf:
    """Rescale a kernel to ``target_size`` (odd, 9..33) keeping its energy."""
    values = psf.values if isinstance(psf, Psf) else np.asarray(psf, dtype=float)
    if not isinstance(target_size, (int, np.integer)) or target_size % 2 == 0 or not 9 <= target_size <= 33:
        raise ValueError(f"target_size must be odd in [9, 33], got {target_size}")
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ValueError("kernel must be square")
    energy = values.sum()
    if values.shape[0] == target_size:
        return Psf(values.copy(), getattr(psf, "crop_fraction", 1.0))
    r = resize_matrix(values.shape[0], target_size)
    out = np.maximum(r @ values @ r.T, 0.0)
    out *= energy / out.sum()
    return Psf(out, getattr(psf, "crop_fraction", 1.0))
