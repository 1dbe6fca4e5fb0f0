"""Turbulence profiles and the stochastic parameter sampler."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import yaml

from .correlation import I0_AT_ZERO, TILT_PREFACTOR

SCENE_KINDS = ("static", "dynamic")
KERNEL_SIZE_RANGE = (9, 33)
NOISE_VARIANCE_MAX = 4e-4
BASE_KERNEL_SIZE = 33

# Tilt calibration: per-axis RMS displacement of 1.5 px at D/r0 = 1.5 with
# 33x33 kernels; smaller kernels shrink displacements in proportion.
_CALIB_D_OVER_R0 = 1.5
_CALIB_RMS_PX = 1.5
TILT_GAIN_33 = _CALIB_RMS_PX / math.sqrt(TILT_PREFACTOR * I0_AT_ZERO * _CALIB_D_OVER_R0 ** (5 / 3))


def default_tilt_gain(kernel_size: int) -> float:
    return TILT_GAIN_33 * kernel_size / BASE_KERNEL_SIZE


@dataclass(frozen=True)
class TurbulenceProfile:
    """All physical and statistical knobs of one simulated sequence.

    Lengths are in meters. ``beta_highorder`` is per pixel, ``tilt_gain`` in
    pixels per unit tilt coefficient (derived from ``kernel_size`` when left
    as ``None``), ``psf_pixel_scale`` is the PSF pixel pitch in units of
    lambda/D, and ``pixel_pitch_over_d`` the image pixel pitch in aperture
    diameters used by the tilt correlation (overridden by ``scene_width``).
    """

    aperture_d: float
    d_over_r0: float
    distance: float
    beta_highorder: float
    kernel_size: int = 33
    temporal_alpha: float = 0.5
    noise_variance: float = 0.0
    tilt_gain: float | None = None
    wavelength: float = 525e-9
    scene_kind: str = "static"
    master_seed: int = 0
    pixel_pitch_over_d: float = 0.05
    scene_width: float | None = None
    psf_pixel_scale: float = 0.25

    def __post_init__(self):
        if self.tilt_gain is None:
            object.__setattr__(self, "tilt_gain", default_tilt_gain(self.kernel_size))

    @property
    def r0(self) -> float:
        return self.aperture_d / self.d_over_r0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TurbulenceProfile":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown profile fields: {sorted(unknown)}")
        return cls(**data)

    def to_text(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_text(cls, text: str) -> "TurbulenceProfile":
        return cls.from_dict(yaml.safe_load(text))

    @property
    def profile_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "TurbulenceProfile":
        if "kernel_size" in changes and "tilt_gain" not in changes:
            changes["tilt_gain"] = None
        return dataclasses.replace(self, **changes)


def pixel_pitch_over_d(profile: TurbulenceProfile, image_width: int) -> float:
    """Image pixel pitch in aperture diameters, as used by the tilt kernel."""
    if profile.scene_width is not None:
        return profile.scene_width / image_width / profile.aperture_d
    return profile.pixel_pitch_over_d


def validate_profile(p: TurbulenceProfile) -> list[str]:
    """Return every violated invariant (empty list when valid)."""
    v = []

    def positive(name):
        val = getattr(p, name)
        if not (isinstance(val, (int, float)) and math.isfinite(val) and val > 0):
            v.append(f"{name} must be a positive finite number, got {val!r}")

    for name in ("aperture_d", "d_over_r0", "distance", "beta_highorder", "wavelength",
                 "pixel_pitch_over_d", "psf_pixel_scale", "tilt_gain"):
        positive(name)
    if p.scene_width is not None and not p.scene_width > 0:
        v.append(f"scene_width must be positive when set, got {p.scene_width!r}")
    k = p.kernel_size
    if not isinstance(k, (int, np.integer)):
        v.append(f"kernel_size must be an integer, got {k!r}")
    else:
        if k % 2 == 0:
            v.append(f"kernel_size must be odd, got {k}")
        if not KERNEL_SIZE_RANGE[0] <= k <= KERNEL_SIZE_RANGE[1]:
            v.append(f"kernel_size must lie in [{KERNEL_SIZE_RANGE[0]}, {KERNEL_SIZE_RANGE[1]}], got {k}")
    if not 0.0 <= p.temporal_alpha <= 1.0:
        v.append(f"temporal_alpha must lie in [0, 1], got {p.temporal_alpha}")
    if not 0.0 <= p.noise_variance <= NOISE_VARIANCE_MAX:
        v.append(f"noise_variance must lie in [0, {NOISE_VARIANCE_MAX}], got {p.noise_variance}")
    if p.scene_kind not in SCENE_KINDS:
        v.append(f"scene_kind must be one of {SCENE_KINDS}, got {p.scene_kind!r}")
    if not (isinstance(p.master_seed, (int, np.integer)) and 0 <= p.master_seed < 2**64):
        v.append(f"master_seed must be a 64-bit unsigned integer, got {p.master_seed!r}")
    return v


class StrengthRow(NamedTuple):
    probability: float
    kernel_sizes: tuple
    betas: tuple
    aperture: tuple  # U(lo, hi), meters
    d_over_r0: tuple
    distance: tuple  # U(lo, hi), meters
    alpha: tuple  # U(lo, hi)


# Rows ordered weak -> strong turbulence.
SAMPLING_TABLE = {
    "static": (
        StrengthRow(0.2, (33,), (0.05, 0.1, 0.2), (0.001, 0.005), (0.5, 1, 1.2, 1.5), (100, 400), (0.2, 0.6)),
        StrengthRow(0.4, (33,), (0.01, 0.02, 0.05, 0.1), (0.04, 0.1), (1, 1.5, 2), (400, 800), (0.2, 0.6)),
        StrengthRow(0.4, (33,), (0.01, 0.02, 0.05, 0.1), (0.1, 0.2), (1.5, 2, 3), (800, 1500), (0.2, 0.6)),
    ),
    "dynamic": (
        StrengthRow(1 / 3, (9, 13, 15, 21), (0.02, 0.05, 0.1, 0.2), (0.001, 0.005), (0.3, 0.6, 1, 1.2), (50, 400), (0.4, 0.8)),
        StrengthRow(1 / 3, (11, 17, 25, 33), (0.02, 0.05, 0.1, 0.2), (0.04, 0.1), (0.3, 1, 1.5), (400, 800), (0.8, 0.95)),
        StrengthRow(1 / 3, (15, 21, 27, 33), (0.02, 0.05, 0.1, 0.2), (0.1, 0.2), (1, 1.5, 2, 2.5), (800, 2000), (0.88, 0.95)),
    ),
}


def sample_profile(scene_kind: str, rng: np.random.Generator, **overrides) -> TurbulenceProfile:
    """Draw one profile: pick a strength row, then sample every column."""
    if scene_kind not in SAMPLING_TABLE:
        raise ValueError(f"scene_kind must be one of {SCENE_KINDS}, got {scene_kind!r}")
    rows = SAMPLING_TABLE[scene_kind]
    row = rows[rng.choice(len(rows), p=[r.probability for r in rows])]
    kernel = int(rng.choice(row.kernel_sizes))
    values = dict(
        kernel_size=kernel,
        beta_highorder=float(rng.choice(row.betas)),
        aperture_d=float(rng.uniform(*row.aperture)),
        d_over_r0=float(rng.choice(row.d_over_r0)),
        distance=float(rng.uniform(*row.distance)),
        temporal_alpha=float(rng.uniform(*row.alpha)),
        # (0, max]: uniform on [0, 1) reflected
        noise_variance=float(NOISE_VARIANCE_MAX * (1.0 - rng.random())),
        scene_kind=scene_kind,
        master_seed=int(rng.integers(0, 2**63, dtype=np.int64)),
    )
    values.update(overrides)
    return TurbulenceProfile(**values)


def strength_row_index(profile: TurbulenceProfile) -> int | None:
    """Index of the table row ``profile`` could have been drawn from, if unique."""
    hits = [
        i for i, r in enumerate(SAMPLING_TABLE.get(profile.scene_kind, ()))
        if r.aperture[0] <= profile.aperture_d <= r.aperture[1]
    ]
    return hits[0] if len(hits) == 1 else None
