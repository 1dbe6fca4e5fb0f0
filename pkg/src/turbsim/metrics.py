"""PSNR and SSIM in RGB and luma, plus a directory-level evaluation harness."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .frameio import IMAGE_SUFFIXES, read_image

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5, i.e. 11 taps
SSIM_K1, SSIM_K2 = 0.01, 0.03
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def _check_pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _ssim_plane(a, b, peak):
    blur = lambda v: ndimage.gaussian_filter(v, SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    r = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    return float((num / den)[r:-r, r:-r].mean())


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean structural similarity with an 11-tap Gaussian window (sigma 1.5).

    Local statistics use population moments; the map is averaged after
    dropping a border of one window radius. Channels are averaged.
    """
    a, b = _check_pair(a, b)
    if min(a.shape[:2]) < 11:
        raise ValueError("image smaller than the 11x11 SSIM window")
    if a.ndim == 2:
        return _ssim_plane(a, b, peak)
    return float(np.mean([_ssim_plane(a[..., c], b[..., c], peak) for c in range(a.shape[-1])]))


def to_luma(img) -> np.ndarray:
    """BT.601 full-range luma ``0.299 R + 0.587 G + 0.114 B``."""
    img = np.asarray(img, dtype=float)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {img.shape}")
    return img @ LUMA_WEIGHTS


@dataclass
class FrameScores:
    psnr: float
    ssim: float
    psnr_y: float
    ssim_y: float


def score_frame(ref, test, peak: float = 1.0) -> FrameScores:
    ref, test = _check_pair(ref, test)
    if ref.ndim == 3 and ref.shape[-1] == 3:
        ry, ty = to_luma(ref), to_luma(test)
    else:
        ry, ty = ref, test
    return FrameScores(psnr(ref, test, peak), ssim(ref, test, peak), psnr(ry, ty, peak), ssim(ry, ty, peak))


METRIC_NAMES = ("psnr", "ssim", "psnr_y", "ssim_y")


@dataclass
class MetricReport:
    """Per-frame scores grouped by sequence; means over frames, then sequences."""

    frames: dict = field(default_factory=dict)  # sequence id -> list[FrameScores]

    def sequence_means(self) -> dict:
        return {
            seq: {m: float(np.mean([getattr(f, m) for f in scores])) for m in METRIC_NAMES}
            for seq, scores in sorted(self.frames.items())
        }

    def aggregate(self) -> dict:
        means = self.sequence_means()
        return {m: float(np.mean([v[m] for v in means.values()])) for m in METRIC_NAMES}

    def write(self, path, delimiter: str = ",") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter=delimiter)
            w.writerow(["sequence", *METRIC_NAMES])
            for seq, vals in self.sequence_means().items():
                w.writerow([seq, *(f"{vals[m]:.6f}" for m in METRIC_NAMES)])
            agg = self.aggregate()
            w.writerow(["mean", *(f"{agg[m]:.6f}" for m in METRIC_NAMES)])


def _frames(d: Path):
    return {p.name: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def _sequences(root: Path, sub: str | None):
    """Map sequence id -> frame directory; a directory of frames is one sequence."""
    if sub is None and _frames(root):
        return {root.name: root}
    out = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        fd = d / sub if sub else d
        if fd.is_dir() and _frames(fd):
            out[d.name] = fd
    return out


def evaluate(ref_root, test_root, ref_subdir: str | None = None, test_subdir: str | None = None,
             peak: float = 1.0) -> MetricReport:
    """Score every frame of ``test_root`` against the same-named frame of ``ref_root``.

    Frames are compared as stored (gamma-encoded), scaled to [0, 1].
    """
    ref_seqs = _sequences(Path(ref_root), ref_subdir)
    test_seqs = _sequences(Path(test_root), test_subdir)
    common = sorted(set(ref_seqs) & set(test_seqs))
    if not common:
        raise ValueError("no sequences shared between reference and test roots")
    report = MetricReport()
    for seq in common:
        rf, tf = _frames(ref_seqs[seq]), _frames(test_seqs[seq])
        names = sorted(set(rf) & set(tf))
        if not names:
            raise ValueError(f"sequence {seq}: no matching frame names")
        report.frames[seq] = [
            score_frame(read_image(rf[n], linear=False), read_image(tf[n], linear=False), peak)
            for n in names
        ]
    return report
