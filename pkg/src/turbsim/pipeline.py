"""Dataset synthesis: sequence jobs, batch orchestration and the profile-switch benchmark.

Output layout per sequence::

    <root>/<seq_id>/clean/frame_00000.png
    <root>/<seq_id>/blur_only/frame_00000.png   (optional)
    <root>/<seq_id>/degraded/frame_00000.png
    <root>/<seq_id>/fields/frame_00000.zf       (optional)
    <root>/<seq_id>/meta.json                   (deterministic)
    <root>/<seq_id>/timing.json                 (wall-clock, varies run to run)
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__, correlation, psf
from .degrade import ORDERS, basis_weights, degrade_frame
from .frameio import list_frames, read_image, write_image
from .params import SCENE_KINDS, TurbulenceProfile, sample_profile, validate_profile
from .randfield import FieldGenerator, seed_chain
from .rng import Purpose, derive_seed, stream

logger = logging.getLogger(__name__)

STATIC_FRAMES = 50
MAX_DYNAMIC_FRAMES = 120
FRAME_NAME = "frame_{:05d}"


@dataclass(frozen=True)
class BasisSettings:
    n_samples: int = 2000
    rank: int = 100
    seed: int = 0
    cache_dir: str | None = None


@dataclass(frozen=True)
class SequenceJob:
    """One clean source turned into a degraded / blur-only / clean triple.

    ``source`` is an image (replicated ``frame_count`` times) or a directory
    of frames (first ``frame_count`` frames, at most 120).
    """

    source: str
    frame_count: int
    profile: TurbulenceProfile
    output_root: str
    seq_id: str
    emit_blur_only: bool = True
    emit_field_dumps: bool = False
    bit_depth: int = 8
    order: str = "blur-warp"
    basis: BasisSettings = BasisSettings()

    @property
    def output_dir(self) -> Path:
        return Path(self.output_root) / self.seq_id


def _load_clean(job: SequenceJob) -> list[np.ndarray]:
    src = Path(job.source)
    if src.is_dir():
        files = list_frames(src)[: min(job.frame_count, MAX_DYNAMIC_FRAMES)]
        frames = [read_image(p) for p in files]
        if any(f.shape != frames[0].shape for f in frames):
            raise ValueError(f"frames in {src} differ in size")
        return frames
    img = read_image(src)
    return [img] * job.frame_count


def synthesize_sequence(job: SequenceJob, lut: correlation.CorrelationLut) -> dict:
    """Render and write one sequence; returns the manifest entry.

    Files are written to a scratch directory that is renamed into place only
    after the whole sequence succeeded.
    """
    if job.frame_count < 1:
        raise ValueError("frame_count must be >= 1")
    if job.order not in ORDERS:
        raise ValueError(f"order must be one of {ORDERS}")
    problems = validate_profile(job.profile)
    if problems:
        raise ValueError("invalid profile: " + "; ".join(problems))
    timing = {}
    t0 = time.perf_counter()
    clean = _load_clean(job)
    h, w = clean[0].shape[:2]
    timing["load"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    gen = FieldGenerator(job.profile, (h, w), lut)
    timing["kernels"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    b = job.basis
    basis = psf.load_or_build_basis(job.profile, b.cache_dir, b.n_samples, b.rank, b.seed)
    timing["basis"] = time.perf_counter() - t0

    final = job.output_dir
    scratch = final.with_name(final.name + ".partial")
    if scratch.exists():
        shutil.rmtree(scratch)
    subdirs = ["clean", "degraded"] + (["blur_only"] if job.emit_blur_only else []) \
        + (["fields"] if job.emit_field_dumps else [])
    for d in subdirs:
        (scratch / d).mkdir(parents=True)

    ext = ".png"
    seed_t = field_t = degrade_t = write_t = 0.0
    master = job.profile.master_seed
    chain = seed_chain(gen, job.profile.temporal_alpha, master, len(clean))
    for t, frame in enumerate(clean):
        t0 = time.perf_counter()
        seed = next(chain)
        t1 = time.perf_counter()
        zf = gen.generate(seed)
        weights = basis_weights(zf.highorder, basis)
        t2 = time.perf_counter()
        blur_only, degraded = degrade_frame(
            frame, zf, basis, job.profile, stream(master, Purpose.NOISE, t), job.order, weights
        )
        t3 = time.perf_counter()
        name = FRAME_NAME.format(t)
        write_image(scratch / "clean" / (name + ext), frame, job.bit_depth)
        write_image(scratch / "degraded" / (name + ext), degraded, job.bit_depth)
        if job.emit_blur_only:
            write_image(scratch / "blur_only" / (name + ext), blur_only, job.bit_depth)
        if job.emit_field_dumps:
            zf.dump(scratch / "fields" / (name + ".zf"))
        t4 = time.perf_counter()
        seed_t += t1 - t0
        field_t += t2 - t1
        degrade_t += t3 - t2
        write_t += t4 - t3
    timing.update(seeds=seed_t, fields=field_t, degrade=degrade_t, write=write_t)

    meta = {
        "seq_id": job.seq_id,
        "simulator_version": __version__,
        "source": str(job.source),
        "frame_count": len(clean),
        "height": h,
        "width": w,
        "order": job.order,
        "bit_depth": job.bit_depth,
        "profile": job.profile.to_dict(),
        "profile_id": job.profile.profile_id,
        "master_seed": master,
        "warnings": list(gen.warnings),
        "clamped_spectrum_fraction": gen.clamped_fractions,
        "basis": {
            "rank": basis.rank,
            "n_samples": b.n_samples,
            "seed": b.seed,
            "residuals": basis.residuals,
        },
        "outputs": sorted(str(p.relative_to(scratch)) for p in scratch.rglob("*") if p.is_file())
        + ["meta.json"],
    }
    (scratch / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    (scratch / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    if final.exists():
        shutil.rmtree(final)
    os.replace(scratch, final)
    return {
        "seq_id": job.seq_id,
        "status": "ok",
        "source": str(job.source),
        "profile_id": job.profile.profile_id,
        "master_seed": master,
        "outputs": [f"{job.seq_id}/{p}" for p in meta["outputs"]],
        "timing": timing,
    }


# --- dataset jobs --------------------------------------------------------------

@dataclass
class DatasetConfig:
    """Parsed dataset document.

    Keys: ``scene_kind``, ``sources`` (list, relative to the config file),
    ``frames``, ``emit_blur_only``, ``emit_fields``, ``bit_depth``, ``order``,
    ``profile`` (overrides applied to every sampled profile) and ``basis``
    (``n_samples``, ``rank``, ``seed``).
    """

    sources: list
    scene_kind: str = "static"
    frames: int = STATIC_FRAMES
    emit_blur_only: bool = True
    emit_fields: bool = False
    bit_depth: int = 8
    order: str = "blur-warp"
    profile: dict = field(default_factory=dict)
    basis: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, data: dict, base_dir=None) -> "DatasetConfig":
        if not isinstance(data, dict):
            raise ValueError("dataset config must be a mapping")
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "sources" not in data:
            raise ValueError("config needs a 'sources' list")
        cfg = cls(**data)
        if not isinstance(cfg.sources, list) or not cfg.sources:
            raise ValueError("source list is empty")
        if cfg.scene_kind not in SCENE_KINDS:
            raise ValueError(f"scene_kind must be one of {SCENE_KINDS}")
        if not isinstance(cfg.frames, int) or cfg.frames < 1:
            raise ValueError("frames must be a positive integer")
        if cfg.bit_depth not in (8, 16):
            raise ValueError("bit_depth must be 8 or 16")
        if cfg.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}")
        unknown_b = set(cfg.basis) - {"n_samples", "rank", "seed"}
        if unknown_b:
            raise ValueError(f"unknown basis keys: {sorted(unknown_b)}")
        TurbulenceProfile.from_dict({"aperture_d": 1, "d_over_r0": 1, "distance": 1,
                                     "beta_highorder": 1, **cfg.profile})
        if base_dir is not None:
            cfg.sources = [str((Path(base_dir) / s).resolve()) if not os.path.isabs(s) else s
                           for s in cfg.sources]
        return cfg

    @classmethod
    def load(cls, path) -> "DatasetConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh)
        return cls.from_mapping(data, Path(path).parent)


def plan_jobs(cfg: DatasetConfig, out_root, dataset_seed: int, basis_cache=None) -> list[SequenceJob]:
    """One job per source; profiles and seeds depend only on the source ordinal."""
    frames = cfg.frames if cfg.scene_kind == "static" else min(cfg.frames, MAX_DYNAMIC_FRAMES)
    basis = BasisSettings(cache_dir=str(basis_cache) if basis_cache else None, **cfg.basis)
    jobs = []
    for i, src in enumerate(cfg.sources):
        profile = sample_profile(
            cfg.scene_kind,
            stream(dataset_seed, Purpose.PROFILE, i),
            master_seed=derive_seed(dataset_seed, Purpose.SEQUENCE, i),
            **cfg.profile,
        )
        jobs.append(SequenceJob(
            source=str(src), frame_count=frames, profile=profile, output_root=str(out_root),
            seq_id=f"{i:05d}", emit_blur_only=cfg.emit_blur_only, emit_field_dumps=cfg.emit_fields,
            bit_depth=cfg.bit_depth, order=cfg.order, basis=basis,
        ))
    return jobs


def _run_one(job: SequenceJob, lut) -> dict:
    try:
        return synthesize_sequence(job, lut)
    except Exception as exc:  # isolate per-sequence failures
        logger.error("sequence %s failed: %s", job.seq_id, exc)
        partial = job.output_dir.with_name(job.seq_id + ".partial")
        shutil.rmtree(partial, ignore_errors=True)
        return {
            "seq_id": job.seq_id,
            "status": "failed",
            "source": str(job.source),
            "error": f"{type(exc).__name__}: {exc}",
            "traceback": traceback.format_exc(limit=5),
        }


def run_dataset_job(config, out_root, dataset_seed: int = 0, parallelism: int = 1,
                    lut_cache=None, basis_cache=None, **overrides) -> dict:
    """Synthesize every sequence of a dataset config; returns the manifest.

    ``config`` is a path or a :class:`DatasetConfig`. Keyword overrides
    (e.g. ``emit_blur_only=True``) replace config fields. Manifest lines are
    appended to ``manifest.jsonl`` as sequences finish and the sorted summary
    is written to ``manifest.json`` at the end.
    """
    cfg = config if isinstance(config, DatasetConfig) else DatasetConfig.load(config)
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    out_root = Path(out_root)
    lut = correlation.load_or_build_lut(lut_cache)
    if basis_cache is None:
        basis_cache = Path(lut_cache) if lut_cache else correlation.default_cache_dir()
    jobs = plan_jobs(cfg, out_root, dataset_seed, basis_cache)
    out_root.mkdir(parents=True, exist_ok=True)
    log_path = out_root / "manifest.jsonl"
    log_path.write_text("")

    t0 = time.perf_counter()
    entries = []

    def record(entry):
        entries.append(entry)
        with open(log_path, "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    if parallelism == 1:
        for job in jobs:
            record(_run_one(job, lut))
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            futures = [pool.submit(_run_one, job, lut) for job in jobs]
            for fut in futures:
                record(fut.result())

    entries.sort(key=lambda e: e["seq_id"])
    n_ok = sum(e["status"] == "ok" for e in entries)
    manifest = {
        "simulator_version": __version__,
        "dataset_seed": int(dataset_seed),
        "scene_kind": cfg.scene_kind,
        "parallelism": parallelism,
        "n_success": n_ok,
        "n_failure": len(entries) - n_ok,
        "wall_seconds": time.perf_counter() - t0,
        "sequences": entries,
    }
    (out_root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# --- benchmark -----------------------------------------------------------------

def profile_switch_benchmark(size=(512, 512), n_trials: int = 20, lut=None, seed: int = 0) -> dict:
    """Time the rebuild of all correlation kernels and spectral factors for fresh profiles."""
    h, w = size
    if h < 64 or w < 64:
        raise ValueError("benchmark size must be at least 64x64")
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    lut = lut if lut is not None else correlation.load_or_build_lut()
    rng = stream(seed, Purpose.PROFILE)
    profiles = [sample_profile(SCENE_KINDS[i % 2], rng) for i in range(n_trials + 1)]
    FieldGenerator(profiles[0], (h, w), lut)  # warm-up
    times = []
    for p in profiles[1:]:
        t0 = time.perf_counter()
        FieldGenerator(p, (h, w), lut)
        times.append(time.perf_counter() - t0)
    ms = np.array(times) * 1e3
    return {
        "height": h,
        "width": w,
        "trials": n_trials,
        "mean_ms": float(ms.mean()),
        "p95_ms": float(np.quantile(ms, 0.95)),
        "min_ms": float(ms.min()),
        "max_ms": float(ms.max()),
    }


def format_benchmark(report: dict) -> str:
    return (
        f"profile-switch {report['height']}x{report['width']}: "
        f"mean {report['mean_ms']:.1f} ms, p95 {report['p95_ms']:.1f} ms "
        f"({report['trials']} trials)"
    )
