"""Command-line entry point: ``turbsim synth | bench-profile-switch | evaluate``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import correlation, metrics, pipeline


def _size(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 512x512, got {text!r}")
    return h, w


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="turbsim", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="synthesize a degraded dataset from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=_u64, default=0)
    s.add_argument("--parallelism", type=int, default=1)
    s.add_argument("--emit-blur-only", action="store_true", default=None,
                   help="write blur-only frames (overrides the config)")
    s.add_argument("--emit-fields", action="store_true", default=None,
                   help="dump per-frame Zernike fields")
    s.add_argument("--bit-depth", type=int, choices=(8, 16), default=None)
    s.add_argument("--lut-cache", default=None, help="directory for the correlation table")
    s.add_argument("--basis-cache", default=None, help="directory for PSF bases")

    b = sub.add_parser("bench-profile-switch", help="time kernel regeneration for new profiles")
    b.add_argument("--size", type=_size, default=(512, 512))
    b.add_argument("--trials", type=int, default=20)
    b.add_argument("--lut-cache", default=None)
    b.add_argument("--json", action="store_true", help="print the report as JSON")

    e = sub.add_parser("evaluate", help="PSNR/SSIM of test frames against references")
    e.add_argument("--ref", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--ref-subdir", default=None, help="e.g. 'clean' for synth output")
    e.add_argument("--test-subdir", default=None, help="e.g. 'degraded' for synth output")
    e.add_argument("--delimiter", default=",")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "synth":
        try:
            manifest = pipeline.run_dataset_job(
                args.config, args.out, args.seed, args.parallelism,
                lut_cache=args.lut_cache, basis_cache=args.basis_cache,
                emit_blur_only=args.emit_blur_only, emit_fields=args.emit_fields,
                bit_depth=args.bit_depth,
            )
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print(f"{manifest['n_success']} sequences ok, {manifest['n_failure']} failed "
              f"in {manifest['wall_seconds']:.1f} s")
        for e in manifest["sequences"]:
            if e["status"] != "ok":
                print(f"  {e['seq_id']}: {e['error']}", file=sys.stderr)
        return 0 if manifest["n_failure"] == 0 else 1

    if args.command == "bench-profile-switch":
        lut = correlation.load_or_build_lut(args.lut_cache)
        report = pipeline.profile_switch_benchmark(args.size, args.trials, lut)
        print(json.dumps(report) if args.json else pipeline.format_benchmark(report))
        return 0

    report = metrics.evaluate(args.ref, args.test, args.ref_subdir, args.test_subdir)
    report.write(args.report, args.delimiter)
    agg = report.aggregate()
    print("mean " + " ".join(f"{k}={v:.4f}" for k, v in agg.items()))
    return 0


if __name__ == "__main__":
    sys.exit(main())
