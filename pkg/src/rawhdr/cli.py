"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 pipeline error, 3 experiment below threshold.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .fusion import FusionParams, HdrImage, classic_hdr
from .noise_model import NoiseCurve, NoiseEstimationError, estimate_noise_curve
from .pipeline import fuse_raw_stack
from .raw_io import DimensionError, ImageFormatError, StackLoadError, load_pfm_quad, load_stack, save_image, save_stack
from .render import RenderParams, render
from .sim_bench import (EXPERIMENTS, CaptureSpec, SceneSpec, make_scene, moving_square_capture, run_experiment,
                        simulate_capture, textured_capture)

EXIT_OK, EXIT_USAGE, EXIT_PIPELINE, EXIT_FAIL = 0, 1, 2, 3
THREADS_ENV = "RAWHDR_THREADS"
SCENES = ("textured", "moving-square", "ramps", "checkers", "noise-texture")

log = logging.getLogger("rawhdr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad input; usage errors here are status 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _max_coeffs(text: str) -> int | None:
    if text.lower() in ("none", "inf", "all"):
        return None
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a count or 'none', got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError("max-coeffs must be >= 0")
    return value


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return value


def _add_fusion_flags(p: argparse.ArgumentParser) -> None:
    d = FusionParams()
    p.add_argument("--k", type=int, default=d.k, help="patch side in pixels (odd)")
    p.add_argument("--h", type=float, default=d.h, help="similarity parameter")
    p.add_argument("--tau", type=float, default=d.tau, help="principal-value threshold")
    p.add_argument("--K", type=int, default=d.K, help="matched extended patches per group")
    p.add_argument("--radius", type=int, default=d.search_radius, help="search radius in pixels")
    p.add_argument("--stride", type=int, default=d.stride, help="reference patch stride")
    p.add_argument("--max-coeffs", type=_max_coeffs, default=d.max_coeffs,
                   help="cap on kept principal directions, or 'none'")
    p.add_argument("--hdr-exponent", type=int, default=d.hdr_exponent, help="even exponent of the HDR weight")


def _add_render_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tonemap", choices=("gamma", "reinhard"), default="gamma")
    p.add_argument("--no-preview", action="store_true", help="skip the 8-bit preview")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rawhdr", description="Joint denoising and HDR fusion of RAW exposure brackets.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fuse", help="denoise and fuse a bracket into a float HDR map")
    p.add_argument("--stack", required=True, type=Path, help="stack metadata file")
    p.add_argument("--out", required=True, type=Path, help="output PFM path")
    _add_fusion_flags(p)
    p.add_argument("--noise-file", type=Path, help="noise curve JSON (estimated when omitted)")
    p.add_argument("--bins", type=int, default=16, help="intensity bins for noise estimation")
    p.add_argument("--dump-flow", type=Path, metavar="DIR", help="write per-frame flow fields as PFM")
    p.add_argument("--static", action="store_true", help="skip alignment (motion-free stack)")
    p.add_argument("--threads", type=_positive_int, default=_default_threads())
    _add_render_flags(p)

    p = sub.add_parser("classic-hdr", help="per-pixel weighted irradiance average")
    p.add_argument("--stack", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--hdr-exponent", type=int, default=FusionParams().hdr_exponent)
    _add_render_flags(p)

    p = sub.add_parser("estimate-noise", help="fit per-channel noise curves and write them as JSON")
    p.add_argument("--stack", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--bins", type=int, default=16)
    p.add_argument("--patch-size", type=int, default=8)

    p = sub.add_parser("simulate", help="write a synthetic bracket, its metadata and ground truth")
    p.add_argument("--scene", choices=SCENES, default="textured")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=256, help="mosaic side in pixels (even)")

    p = sub.add_parser("experiment", help="run an acceptance scenario")
    p.add_argument("--name", required=True, choices=sorted(EXPERIMENTS))
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("render", help="8-bit preview of a float HDR map")
    p.add_argument("--input", required=True, type=Path, help="mosaic PFM")
    p.add_argument("--out", required=True, type=Path, help="output PPM")
    p.add_argument("--stack", type=Path, help="stack metadata for CFA pattern and color settings")
    p.add_argument("--cfa-pattern", default="RGGB")
    p.add_argument("--tonemap", choices=("gamma", "reinhard"), default="gamma")
    return parser


def fusion_params(args) -> FusionParams:
    return FusionParams(k=args.k, h=args.h, tau=args.tau, K=args.K, search_radius=args.radius,
                        stride=args.stride, max_coeffs=args.max_coeffs, hdr_exponent=args.hdr_exponent)


def _preview(image: HdrImage, out: Path, stack, tonemap: str) -> None:
    params = RenderParams(wb_gains=tuple(stack.wb_gains), srgb_matrix=np.asarray(stack.srgb_matrix),
                          tonemap=tonemap)
    path = out.with_suffix(".ppm")
    save_image(render(image, params), path, "ppm8")
    log.info("preview written to %s", path)


def _cmd_fuse(args) -> int:
    params = fusion_params(args)
    stack = load_stack(args.stack)
    curve = NoiseCurve.load(args.noise_file) if args.noise_file else None
    result = fuse_raw_stack(stack, params, curve, static=args.static, threads=args.threads, bins=args.bins)
    save_image(result.image, args.out, "pfm")
    log.info("fused image written to %s", args.out)
    if args.dump_flow:
        args.dump_flow.mkdir(parents=True, exist_ok=True)
        for i, flow in enumerate(result.aligned.flows):
            if flow is not None and i != stack.reference_index:
                save_image(flow.u, args.dump_flow / f"flow_{i:03d}_u.pfm", "pfm")
                save_image(flow.v, args.dump_flow / f"flow_{i:03d}_v.pfm", "pfm")
    if not args.no_preview:
        _preview(result.image, args.out, stack, args.tonemap)
    return EXIT_OK


def _cmd_classic(args) -> int:
    if args.hdr_exponent < 2 or args.hdr_exponent % 2:
        raise UsageError("--hdr-exponent must be a positive even integer")
    stack = load_stack(args.stack)
    image = classic_hdr(stack, exponent=args.hdr_exponent)
    save_image(image, args.out, "pfm")
    if not args.no_preview:
        _preview(image, args.out, stack, args.tonemap)
    return EXIT_OK


def _cmd_estimate(args) -> int:
    stack = load_stack(args.stack)
    curve = estimate_noise_curve(stack, bins=args.bins, patch_size=args.patch_size)
    curve.save(args.out)
    for name, a, b in zip(("r", "g1", "g2", "b"), curve.a, curve.b):
        print(f"{name} a={a:.6g} b={b:.6g}")
    return EXIT_OK


def simulate_scene(scene: str, seed: int, size: int = 256):
    """Capture for one of the named CLI scenes."""
    if scene == "textured":
        return textured_capture(seed, size)
    if scene == "moving-square":
        return moving_square_capture(seed, size)
    spec = SceneSpec(make_scene(scene, (size, size), seed, 0.03, 1.0), scene)
    return simulate_capture(spec, CaptureSpec(gain=100000.0, seed=seed))


def _cmd_simulate(args) -> int:
    if args.size < 32 or args.size % 2:
        raise UsageError("--size must be an even integer >= 32")
    cap = simulate_scene(args.scene, args.seed, args.size)
    meta = save_stack(cap.stack, args.out)
    save_image(cap.ground_truth, args.out / "ground_truth.pfm", "pfm")
    print(meta)
    return EXIT_OK


def _cmd_experiment(args) -> int:
    report = run_experiment(args.name, args.seed)
    print(report.text())
    return EXIT_OK if report.passed else EXIT_FAIL


def _cmd_render(args) -> int:
    pattern, params = args.cfa_pattern, RenderParams(tonemap=args.tonemap)
    if args.stack:
        stack = load_stack(args.stack)
        pattern = stack.cfa_pattern
        params = RenderParams(wb_gains=tuple(stack.wb_gains), srgb_matrix=np.asarray(stack.srgb_matrix),
                              tonemap=args.tonemap)
    quad = load_pfm_quad(args.input, pattern)
    save_image(render(HdrImage(quad, pattern), params), args.out, "ppm8")
    return EXIT_OK


COMMANDS = {
    "fuse": _cmd_fuse,
    "classic-hdr": _cmd_classic,
    "estimate-noise": _cmd_estimate,
    "simulate": _cmd_simulate,
    "experiment": _cmd_experiment,
    "render": _cmd_render,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "fuse":
            fusion_params(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        parser.print_usage(sys.stderr)
        print(f"rawhdr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:   # --help
        return EXIT_OK if not exc.code else EXIT_USAGE

    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"rawhdr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StackLoadError, NoiseEstimationError, ImageFormatError, DimensionError, OSError, ValueError) as exc:
        print(f"rawhdr: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
