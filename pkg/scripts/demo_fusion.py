"""Simulate a bracket, fuse it, and compare against the reference frame and classic HDR.

Writes the stack, the fused and classic maps, and their previews to --out.
"""

import argparse
from pathlib import Path

import numpy as np

from rawhdr.fusion import FusionParams, classic_hdr
from rawhdr.pipeline import fuse_raw_stack
from rawhdr.raw_io import save_image, save_stack
from rawhdr.render import RenderParams, render
from rawhdr.sim_bench import moving_square_capture, psnr, region_mse, textured_capture


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--scene", choices=("textured", "moving-square"), default="textured")
    parser.add_argument("--size", type=int, default=256)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--out", type=Path, default=Path("demo_out"))
    args = parser.parse_args()

    make = textured_capture if args.scene == "textured" else moving_square_capture
    cap = make(args.seed, args.size)
    stack, truth = cap.stack, cap.ground_truth.channels
    peak = float(truth.max())
    save_stack(stack, args.out)

    ref = stack.reference.channels - stack.black_offset
    classic = classic_hdr(stack)
    result = fuse_raw_stack(stack, FusionParams(), threads=args.threads)
    print(f"noise curve a={np.round(result.curve.a, 3)} b={np.round(result.curve.b, 2)}")
    print(f"valid after alignment: {np.round(result.aligned.masks.mean(axis=(1, 2)), 3)}")
    for label, img in (("reference", ref), ("classic", classic.channels), ("fused", result.image.channels)):
        line = f"{label:10s} psnr {psnr(img, truth, peak):7.2f} dB"
        if cap.motion_region is not None:
            line += f"   motion-region mse {region_mse(img, truth, cap.motion_region):10.2f}"
        print(line)

    save_image(result.image, args.out / "fused.pfm", "pfm")
    save_image(classic, args.out / "classic.pfm", "pfm")
    for label, img in (("fused", result.image), ("classic", classic), ("truth", cap.ground_truth)):
        save_image(render(img, RenderParams(tonemap="reinhard")), args.out / f"{label}.ppm", "ppm8")
    print(f"outputs in {args.out}")


if __name__ == "__main__":
    main()
