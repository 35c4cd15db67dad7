"""PSNR of the fused result with each weight factor switched off in turn."""

import argparse

from rawhdr.fusion import FusionParams, fuse_stack
from rawhdr.noise_model import estimate_noise_curve
from rawhdr.pipeline import align, stabilize_stack
from rawhdr.sim_bench import moving_square_capture, psnr, region_mse, textured_capture

VARIANTS = {
    "all": {},
    "no-sim": {"use_sim": False},
    "no-hdr": {"use_hdr": False},
    "no-snr": {"use_snr": False},
    "barycenter": {"max_coeffs": 0},
    "unlimited": {"max_coeffs": None},
}


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--scene", choices=("textured", "moving-square"), default="moving-square")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    cap = (textured_capture if args.scene == "textured" else moving_square_capture)(args.seed)
    stack, truth = cap.stack, cap.ground_truth.channels
    curve = estimate_noise_curve(stack)
    aligned = align(stack, stabilize_stack(stack, curve))
    for name, overrides in VARIANTS.items():
        img = fuse_stack(aligned, curve, FusionParams(**overrides)).channels
        line = f"{name:11s} psnr {psnr(img, truth, float(truth.max())):7.2f} dB"
        if cap.motion_region is not None:
            line += f"  motion-region mse {region_mse(img, truth, cap.motion_region):10.2f}"
        print(line, flush=True)


if __name__ == "__main__":
    main()
