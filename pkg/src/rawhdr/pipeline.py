"""End-to-end fusion of a RawStack: noise estimation through the inverse transforms."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .flow import CONSISTENCY_EPS, FLOW_ITERS, FLOW_LEVELS, AlignedStack, align_stack, assume_static
from .fusion import FusionParams, HdrImage, fuse_stack
from .noise_model import NoiseCurve, estimate_noise_curve
from .raw_io import RawStack
from .stabilize import StabilizedFrame, normalize_exposure, vst_forward

log = logging.getLogger(__name__)


@dataclass
class FusionResult:
    image: HdrImage
    aligned: AlignedStack
    curve: NoiseCurve


def stabilize_stack(stack: RawStack, curve: NoiseCurve, sigma0: float = 1.0) -> list[StabilizedFrame]:
    """Exposure-normalize every frame to the reference and stabilize with the shared curve."""
    tau_ref = stack.exposure_times[stack.reference_index]
    return [vst_forward(normalize_exposure(f, tau_ref, stack.black_offset), curve, sigma0, tau_ref)
            for f in stack.frames]


def align(stack: RawStack, stabilized: list[StabilizedFrame], *, static: bool = False,
          eps: float = CONSISTENCY_EPS, levels: int = FLOW_LEVELS, iters: int = FLOW_ITERS,
          threads: int = 1) -> AlignedStack:
    kw = dict(black_offset=stack.black_offset, white_level=stack.white_level)
    if static:
        return assume_static(stabilized, stack.frames, stack.reference_index, **kw)
    return align_stack(stabilized, stack.frames, stack.reference_index, eps,
                       levels=levels, iters=iters, threads=threads, **kw)


def fuse_raw_stack(stack: RawStack, params: FusionParams = FusionParams(), curve: NoiseCurve | None = None,
                   *, static: bool = False, threads: int = 1, bins: int = 16, patch_size: int = 8,
                   eps: float = CONSISTENCY_EPS, levels: int = FLOW_LEVELS,
                   iters: int = FLOW_ITERS) -> FusionResult:
    if curve is None:
        curve = estimate_noise_curve(stack, bins, patch_size)
        log.info("estimated noise curve a=%s b=%s", curve.a.round(4), curve.b.round(3))
    stabilized = stabilize_stack(stack, curve, params.sigma0)
    aligned = align(stack, stabilized, static=static, eps=eps, levels=levels, iters=iters, threads=threads)
    image = fuse_stack(aligned, curve, params, threads=threads, cfa_pattern=stack.cfa_pattern)
    return FusionResult(image, aligned, curve)
