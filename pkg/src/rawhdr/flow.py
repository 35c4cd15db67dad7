"""Dense motion between frames, reciprocity masks and warping onto the reference grid.

Flow convention: ``target(x) ~= source(x + flow(x))``, with ``u`` the
horizontal (column) and ``v`` the vertical (row) displacement.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .colorspace import luma

log = logging.getLogger(__name__)

FLOW_LEVELS = 5
FLOW_ITERS = 100
FLOW_WARPS = 3
# smoothness weight, relative to Y rescaled to [0, 255]
FLOW_ALPHA = 15.0
CONSISTENCY_EPS = 1.0
SATURATION_MARGIN = 0.98

_AVG_KERNEL = np.array([[1, 2, 1], [2, 0, 2], [1, 2, 1]], dtype=np.float64) / 12.0


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    source_index: int = -1
    target_index: int = -1

    @classmethod
    def zeros(cls, shape, source_index: int = -1, target_index: int = -1) -> "FlowField":
        return cls(np.zeros(shape), np.zeros(shape), source_index, target_index)

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape


@dataclass
class AlignedStack:
    """Stabilized and original frames resampled on the reference grid.

    ``frames`` and ``originals`` are (N, 4, h, w); ``masks`` is (N, h, w).
    """

    frames: np.ndarray
    originals: np.ndarray
    masks: np.ndarray
    exposure_times: list[float]
    stabilized_sigmas: list[float]
    reference_index: int
    black_offset: float
    white_level: float
    flows: list[FlowField | None] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def tau_ref(self) -> float:
        return self.exposure_times[self.reference_index]


def _sample(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return ndimage.map_coordinates(img, [rows, cols], order=1, mode="nearest")


def _smooth(img: np.ndarray) -> np.ndarray:
    return ndimage.gaussian_filter(img, 1.0, mode="nearest")


def _pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [img]
    for _ in range(levels - 1):
        prev = pyr[-1]
        if min(prev.shape) < 8:
            break
        pyr.append(_smooth(prev)[::2, ::2])
    return pyr


def _resize_flow(u: np.ndarray, shape) -> np.ndarray:
    factors = (shape[0] / u.shape[0], shape[1] / u.shape[1])
    return ndimage.zoom(u, factors, order=1, mode="nearest", grid_mode=True)


def _horn_schunck_level(src, tgt, u, v, alpha2, iters, warps, src_conf=None, tgt_conf=None):
    rows, cols = np.indices(src.shape, dtype=np.float64)
    src_s, tgt_s = _smooth(src), _smooth(tgt)
    for _ in range(warps):
        warped = _sample(src_s, rows + v, cols + u)
        gy, gx = np.gradient(warped)
        it = warped - tgt_s
        if src_conf is not None:
            # drop the data term where either frame is unreliable (e.g. clipped)
            c = tgt_conf * (_sample(src_conf, rows + v, cols + u) > 0.999)
            gx, gy, it = gx * c, gy * c, it * c
        u0, v0 = u.copy(), v.copy()
        denom = alpha2 + gx**2 + gy**2
        for _ in range(iters):
            ub = ndimage.convolve(u, _AVG_KERNEL, mode="nearest")
            vb = ndimage.convolve(v, _AVG_KERNEL, mode="nearest")
            r = (gx * (ub - u0) + gy * (vb - v0) + it) / denom
            u = ub - gx * r
            v = vb - gy * r
    return u, v


def estimate_flow(source_y: np.ndarray, target_y: np.ndarray, levels: int = FLOW_LEVELS,
                  iters: int = FLOW_ITERS, alpha: float = FLOW_ALPHA, warps: int = FLOW_WARPS,
                  source_valid: np.ndarray | None = None, target_valid: np.ndarray | None = None) -> FlowField:
    """Coarse-to-fine Horn-Schunck with re-warping of the source at every level.

    ``source_valid``/``target_valid`` flag pixels whose brightness can be
    trusted; elsewhere only the smoothness term drives the flow.
    """
    if source_y.shape != target_y.shape:
        raise ValueError("flow planes must share a shape")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    lo = min(source_y.min(), target_y.min())
    span = max(source_y.max(), target_y.max()) - lo
    scale = 255.0 / span if span > 0 else 1.0
    src = (np.asarray(source_y, dtype=np.float64) - lo) * scale
    tgt = (np.asarray(target_y, dtype=np.float64) - lo) * scale

    src_pyr, tgt_pyr = _pyramid(src, levels), _pyramid(tgt, levels)
    use_conf = source_valid is not None or target_valid is not None
    if use_conf:
        ones = np.ones(src.shape)
        sc = _pyramid(ones if source_valid is None else np.asarray(source_valid, dtype=np.float64), levels)
        tc = _pyramid(ones if target_valid is None else np.asarray(target_valid, dtype=np.float64), levels)
    u = np.zeros(src_pyr[-1].shape)
    v = np.zeros_like(u)
    for lvl in reversed(range(len(src_pyr))):
        s, t = src_pyr[lvl], tgt_pyr[lvl]
        if u.shape != s.shape:
            fy, fx = s.shape[0] / u.shape[0], s.shape[1] / u.shape[1]
            u = _resize_flow(u, s.shape) * fx
            v = _resize_flow(v, s.shape) * fy
        confs = (_smooth(sc[lvl]), _smooth(tc[lvl]) > 0.999) if use_conf else (None, None)
        u, v = _horn_schunck_level(s, t, u, v, alpha**2, iters, warps, *confs)
    return FlowField(u, v)


def consistency_mask(fwd: FlowField, bwd: FlowField, eps: float = CONSISTENCY_EPS) -> np.ndarray:
    """True where bwd(x + fwd(x)) undoes fwd(x) to within ``eps`` pixels."""
    if fwd.shape != bwd.shape:
        raise ValueError("flow fields must share a shape")
    h, w = fwd.shape
    rows, cols = np.indices((h, w), dtype=np.float64)
    r2, c2 = rows + fwd.v, cols + fwd.u
    inside = (r2 >= 0) & (r2 <= h - 1) & (c2 >= 0) & (c2 <= w - 1)
    bu = _sample(bwd.u, r2, c2)
    bv = _sample(bwd.v, r2, c2)
    err = np.hypot(fwd.u + bu, fwd.v + bv)
    return inside & (err < eps)


def warp_frame(frame: np.ndarray, flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Bilinearly resample ``frame`` (h, w) or (c, h, w) at x + flow(x).

    Returns the warped image and the in-bounds mask; out-of-bounds samples are 0.
    """
    frame = np.asarray(frame, dtype=np.float64)
    planes = frame[None] if frame.ndim == 2 else frame
    h, w = planes.shape[1:]
    rows, cols = np.indices((h, w), dtype=np.float64)
    r2, c2 = rows + flow.v, cols + flow.u
    inside = (r2 >= 0) & (r2 <= h - 1) & (c2 >= 0) & (c2 <= w - 1)
    out = np.stack([_sample(p, r2, c2) for p in planes])
    out[:, ~inside] = 0.0
    return (out[0] if frame.ndim == 2 else out), inside


def _align_one(i, ys, stabilized, originals, ref, eps, levels, iters, trusted):
    shape = ys[ref].shape
    if i == ref:
        return (np.asarray(stabilized[i], dtype=np.float64), np.asarray(originals[i], dtype=np.float64),
                np.ones(shape, dtype=bool), FlowField.zeros(shape, i, ref))
    # ref(x) ~ frame_i(x + fwd(x))
    fwd = estimate_flow(ys[i], ys[ref], levels, iters, source_valid=trusted[i], target_valid=trusted[ref])
    bwd = estimate_flow(ys[ref], ys[i], levels, iters, source_valid=trusted[ref], target_valid=trusted[i])
    fwd.source_index, fwd.target_index = i, ref
    bwd.source_index, bwd.target_index = ref, i
    mask = consistency_mask(fwd, bwd, eps)
    warped, inside = warp_frame(stabilized[i], fwd)
    warped_orig, _ = warp_frame(originals[i], fwd)
    return warped, warped_orig, mask & inside, fwd


def unclipped(quad: np.ndarray, black_offset: float, white_level: float) -> np.ndarray:
    """Pixels whose four channels all stay below the saturation margin."""
    limit = black_offset + SATURATION_MARGIN * (white_level - black_offset)
    return np.all(np.asarray(quad) < limit, axis=0)


def align_stack(stabilized, originals, reference_index: int, eps: float = CONSISTENCY_EPS, *,
                black_offset: float = 0.0, white_level: float = 4095.0,
                levels: int = FLOW_LEVELS, iters: int = FLOW_ITERS, threads: int = 1) -> AlignedStack:
    """Register every frame onto the reference.

    ``stabilized`` holds StabilizedFrame objects (exposure-normalized and
    stabilized, so brightness constancy holds); ``originals`` the matching
    raw QuadFrames, which are warped with the same flow.
    """
    stab = [s.channels for s in stabilized]
    orig = [o.channels for o in originals]
    if len({s.shape for s in stab} | {o.shape for o in orig}) != 1:
        raise ValueError("all frames must share one size")
    ys = [luma(s) for s in stab]
    trusted = [unclipped(o, black_offset, white_level) for o in orig]
    run = lambda i: _align_one(i, ys, stab, orig, reference_index, eps, levels, iters, trusted)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, range(len(stab))))
    else:
        results = [run(i) for i in range(len(stab))]
    for i, (_, _, mask, _) in enumerate(results):
        if i != reference_index:
            log.debug("frame %d: %.1f%% valid after alignment", i, 100 * mask.mean())
    return AlignedStack(
        frames=np.stack([r[0] for r in results]),
        originals=np.stack([r[1] for r in results]),
        masks=np.stack([r[2] for r in results]),
        exposure_times=[s.exposure_time for s in stabilized],
        stabilized_sigmas=[s.stabilized_sigma for s in stabilized],
        reference_index=reference_index,
        black_offset=black_offset,
        white_level=white_level,
        flows=[r[3] for r in results],
    )


def assume_static(stabilized, originals, reference_index: int, *,
                  black_offset: float = 0.0, white_level: float = 4095.0) -> AlignedStack:
    """AlignedStack for a stack known to be motion-free: zero flow, every pixel valid."""
    frames = np.stack([np.asarray(s.channels, dtype=np.float64) for s in stabilized])
    shape = frames.shape[2:]
    return AlignedStack(
        frames=frames,
        originals=np.stack([np.asarray(o.channels, dtype=np.float64) for o in originals]),
        masks=np.ones((len(frames),) + shape, dtype=bool),
        exposure_times=[s.exposure_time for s in stabilized],
        stabilized_sigmas=[s.stabilized_sigma for s in stabilized],
        reference_index=reference_index,
        black_offset=black_offset,
        white_level=white_level,
        flows=[FlowField.zeros(shape, i, reference_index) for i in range(len(frames))],
    )
