"""Joint denoising and HDR fusion by weighted PCA over spatio-temporal patch groups.

For every k x k patch P of the reference frame the K most similar extended
patches (the k x k window stacked over all aligned frames) are found on the
Y channel. Each of their per-frame 2D slices becomes a row of a group
matrix, weighted by similarity to P, by how well exposed the slice is in the
original RAW frame, and by the frame's SNR advantage. The weighted barycenter
plus the principal directions that stand out of the noise rebuild P.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .colorspace import YUVW_MATRIX, yuvw_inverse
from .flow import AlignedStack
from .noise_model import NoiseCurve
from .raw_io import RawStack
from .stabilize import inverse_transform

log = logging.getLogger(__name__)

CHUNK_SIZE = 256


@dataclass(frozen=True)
class FusionParams:
    k: int = 7
    h: float = 2.0
    tau: float = 2.8
    K: int = 16
    search_radius: int = 10
    stride: int = 3
    max_coeffs: int | None = 3
    hdr_exponent: int = 12
    sigma0: float = 1.0
    # switches for ablations; disabled factors are replaced by 1
    use_sim: bool = True
    use_hdr: bool = True
    use_snr: bool = True

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"k must be odd and >= 1, got {self.k}")
        if self.h <= 0 or self.sigma0 <= 0:
            raise ValueError("h and sigma0 must be positive")
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.search_radius < 0:
            raise ValueError("search_radius must be >= 0")
        if not 1 <= self.stride <= self.k:
            raise ValueError(f"stride must lie in [1, k={self.k}], got {self.stride}")
        if self.max_coeffs is not None and self.max_coeffs < 0:
            raise ValueError("max_coeffs must be >= 0 or None")
        if self.hdr_exponent % 2:
            raise ValueError("hdr_exponent must be even")


@dataclass
class HdrImage:
    """Fused linear (r, g1, g2, b) planes in reference-exposure units, black offset removed."""

    channels: np.ndarray
    cfa_pattern: str = "RGGB"


@dataclass
class PatchGroup:
    X: np.ndarray              # (rows, k*k)
    weights: np.ndarray        # (rows,)
    frame_index: np.ndarray    # (rows,)
    locations: np.ndarray      # (rows, 2) patch centers (row, col)
    ref_row: int = 0


def hdr_weight(patch_means, black_offset: float, white_level: float, exponent: int = 12):
    """Well-exposedness of a patch from its per-channel means (last axis of size 4).

    Each channel scores 1 - (2*(m - O)/(M - O) - 1)**exponent; the four scores
    are averaged and clamped to [0, 1].
    """
    if black_offset >= white_level:
        raise ValueError("black_offset must be below white_level")
    t = 2.0 * (np.asarray(patch_means, dtype=np.float64) - black_offset) / (white_level - black_offset) - 1.0
    w = 1.0 - t**exponent
    return np.clip(w.mean(axis=-1), 0.0, 1.0)


def similarity_weight(distance, h: float, sigma_ref: float):
    return np.exp(-np.asarray(distance) / (h * sigma_ref) ** 2)


def snr_weight(tau_i: float, tau_ref: float) -> float:
    return float(np.sqrt(tau_i / tau_ref))


def compute_weight(p_ref: np.ndarray, q: np.ndarray, original_patch: np.ndarray, tau_i: float, tau_ref: float,
                   black_offset: float, white_level: float, params: FusionParams,
                   sigma_ref: float | None = None) -> float:
    """Weight of one group row.

    ``p_ref`` and ``q`` are the Y-channel patches of the reference patch and
    the candidate; ``original_patch`` is the candidate's (4, k, k) window in
    its original RAW frame.
    """
    sigma_ref = params.sigma0 if sigma_ref is None else sigma_ref
    d = np.mean((np.asarray(p_ref, dtype=np.float64) - q) ** 2)
    w = similarity_weight(d, params.h, sigma_ref) if params.use_sim else 1.0
    if params.use_hdr:
        means = np.asarray(original_patch, dtype=np.float64).reshape(4, -1).mean(axis=1)
        w *= hdr_weight(means, black_offset, white_level, params.hdr_exponent)
    if params.use_snr:
        w *= snr_weight(tau_i, tau_ref)
    return float(w)


def _wpca_batch(X: np.ndarray, w: np.ndarray, ref_row: int, params: FusionParams) -> np.ndarray:
    """Filter the reference row of each group in a (n, rows, p) batch."""
    V1 = w.sum(axis=1)
    V2 = (w**2).sum(axis=1)
    safe_v1 = np.where(V1 > 0, V1, 1.0)
    b = np.einsum("nr,nrp->np", w, X) / safe_v1[:, None]
    x_ref = X[:, ref_row]
    out = b.copy()
    # without any weight there is nothing to average: keep the observation
    out[V1 <= 0] = x_ref[V1 <= 0]
    if params.max_coeffs == 0:
        return out

    denom = V1**2 - V2
    ok = (V1 > 0) & (denom > 1e-12 * V1**2)
    if not ok.any():
        return out
    Xc = X[ok] - b[ok][:, None, :]
    A = np.sqrt(w[ok])[:, :, None] * Xc
    _, s, vt = np.linalg.svd(A, full_matrices=False)
    lam = s**2 * (V1[ok] / denom[ok])[:, None]
    keep = np.sqrt(lam) > params.tau * params.sigma0
    if params.max_coeffs is not None:
        keep[:, params.max_coeffs:] = False
    coef = np.einsum("nmp,np->nm", vt, x_ref[ok] - b[ok]) * keep
    out[ok] = b[ok] + np.einsum("nm,nmp->np", coef, vt)
    return out


def weighted_pca_filter(group: PatchGroup, params: FusionParams) -> np.ndarray:
    """Denoised estimate (k*k values) of the group's reference row.

    Principal values come from the bias-corrected weighted covariance
    V1/(V1^2 - V2) * Xc^T W Xc; a direction is kept when its principal value
    exceeds tau*sigma0 and it ranks below ``max_coeffs``. Groups with a
    single effective sample return the barycenter.
    """
    X = np.asarray(group.X, dtype=np.float64)[None]
    w = np.asarray(group.weights, dtype=np.float64)[None]
    return _wpca_batch(X, w, group.ref_row, params)[0]


def _grid(n: int, k: int, stride: int) -> np.ndarray:
    r = k // 2
    if n < k:
        raise ValueError(f"image side {n} is smaller than the patch size {k}")
    pos = list(range(r, n - r, stride))
    if pos[-1] != n - 1 - r:
        pos.append(n - 1 - r)
    return np.array(pos)


class _Context:
    """Per-stack precomputation shared by every patch group."""

    def __init__(self, aligned: AlignedStack, params: FusionParams):
        self.params = params
        k, r = params.k, params.k // 2
        self.r = r
        frames = np.asarray(aligned.frames, dtype=np.float64)
        self.N, _, self.h, self.w = frames.shape
        self.ref = aligned.reference_index
        self.yuvw = np.einsum("cd,ndhw->cnhw", YUVW_MATRIX, frames)
        self.windows = sliding_window_view(self.yuvw, (k, k), axis=(2, 3))  # (4, N, h-k+1, w-k+1, k, k)

        invalid = ~np.asarray(aligned.masks, dtype=bool)
        bad = ndimage.uniform_filter(invalid.astype(np.float64), size=(1, k, k), mode="constant") > 0.5 / k**2
        bad[:, :r, :] = bad[:, self.h - r:, :] = True
        bad[:, :, :r] = bad[:, :, self.w - r:] = True
        self.slice_ok = ~bad
        self.slice_ok[self.ref] = True

        if params.use_hdr:
            means = ndimage.uniform_filter(np.asarray(aligned.originals, dtype=np.float64),
                                           size=(1, 1, k, k), mode="nearest")
            self.hdr = hdr_weight(np.moveaxis(means, 1, -1), aligned.black_offset,
                                  aligned.white_level, params.hdr_exponent)
        else:
            self.hdr = np.ones((self.N, self.h, self.w))
        tau_ref = aligned.exposure_times[self.ref]
        self.snr = (np.array([snr_weight(t, tau_ref) for t in aligned.exposure_times])
                    if params.use_snr else np.ones(self.N))
        self.sigma_ref = aligned.stabilized_sigmas[self.ref]
        rad = params.search_radius
        dy, dx = np.mgrid[-rad:rad + 1, -rad:rad + 1]
        self.offsets = np.stack([dy.ravel(), dx.ravel()], axis=1)
        self.zero_offset = int(np.flatnonzero((self.offsets == 0).all(axis=1))[0])

    def group(self, cy: np.ndarray, cx: np.ndarray):
        """Select the K candidates of each center and weight every (candidate, frame) row.

        Returns the selected candidate centers (n, K, 2), the row weights
        (n, K, N) and the row validity (n, K, N); dropped rows weigh 0.
        """
        p, r, N = self.params, self.r, self.N
        Y = self.windows[0]
        ref_ext = Y[:, cy - r, cx - r].reshape(N, len(cy), -1)
        ok_c = self.slice_ok[:, cy, cx]
        n_off = len(self.offsets)
        ext_d = np.full((n_off, len(cy)), np.inf)
        sim_d = np.zeros((n_off, N, len(cy)))
        ok_q = np.zeros((n_off, N, len(cy)), dtype=bool)
        for d, (oy, ox) in enumerate(self.offsets):
            qy, qx = cy + oy, cx + ox
            inside = (qy >= r) & (qy < self.h - r) & (qx >= r) & (qx < self.w - r)
            qy, qx = np.clip(qy, r, self.h - 1 - r), np.clip(qx, r, self.w - 1 - r)
            cand = Y[:, qy - r, qx - r].reshape(N, len(cy), -1)
            okq = self.slice_ok[:, qy, qx] & inside
            common = ok_c & okq
            msd = np.mean((ref_ext - cand) ** 2, axis=-1)
            cnt = common.sum(axis=0)
            ext_d[d] = np.where(inside & (cnt > 0), (msd * common).sum(axis=0) / np.maximum(cnt, 1), np.inf)
            sim_d[d] = np.mean((ref_ext[self.ref] - cand) ** 2, axis=-1)
            ok_q[d] = okq
        ext_d[self.zero_offset] = -1.0   # the reference patch always belongs to its group

        K = min(p.K, n_off)
        sel = np.argsort(ext_d, axis=0, kind="stable")[:K]          # (K, n)
        cols = np.arange(len(cy))
        valid = ok_q[sel, :, cols[None, :]]                         # (K, n, N)
        valid &= np.isfinite(ext_d[sel, cols[None, :]])[..., None]
        w = np.where(valid, 1.0, 0.0)
        if p.use_sim:
            w *= similarity_weight(sim_d[sel, :, cols[None, :]], p.h, self.sigma_ref)
        qy = cy[None, :] + self.offsets[sel, 0]
        qx = cx[None, :] + self.offsets[sel, 1]
        qy, qx = np.clip(qy, r, self.h - 1 - r), np.clip(qx, r, self.w - 1 - r)
        w *= np.moveaxis(self.hdr[:, qy, qx], 0, -1)                # (K, n, N)
        w *= self.snr
        centers = np.stack([qy, qx], axis=-1)
        return np.moveaxis(centers, 0, 1), np.moveaxis(w, 0, 1), np.moveaxis(valid, 0, 1)

    def rows(self, channel: int, centers: np.ndarray) -> np.ndarray:
        """Group matrices (n, K*N, k*k) of one YUVW channel; row index = candidate*N + frame."""
        r = self.r
        qy, qx = centers[..., 0] - r, centers[..., 1] - r            # (n, K)
        win = self.windows[channel]                                  # (N, H', W', k, k)
        X = win[:, qy, qx]                                           # (N, n, K, k, k)
        n, K = qy.shape
        return np.moveaxis(X, 0, 2).reshape(n, K * self.N, -1)


def build_patch_group(aligned: AlignedStack, channel: int, center, params: FusionParams) -> PatchGroup:
    """Group of the reference patch at ``center`` for YUVW channel ``channel`` (0 = Y).

    Centers closer than k//2 to a border are snapped inward. Dropped rows
    (invalid slices) are removed from the returned group.
    """
    ctx = _Context(aligned, params)
    r = ctx.r
    cy = np.array([int(np.clip(center[0], r, ctx.h - 1 - r))])
    cx = np.array([int(np.clip(center[1], r, ctx.w - 1 - r))])
    centers, w, valid = ctx.group(cy, cx)
    X = ctx.rows(channel, centers)[0]
    K = centers.shape[1]
    frame_index = np.tile(np.arange(ctx.N), K)
    locations = np.repeat(centers[0], ctx.N, axis=0)
    keep = np.flatnonzero(valid[0].ravel())
    ref_row = int(np.flatnonzero(keep == ctx.ref)[0])
    return PatchGroup(X[keep], w[0].ravel()[keep], frame_index[keep], locations[keep], ref_row)


def _fuse_chunk(ctx: _Context, cy: np.ndarray, cx: np.ndarray) -> np.ndarray:
    centers, w, _ = ctx.group(cy, cx)
    w = w.reshape(len(cy), -1)
    est = np.empty((4, len(cy), ctx.params.k**2))
    for c in range(4):
        est[c] = _wpca_batch(ctx.rows(c, centers), w, ctx.ref, ctx.params)
    return est


def fuse_stabilized(aligned: AlignedStack, params: FusionParams, threads: int = 1) -> np.ndarray:
    """Fused stabilized (Y, U, V, W) planes of the reference frame."""
    ctx = _Context(aligned, params)
    k, r = params.k, ctx.r
    gy, gx = np.meshgrid(_grid(ctx.h, k, params.stride), _grid(ctx.w, k, params.stride), indexing="ij")
    cy, cx = gy.ravel(), gx.ravel()
    chunks = [(cy[i:i + CHUNK_SIZE], cx[i:i + CHUNK_SIZE]) for i in range(0, len(cy), CHUNK_SIZE)]
    work = lambda c: _fuse_chunk(ctx, *c)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(c) for c in chunks]

    acc = np.zeros((4, ctx.h, ctx.w))
    count = np.zeros((ctx.h, ctx.w))
    dy, dx = np.divmod(np.arange(k * k), k)
    for (ccy, ccx), est in zip(chunks, results):
        for j in range(k * k):
            # centers within a chunk are distinct, so fancy-index adds do not collide
            acc[:, ccy + dy[j] - r, ccx + dx[j] - r] += est[:, :, j]
            count[ccy + dy[j] - r, ccx + dx[j] - r] += 1
    log.debug("fused %d patches (%d chunks)", len(cy), len(chunks))
    return acc / count


def fuse_stack(aligned: AlignedStack, curve: NoiseCurve, params: FusionParams = FusionParams(),
               threads: int = 1, cfa_pattern: str = "RGGB") -> HdrImage:
    """Fuse an aligned stack into an offset-free linear HDR image at the reference exposure."""
    yuvw = fuse_stabilized(aligned, params, threads)
    stabilized = yuvw_inverse(yuvw)
    linear = inverse_transform(stabilized, curve, params.sigma0)
    return HdrImage(linear - aligned.black_offset, cfa_pattern)


def classic_hdr(stack: RawStack, weight_fn=None, exponent: int = 12) -> HdrImage:
    """Per-pixel weighted irradiance average with a linear (RAW) response.

    ``weight_fn`` maps a (4, h, w) frame to weights of shape (h, w) or
    (4, h, w); the default is :func:`hdr_weight` on each quad pixel, the
    k = 1 case of the patch weight. Pixels with zero total weight fall back
    to the reference frame.
    """
    O, M = stack.black_offset, stack.white_level
    if weight_fn is None:
        weight_fn = lambda q: hdr_weight(np.moveaxis(q, 0, -1), O, M, exponent)  # noqa: E731
    tau_ref = stack.exposure_times[stack.reference_index]
    num = np.zeros(stack.frames[0].channels.shape)
    den = np.zeros_like(num)
    for f in stack.frames:
        q = np.asarray(f.channels, dtype=np.float64)
        w = np.broadcast_to(weight_fn(q), q.shape)
        num += w * (q - O) / f.exposure_time
        den += w
    ref = np.asarray(stack.reference.channels, dtype=np.float64) - O
    safe = np.where(den > 0, den, 1.0)
    out = np.where(den > 0, tau_ref * num / safe, ref)
    return HdrImage(out, stack.cfa_pattern)
