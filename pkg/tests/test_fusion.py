import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rawhdr.flow import assume_static
from rawhdr.fusion import (
    FusionParams, PatchGroup, _grid, build_patch_group, classic_hdr, compute_weight, fuse_stabilized, fuse_stack,
    hdr_weight, similarity_weight, snr_weight, weighted_pca_filter,
)
from rawhdr.noise_model import NoiseCurve
from rawhdr.raw_io import QuadFrame, RawStack
from rawhdr.stabilize import StabilizedFrame, forward_transform

O, M = 64.0, 4095.0


# -- weights ----------------------------------------------------------------

def test_hdr_weight_endpoints():
    assert hdr_weight(np.full(4, O), O, M) == 0.0
    assert hdr_weight(np.full(4, (O + M) / 2), O, M) == 1.0
    assert hdr_weight(np.full(4, O + 0.75 * (M - O)), O, M) == pytest.approx(0.999755859375, abs=1e-12)
    assert hdr_weight(np.full(4, M), O, M) == 0.0


def test_hdr_weight_averages_channels():
    means = np.array([O, (O + M) / 2, (O + M) / 2, (O + M) / 2])
    assert hdr_weight(means, O, M) == pytest.approx(0.75)


@given(st.lists(st.floats(-1000, 6000), min_size=4, max_size=4))
def test_hdr_weight_bounded(means):
    w = hdr_weight(np.array(means), O, M)
    assert 0.0 <= w <= 1.0


@given(st.floats(0, 1e6), st.floats(0.1, 10), st.floats(0.1, 10))
def test_similarity_weight_bounded(d, h, s):
    w = similarity_weight(d, h, s)
    assert 0.0 <= w <= 1.0


def test_weight_examples():
    p = np.random.default_rng(0).random((7, 7))
    mid = np.full((4, 7, 7), (O + M) / 2)
    params = FusionParams()
    assert compute_weight(p, p, mid, 0.01, 0.01, O, M, params) == pytest.approx(1.0)
    # distance (h * sigma)^2 gives exp(-1)
    q = p + params.h * params.sigma0
    assert compute_weight(p, q, mid, 0.01, 0.01, O, M, params) == pytest.approx(np.exp(-1))
    assert snr_weight(0.04, 0.01) == pytest.approx(2.0)
    assert snr_weight(0.0025, 0.01) == pytest.approx(0.5)
    assert compute_weight(p, p, mid, 0.04, 0.01, O, M, params) == pytest.approx(2.0)
    off = FusionParams(use_sim=False, use_hdr=False, use_snr=False)
    assert compute_weight(p, q, np.full((4, 7, 7), O), 0.04, 0.01, O, M, off) == 1.0


def test_params_validation():
    for bad in (dict(k=4), dict(k=0), dict(h=0), dict(K=0), dict(stride=8), dict(hdr_exponent=11),
                dict(max_coeffs=-1), dict(sigma0=0)):
        with pytest.raises(ValueError):
            FusionParams(**bad)
    d = FusionParams()
    assert (d.k, d.h, d.tau, d.hdr_exponent, d.max_coeffs) == (7, 2.0, 2.8, 12, 3)


# -- weighted PCA -----------------------------------------------------------

def pca_oracle(X, w, ref_row, tau, sigma0, max_coeffs):
    """Direct covariance eigendecomposition, written out with explicit sums."""
    V1, V2 = w.sum(), (w**2).sum()
    b = sum(wj * xj for wj, xj in zip(w, X)) / V1
    C = sum(wj * np.outer(xj - b, xj - b) for wj, xj in zip(w, X)) * V1 / (V1**2 - V2)
    lam, vec = np.linalg.eigh(C)
    order = np.argsort(lam)[::-1]
    out = b.copy()
    for rank, idx in enumerate(order):
        if max_coeffs is not None and rank >= max_coeffs:
            break
        if np.sqrt(max(lam[idx], 0.0)) > tau * sigma0:
            v = vec[:, idx]
            out = out + np.dot(X[ref_row] - b, v) * v
    return out


def test_equal_weights_match_unbiased_covariance_pca():
    rng = np.random.default_rng(42)
    for trial in range(100):
        X = rng.standard_normal((10, 4)) * rng.uniform(0.5, 6, size=4)
        params = FusionParams(max_coeffs=None)
        got = weighted_pca_filter(PatchGroup(X, np.ones(10), np.zeros(10), np.zeros((10, 2)), 3), params)
        # with unit weights the normalization is exactly 1/(n-1)
        b = X.mean(axis=0)
        lam, vec = np.linalg.eigh(np.cov(X, rowvar=False, ddof=1))
        keep = np.sqrt(np.maximum(lam, 0)) > params.tau * params.sigma0
        expected = b + vec[:, keep] @ (vec[:, keep].T @ (X[3] - b))
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-10)


@given(st.integers(0, 2**32 - 1), st.sampled_from([0, 1, 3, None]), st.floats(0.5, 4))
def test_weighted_filter_matches_oracle(seed, max_coeffs, tau):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((12, 9)) * rng.uniform(0.2, 8, size=9)
    w = rng.uniform(0.05, 2.0, size=12)
    params = FusionParams(k=3, stride=1, tau=tau, max_coeffs=max_coeffs)
    got = weighted_pca_filter(PatchGroup(X, w, np.zeros(12), np.zeros((12, 2)), 5), params)
    np.testing.assert_allclose(got, pca_oracle(X, w, 5, tau, 1.0, max_coeffs), atol=1e-9)


def test_rank_one_reconstruction_is_exact():
    rng = np.random.default_rng(7)
    u = rng.standard_normal(49)
    u /= np.linalg.norm(u)
    m = rng.uniform(0, 100, size=49)
    c = rng.uniform(-200, 200, size=30)
    X = c[:, None] * u + m
    w = rng.uniform(0.1, 1, size=30)
    for j in (0, 11, 29):
        out = weighted_pca_filter(PatchGroup(X, w, np.zeros(30), np.zeros((30, 2)), j), FusionParams())
        np.testing.assert_allclose(out, X[j], atol=1e-6)


def test_identical_rows_return_the_row():
    row = np.arange(9.0)
    X = np.tile(row, (6, 1))
    w = np.array([1, 0.2, 0.3, 0.9, 0.5, 0.1])
    out = weighted_pca_filter(PatchGroup(X, w, np.zeros(6), np.zeros((6, 2)), 2), FusionParams(k=3))
    np.testing.assert_allclose(out, row, atol=1e-12)


def test_barycenter_only_and_degenerate_weights():
    rng = np.random.default_rng(1)
    X = rng.random((5, 9))
    w = np.array([0.5, 1.0, 0.0, 2.0, 0.5])
    out = weighted_pca_filter(PatchGroup(X, w, np.zeros(5), np.zeros((5, 2)), 1), FusionParams(k=3, max_coeffs=0))
    np.testing.assert_allclose(out, (w[:, None] * X).sum(0) / w.sum())
    # a single weighted row: its own value
    w1 = np.array([0.0, 3.0, 0.0, 0.0, 0.0])
    out = weighted_pca_filter(PatchGroup(X, w1, np.zeros(5), np.zeros((5, 2)), 1), FusionParams(k=3))
    np.testing.assert_allclose(out, X[1])
    # no weight at all: the observation is kept
    out = weighted_pca_filter(PatchGroup(X, np.zeros(5), np.zeros(5), np.zeros((5, 2)), 1), FusionParams(k=3))
    np.testing.assert_allclose(out, X[1])


# -- grouping ---------------------------------------------------------------

def _aligned(frames_stab, frames_orig, times, ref, masks=None):
    stab = [StabilizedFrame(f, t, float(np.sqrt(times[ref] / t))) for f, t in zip(frames_stab, times)]
    orig = [QuadFrame(f, t) for f, t in zip(frames_orig, times)]
    al = assume_static(stab, orig, ref, black_offset=O, white_level=M)
    if masks is not None:
        al.masks = masks
    return al


def test_group_matches_exhaustive_oracle():
    rng = np.random.default_rng(3)
    N, h, w = 3, 11, 11
    times = [0.005, 0.01, 0.02]
    stab = [rng.normal(0, 3, size=(4, h, w)) for _ in range(N)]
    orig = [rng.uniform(500, 3500, size=(4, h, w)) for _ in range(N)]
    masks = np.ones((N, h, w), dtype=bool)
    masks[2, 2, 8] = False          # knocks out the frame-2 slices around (2, 8)
    al = _aligned(stab, orig, times, 1, masks)
    params = FusionParams(k=3, stride=1, K=6, search_radius=3)
    center = (5, 4)
    g = build_patch_group(al, 0, center, params)

    Y = [0.5 * s.sum(axis=0) for s in stab]
    patch = lambda img, c: img[c[0] - 1:c[0] + 2, c[1] - 1:c[1] + 2]   # noqa: E731
    ok = lambda i, c: masks[i, c[0] - 1:c[0] + 2, c[1] - 1:c[1] + 2].all()  # noqa: E731
    dist = {}
    for dy, dx in itertools.product(range(-3, 4), repeat=2):
        q = (center[0] + dy, center[1] + dx)
        if not (1 <= q[0] <= h - 2 and 1 <= q[1] <= w - 2):
            continue
        common = [i for i in range(N) if ok(i, center) and ok(i, q)]
        dist[q] = np.mean([np.mean((patch(Y[i], center) - patch(Y[i], q)) ** 2) for i in common])
    dist[center] = -1.0
    chosen = sorted(dist, key=dist.get)[:6]
    assert {tuple(loc) for loc in g.locations} == set(chosen)

    # every kept row carries the per-row weight formula
    for row, i, loc in zip(range(len(g.X)), g.frame_index, g.locations):
        loc = tuple(loc)
        assert ok(i, loc)
        np.testing.assert_allclose(g.X[row], patch(Y[i], loc).ravel())
        expected = compute_weight(patch(Y[1], center), patch(Y[i], loc),
                                  orig[i][:, loc[0] - 1:loc[0] + 2, loc[1] - 1:loc[1] + 2],
                                  times[i], times[1], O, M, params, sigma_ref=1.0)
        assert g.weights[row] == pytest.approx(expected, rel=1e-12)
    assert g.frame_index[g.ref_row] == 1 and tuple(g.locations[g.ref_row]) == center
    n_invalid = sum(not ok(i, q) for q in chosen for i in range(N))
    assert len(g.X) == 6 * N - n_invalid


def test_constant_stack_group_is_uniform():
    frames = [np.full((4, 15, 15), 5.0)] * 2
    al = _aligned(frames, [np.full((4, 15, 15), 2000.0)] * 2, [0.01, 0.02], 0)
    g = build_patch_group(al, 0, (7, 7), FusionParams())
    assert len(g.X) == 16 * 2
    assert np.all(g.X == g.X[0])


def test_single_frame_group_is_spatial():
    rng = np.random.default_rng(0)
    al = _aligned([rng.random((4, 20, 20))], [np.full((4, 20, 20), 2000.0)], [0.01], 0)
    g = build_patch_group(al, 0, (10, 10), FusionParams())
    assert len(g.X) <= 16
    assert np.all(g.frame_index == 0)


@given(st.integers(1, 80), st.sampled_from([1, 3, 5, 7]), st.integers(1, 7))
def test_stride_grid_covers_every_pixel(n, k, stride):
    if n < k or stride > k:
        return
    covered = np.zeros(n, dtype=bool)
    for c in _grid(n, k, stride):
        covered[c - k // 2:c + k // 2 + 1] = True
    assert covered.all()


# -- end to end -------------------------------------------------------------

def test_single_noise_free_frame_passthrough():
    rng = np.random.default_rng(11)
    raw = O + rng.uniform(300, 3000, size=(4, 24, 24))
    curve = NoiseCurve.linear(0.5, 10.0)
    al = _aligned([forward_transform(raw, curve)], [raw], [0.01], 0)
    out = fuse_stack(al, curve, FusionParams(tau=0.0, max_coeffs=None)).channels
    np.testing.assert_allclose(out, raw - O, rtol=2e-3)


def test_barycenter_shrinks_noise_on_flat_stack():
    rng = np.random.default_rng(2)
    times = [0.01, 0.01, 0.01]
    stab = [rng.standard_normal((4, 40, 40)) + 30 for _ in times]
    al = _aligned(stab, [np.full((4, 40, 40), 2000.0)] * 3, times, 1)
    out = fuse_stabilized(al, FusionParams(max_coeffs=0))
    from rawhdr.colorspace import yuvw_forward
    single = yuvw_forward(stab[1])[0][8:-8, 8:-8].std()
    assert out[0][8:-8, 8:-8].std() <= single / 3


def test_fusion_is_thread_count_invariant():
    rng = np.random.default_rng(5)
    times = [0.005, 0.01, 0.02]
    stab = [rng.standard_normal((4, 30, 30)) * 2 + 20 for _ in times]
    al = _aligned(stab, [rng.uniform(200, 3000, (4, 30, 30)) for _ in times], times, 1)
    a = fuse_stabilized(al, FusionParams(), threads=1)
    b = fuse_stabilized(al, FusionParams(), threads=4)
    np.testing.assert_allclose(a, b, rtol=1e-12)


# -- classic HDR ------------------------------------------------------------

def _stack(values, times, white=M):
    frames = [QuadFrame(np.full((4, 2, 2), float(v)), t) for v, t in zip(values, times)]
    return RawStack(frames, O, white)


def test_classic_consistent_irradiance():
    stack = _stack([O + 100, O + 200], [1.0, 2.0])
    out = classic_hdr(stack, weight_fn=lambda q: np.ones(q.shape[1:])).channels
    # two frames: the reference is the longer one, so values are in tau = 2 units
    assert np.allclose(out, 200.0)


def test_classic_single_frame():
    single = RawStack([QuadFrame(np.full((4, 2, 2), O + 300.0), 0.5)], O, M)
    assert np.allclose(classic_hdr(single).channels, 300.0)


def test_classic_reference_units():
    frames = [QuadFrame(np.full((4, 2, 2), O + 100.0), 1.0), QuadFrame(np.full((4, 2, 2), O + 200.0), 2.0),
              QuadFrame(np.full((4, 2, 2), O + 25.0), 0.25)]
    stack = RawStack(frames, O, M)
    assert stack.exposure_times[stack.reference_index] == 1.0
    out = classic_hdr(stack, weight_fn=lambda q: np.ones(q.shape[1:])).channels
    assert np.allclose(out, 100.0)


def test_classic_ignores_saturated_frame():
    frames = [QuadFrame(np.full((4, 2, 2), M), 0.01), QuadFrame(np.full((4, 2, 2), O + 1000.0), 0.02)]
    out = classic_hdr(RawStack(frames, O, M)).channels
    assert np.allclose(out, 1000.0)


def test_classic_zero_weight_falls_back_to_reference():
    frames = [QuadFrame(np.full((4, 2, 2), M), 0.01), QuadFrame(np.full((4, 2, 2), M), 0.02)]
    stack = RawStack(frames, O, M)
    out = classic_hdr(stack).channels
    assert np.allclose(out, M - O)
