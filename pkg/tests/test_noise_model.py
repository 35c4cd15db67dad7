import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rawhdr.noise_model import (
    SIGMA_FLOOR, NoiseCurve, NoiseEstimationError, _fit_linear_variance, estimate_noise_curve, eval_sigma,
    scale_noise_curve,
)
from rawhdr.raw_io import QuadFrame, RawStack


def _striped_stack(rng, variance, n_frames=3, size=256, levels=np.linspace(100, 3000, 16)):
    """Frames made of flat vertical stripes plus Gaussian noise of the given variance(x)."""
    cols = np.repeat(levels, size // len(levels))
    clean = np.broadcast_to(cols, (4, size, size))
    frames = []
    for i in range(n_frames):
        noisy = clean + np.sqrt(variance(clean)) * rng.standard_normal(clean.shape)
        frames.append(QuadFrame(noisy, 0.01 * (i + 1)))
    return RawStack(frames, 0.0, 1e9)


def test_constant_noise_fit(rng):
    curve = estimate_noise_curve(_striped_stack(rng, lambda x: 25.0 + 0 * x))
    for c in range(4):
        for x in (100.0, 1000.0, 3000.0):
            assert eval_sigma(curve, c, x) == pytest.approx(5.0, rel=0.15)
        assert curve.channels[c].a < 0.01
        assert curve.channels[c].b == pytest.approx(25.0, rel=0.15)


def test_signal_dependent_fit(rng):
    curve = estimate_noise_curve(_striped_stack(rng, lambda x: 0.5 * x))
    for c in range(4):
        assert curve.channels[c].a == pytest.approx(0.5, rel=0.15)
        assert curve.channels[c].b < 0.1 * 0.5 * 3000


def test_noise_free_image_hits_floor():
    frames = [QuadFrame(np.full((4, 128, 128), 500.0), 0.01)]
    curve = estimate_noise_curve(RawStack(frames, 0.0, 4095.0))
    for c in range(4):
        assert eval_sigma(curve, c, 500.0) == pytest.approx(SIGMA_FLOOR)
        assert all(s == SIGMA_FLOOR for s in curve.channels[c].points_sigma)


def test_channel_permutation_permutes_curves(rng):
    stack = _striped_stack(rng, lambda x: 0.3 * x + 5.0, n_frames=1)
    perm = [2, 0, 3, 1]
    swapped = RawStack([QuadFrame(f.channels[perm], f.exposure_time) for f in stack.frames], 0.0, 1e9)
    a, b = estimate_noise_curve(stack), estimate_noise_curve(swapped)
    for j, c in enumerate(perm):
        assert b.channels[j] == a.channels[c]


def test_too_few_blocks():
    frames = [QuadFrame(np.ones((4, 16, 16)), 0.01)]
    with pytest.raises(NoiseEstimationError):
        estimate_noise_curve(RawStack(frames, 0.0, 4095.0))


def test_saturated_blocks_are_ignored(rng):
    stack = _striped_stack(rng, lambda x: 0.5 * x)
    clipped = RawStack([QuadFrame(np.minimum(f.channels, 2500.0), f.exposure_time) for f in stack.frames],
                       0.0, 2500.0)
    curve = estimate_noise_curve(clipped)
    assert max(max(c.points_x) for c in curve.channels) < 2500.0
    assert curve.a.mean() == pytest.approx(0.5, rel=0.15)


def test_weighted_fit_recovers_exact_line():
    x = np.linspace(10, 1000, 12)
    a, b = _fit_linear_variance(x, 0.7 * x + 12.0, SIGMA_FLOOR)
    assert a == pytest.approx(0.7) and b == pytest.approx(12.0)


def test_eval_sigma_examples():
    assert eval_sigma(NoiseCurve.linear(1.0, 0.0), 0, 25.0) == pytest.approx(5.0)
    assert eval_sigma(NoiseCurve.linear(0.0, 4.0), 2, 1234.0) == pytest.approx(2.0)
    assert eval_sigma(NoiseCurve.linear(1.0, 0.0), 1, -10.0) == pytest.approx(SIGMA_FLOOR)


def test_scale_examples():
    c = NoiseCurve.linear(1.0, 0.0)
    assert scale_noise_curve(c, 0.02, 0.01).a.tolist() == [2.0] * 4
    assert scale_noise_curve(c, 0.02, 0.01).b.tolist() == [0.0] * 4
    assert scale_noise_curve(NoiseCurve.linear(0.0, 1.0), 0.02, 0.01).b.tolist() == [4.0] * 4
    assert scale_noise_curve(c, 0.01, 0.01) == c
    with pytest.raises(ValueError):
        scale_noise_curve(c, 0.0, 0.01)


@given(st.floats(0, 10), st.floats(0, 100), st.floats(1e-4, 1), st.floats(1e-4, 1))
def test_scaling_is_invertible(a, b, t1, t2):
    c = NoiseCurve.linear(a, b)
    back = scale_noise_curve(scale_noise_curve(c, t1, t2), t2, t1)
    np.testing.assert_allclose(back.a, c.a, rtol=1e-12, atol=1e-300)
    np.testing.assert_allclose(back.b, c.b, rtol=1e-12, atol=1e-300)


@given(st.floats(0, 10), st.floats(0, 100), st.floats(1e-3, 1), st.floats(1e-3, 1), st.floats(0, 4000))
def test_scaled_variance_matches_rescaled_signal(a, b, t_ref, t_i, x):
    # noise of r*X where X has variance a*x + b
    r = t_ref / t_i
    scaled = scale_noise_curve(NoiseCurve.linear(a, b), t_ref, t_i)
    assert scaled.channels[0].variance(r * x) == pytest.approx(r * r * (a * x + b), rel=1e-9, abs=1e-9)


def test_json_round_trip(tmp_path, rng):
    curve = estimate_noise_curve(_striped_stack(rng, lambda x: 0.5 * x + 3, n_frames=1))
    curve.save(tmp_path / "c.json")
    assert NoiseCurve.load(tmp_path / "c.json") == curve


def test_malformed_curve_file(tmp_path):
    (tmp_path / "c.json").write_text('{"channels": {}}')
    with pytest.raises(NoiseEstimationError):
        NoiseCurve.load(tmp_path / "c.json")
