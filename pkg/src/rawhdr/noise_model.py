"""Signal-dependent noise curves for the four CFA planes.

The estimator follows the usual DCT recipe: split every plane into
non-overlapping blocks, bin the blocks by mean intensity, keep the flattest
blocks of each bin (lowest low-frequency energy) and read the noise level
off their high-frequency coefficients. A linear variance model
``sigma^2(x) = a*x + b`` is then fitted to the per-bin estimates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.fft import dctn
from scipy.stats import norm

from .raw_io import RawStack

CHANNELS = ("r", "g1", "g2", "b")
SIGMA_FLOOR = 1e-3
FLAT_QUANTILE = 0.10
_MAD_TO_SIGMA = 1.0 / norm.ppf(0.75)


class NoiseEstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ChannelCurve:
    a: float
    b: float
    points_x: tuple[float, ...] = ()
    points_sigma: tuple[float, ...] = ()

    def variance(self, x):
        return self.a * np.asarray(x, dtype=np.float64) + self.b


@dataclass(frozen=True)
class NoiseCurve:
    channels: tuple[ChannelCurve, ChannelCurve, ChannelCurve, ChannelCurve]
    floor: float = SIGMA_FLOOR

    @classmethod
    def linear(cls, a, b, floor: float = SIGMA_FLOOR) -> "NoiseCurve":
        """Same (or per-channel, if sequences are given) linear variance model on every plane."""
        a = np.broadcast_to(np.asarray(a, dtype=np.float64), (4,))
        b = np.broadcast_to(np.asarray(b, dtype=np.float64), (4,))
        return cls(tuple(ChannelCurve(float(ai), float(bi)) for ai, bi in zip(a, b)), floor)

    @property
    def a(self) -> np.ndarray:
        return np.array([c.a for c in self.channels])

    @property
    def b(self) -> np.ndarray:
        return np.array([c.b for c in self.channels])

    def to_dict(self) -> dict:
        return {
            "floor": self.floor,
            "channels": {
                name: {"a": c.a, "b": c.b, "points": [[x, s] for x, s in zip(c.points_x, c.points_sigma)]}
                for name, c in zip(CHANNELS, self.channels)
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseCurve":
        chans = []
        for name in CHANNELS:
            entry = data["channels"][name]
            pts = entry.get("points", [])
            chans.append(ChannelCurve(float(entry["a"]), float(entry["b"]),
                                      tuple(float(p[0]) for p in pts), tuple(float(p[1]) for p in pts)))
        return cls(tuple(chans), float(data.get("floor", SIGMA_FLOOR)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NoiseCurve":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (KeyError, TypeError, ValueError) as exc:
            raise NoiseEstimationError(f"malformed noise curve file {path}: {exc}") from exc


def eval_sigma(curve: NoiseCurve, channel: int, x):
    c = curve.channels[channel]
    return np.sqrt(np.maximum(c.variance(x), curve.floor**2))


def scale_noise_curve(curve: NoiseCurve, tau_ref: float, tau_i: float) -> NoiseCurve:
    """Noise curve of a frame after its exposure has been rescaled by tau_ref / tau_i.

    With ratio r = tau_ref / tau_i, sigma'^2(x) = r^2 * sigma^2(x / r), i.e.
    (a, b) -> (a*r, b*r^2); control points move to (r*x, r*sigma).
    """
    if tau_ref <= 0 or tau_i <= 0:
        raise ValueError("exposure times must be positive")
    r = tau_ref / tau_i
    chans = tuple(
        replace(c, a=c.a * r, b=c.b * r * r,
                points_x=tuple(x * r for x in c.points_x),
                points_sigma=tuple(s * r for s in c.points_sigma))
        for c in curve.channels
    )
    return replace(curve, channels=chans)


def _frequency_masks(p: int) -> tuple[np.ndarray, np.ndarray]:
    i, j = np.indices((p, p))
    order = i + j
    low = (order > 0) & (order <= max(1, p // 2 - 1))
    high = order >= p
    return low, high


def _blocks(plane: np.ndarray, p: int) -> np.ndarray:
    h, w = (s - s % p for s in plane.shape)
    b = plane[:h, :w].reshape(h // p, p, w // p, p).swapaxes(1, 2)
    return b.reshape(-1, p, p)


def _fit_linear_variance(x: np.ndarray, var: np.ndarray, floor: float, reweight: int = 5) -> tuple[float, float]:
    """Least squares fit of var ~ a*x + b.

    The spread of a variance estimate grows like the variance itself, so the
    ordinary fit is refined by reweighting residuals with 1 / fitted variance.
    """
    eps2 = floor**2
    if len(np.unique(x)) < 2:
        return 0.0, float(max(var.mean(), eps2))
    a, b = np.polyfit(x, var, 1)
    for _ in range(reweight):
        fitted = a * x + b
        if np.any(fitted <= 0):
            break
        a, b = np.polyfit(x, var, 1, w=1.0 / fitted)
    if a < 0:
        return 0.0, float(max(var.mean(), eps2))
    if b < eps2:
        # refit the slope with the intercept pinned at the floor
        a = float(np.dot(x, var - eps2) / np.dot(x, x))
        b = eps2
    return float(max(a, 0.0)), float(b)


def estimate_channel(blocks: np.ndarray, bins: int, floor: float = SIGMA_FLOOR) -> ChannelCurve:
    """Fit one plane's curve from its (n, p, p) blocks."""
    p = blocks.shape[-1]
    if len(blocks) < bins * 10:
        raise NoiseEstimationError(
            f"only {len(blocks)} usable {p}x{p} blocks for {bins} bins; use fewer bins or larger frames")
    low, high = _frequency_masks(p)
    means = blocks.mean(axis=(1, 2))
    coeffs = dctn(blocks, axes=(1, 2), norm="ortho")
    low_energy = (coeffs[:, low] ** 2).sum(axis=1)
    high_coeffs = coeffs[:, high]

    order = np.argsort(means, kind="stable")
    xs, sigmas = [], []
    for idx in np.array_split(order, bins):
        n_keep = max(1, int(round(FLAT_QUANTILE * len(idx))))
        flat = idx[np.argsort(low_energy[idx], kind="stable")[:n_keep]]
        # noise DCT coefficients are zero-mean, so the MAD is taken about 0
        sigma = _MAD_TO_SIGMA * np.median(np.abs(high_coeffs[flat]))
        xs.append(means[flat].mean())
        sigmas.append(max(float(sigma), floor))

    xs, sigmas = np.array(xs), np.array(sigmas)
    # merge bins sharing one intensity so control points are strictly increasing
    ux, inverse = np.unique(xs, return_inverse=True)
    us = np.array([sigmas[inverse == k].mean() for k in range(len(ux))])
    a, b = _fit_linear_variance(ux, us**2, floor)
    return ChannelCurve(a, b, tuple(float(v) for v in ux), tuple(float(v) for v in us))


def estimate_noise_curve(stack: RawStack, bins: int = 16, patch_size: int = 8,
                         floor: float = SIGMA_FLOOR) -> NoiseCurve:
    """Estimate one curve per CFA plane, pooling blocks from every frame of the stack.

    Blocks touching the white level are discarded since clipping shrinks their spread.
    """
    if bins < 4:
        raise ValueError("bins must be at least 4")
    if patch_size < 4:
        raise ValueError("patch_size must be at least 4")
    chans = []
    for c in range(4):
        blocks = np.concatenate([_blocks(f.channels[c], patch_size) for f in stack.frames])
        blocks = blocks[blocks.max(axis=(1, 2)) < stack.white_level]
        chans.append(estimate_channel(blocks, bins, floor))
    return NoiseCurve(tuple(chans), floor)
