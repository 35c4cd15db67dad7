"""Exposure equalization and the closed-form variance stabilizing transform.

For a linear variance model the stabilizer integral has a closed form

    f(x) = 2*s0*x / (sqrt(a*x + b) + sqrt(b))

which is the rationalized version of (2*s0/a) * (sqrt(a*x + b) - sqrt(b)).
It stays accurate as ``a`` goes to zero, where it tends to ``s0*x/sqrt(b)``.
Negative inputs use the odd extension f(-x) = -f(x).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .noise_model import NoiseCurve
from .raw_io import QuadFrame


@dataclass
class StabilizedFrame:
    channels: np.ndarray
    exposure_time: float
    stabilized_sigma: float


def normalize_exposure(frame: QuadFrame, tau_ref: float, black_offset: float) -> QuadFrame:
    """Bring a frame to the reference exposure: O + (tau_ref / tau_i) * (I - O)."""
    if tau_ref <= 0 or frame.exposure_time <= 0:
        raise ValueError("exposure times must be positive")
    gain = tau_ref / frame.exposure_time
    out = black_offset + gain * (np.asarray(frame.channels, dtype=np.float64) - black_offset)
    return QuadFrame(out, frame.exposure_time)


def _curve_params(curve: NoiseCurve) -> tuple[np.ndarray, np.ndarray]:
    a = np.maximum(curve.a, 0.0)[:, None, None]
    b = np.maximum(curve.b, 0.0)
    # a constant-variance channel needs a strictly positive b
    b = np.where(a[:, 0, 0] > 0, b, np.maximum(b, curve.floor**2))[:, None, None]
    return a, b


def forward_transform(x: np.ndarray, curve: NoiseCurve, sigma0: float = 1.0) -> np.ndarray:
    """Apply the per-channel stabilizer to a (4, h, w) array."""
    if sigma0 <= 0:
        raise ValueError("sigma0 must be positive")
    x = np.asarray(x, dtype=np.float64)
    a, b = _curve_params(curve)
    ax = np.abs(x)
    denom = np.sqrt(a * ax + b) + np.sqrt(b)
    # denom vanishes only at x = 0 with b = 0, where f(0) = 0
    safe = np.where(denom > 0, denom, 1.0)
    return np.sign(x) * 2.0 * sigma0 * ax / safe


def inverse_transform(y: np.ndarray, curve: NoiseCurve, sigma0: float = 1.0) -> np.ndarray:
    if sigma0 <= 0:
        raise ValueError("sigma0 must be positive")
    y = np.asarray(y, dtype=np.float64)
    a, b = _curve_params(curve)
    ay = np.abs(y)
    return np.sign(y) * (a * ay**2 / (4.0 * sigma0**2) + ay * np.sqrt(b) / sigma0)


def vst_forward(frame: QuadFrame, curve: NoiseCurve, sigma0: float = 1.0,
                tau_ref: float | None = None) -> StabilizedFrame:
    """Stabilize an (already exposure-normalized) frame with the reference curve.

    ``stabilized_sigma`` records the residual noise level sigma0*sqrt(tau_ref/tau_i);
    ``tau_ref`` defaults to the frame's own exposure.
    """
    tau_ref = frame.exposure_time if tau_ref is None else tau_ref
    y = forward_transform(frame.channels, curve, sigma0)
    return StabilizedFrame(y, frame.exposure_time, sigma0 * np.sqrt(tau_ref / frame.exposure_time))


def vst_inverse(frame: StabilizedFrame, curve: NoiseCurve, sigma0: float = 1.0) -> QuadFrame:
    return QuadFrame(inverse_transform(frame.channels, curve, sigma0), frame.exposure_time)
