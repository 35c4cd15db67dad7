"""Preview rendering of a fused RAW HDR image: demosaick, white balance, sRGB, tone map.

Only global tone curves are provided (gamma and Reinhard); the 8-bit result
is written as a binary PPM.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .colorspace import camera_to_srgb, white_balance
from .raw_io import cfa_channel_map, reassemble_cfa

_RB_KERNEL = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 4.0
_G_KERNEL = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=np.float64) / 4.0
_LUMA = np.array([0.2126, 0.7152, 0.0722])


@dataclass
class RenderParams:
    wb_gains: tuple[float, float, float] = (1.0, 1.0, 1.0)
    srgb_matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    tonemap: str = "gamma"
    gamma_value: float = 1 / 2.2
    reinhard_key: float = 0.18
    output_white: float = 99.5

    def __post_init__(self):
        if any(g <= 0 for g in self.wb_gains):
            raise ValueError("white balance gains must be positive")
        if not 0 < self.output_white <= 100:
            raise ValueError("output_white percentile must lie in (0, 100]")
        if self.tonemap not in ("gamma", "reinhard"):
            raise ValueError(f"unknown tone map {self.tonemap!r}")


def cfa_masks(shape, cfa_pattern: str) -> np.ndarray:
    """(3, H, W) boolean masks of the R, G and B sample sites."""
    cell = cfa_channel_map(cfa_pattern)
    color = np.array([0, 1, 1, 2])[cell]           # quad plane -> rgb index
    rows, cols = np.indices(shape)
    site = color[rows % 2, cols % 2]
    return np.stack([site == c for c in range(3)])


def demosaick(hdr, cfa_pattern: str | None = None) -> np.ndarray:
    """Bilinear demosaicking of 4-plane data to a full-resolution (3, H, W) image.

    Missing samples are normalized averages of the neighbouring sites of the
    same color, so borders stay consistent and measured samples are kept as is.
    """
    planes = getattr(hdr, "channels", hdr)
    pattern = cfa_pattern or getattr(hdr, "cfa_pattern", "RGGB")
    mosaic = reassemble_cfa(np.asarray(planes, dtype=np.float64), pattern).data
    masks = cfa_masks(mosaic.shape, pattern)
    out = np.empty((3,) + mosaic.shape)
    for c, kernel in enumerate((_RB_KERNEL, _G_KERNEL, _RB_KERNEL)):
        m = masks[c].astype(np.float64)
        num = ndimage.convolve(mosaic * m, kernel, mode="constant")
        den = ndimage.convolve(m, kernel, mode="constant")
        out[c] = np.where(masks[c], mosaic, num / den)
    return out


def tone_curve(rgb: np.ndarray, params: RenderParams, *, scale: float, log_mean: float = 1.0) -> np.ndarray:
    """Pointwise tone mapping with the global statistics fixed; returns floats in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if params.tonemap == "gamma":
        x = np.clip(rgb / scale, 0.0, 1.0) if scale > 0 else np.zeros_like(rgb)
    else:
        lum = np.maximum(np.tensordot(_LUMA, np.maximum(rgb, 0.0), axes=1), 0.0)
        ls = params.reinhard_key * lum / log_mean
        ratio = np.divide(params.reinhard_key / log_mean, 1.0 + ls)   # (Ls / (1 + Ls)) / lum
        x = np.clip(np.maximum(rgb, 0.0) * ratio, 0.0, 1.0)
    return x**params.gamma_value


def tone_map(rgb: np.ndarray, params: RenderParams = RenderParams()) -> np.ndarray:
    """Linear RGB -> uint8 RGB.

    gamma: the ``output_white`` percentile maps to 1, then clamp and gamma.
    reinhard: luminance is scaled by key / log-average and compressed by
    L / (1 + L), colors follow their luminance, then gamma.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if not np.all(np.isfinite(rgb)):
        raise ValueError("tone mapping needs finite values")
    if params.tonemap == "gamma":
        x = tone_curve(rgb, params, scale=float(np.percentile(rgb, params.output_white)))
    else:
        lum = np.tensordot(_LUMA, np.maximum(rgb, 0.0), axes=1)
        positive = lum[lum > 0]
        if positive.size == 0:
            return np.zeros(rgb.shape, dtype=np.uint8)
        log_mean = float(np.exp(np.mean(np.log(positive))))
        x = tone_curve(rgb, params, scale=1.0, log_mean=log_mean)
    return np.rint(255.0 * x).astype(np.uint8)


def render(hdr, params: RenderParams = RenderParams(), cfa_pattern: str | None = None) -> np.ndarray:
    rgb = demosaick(hdr, cfa_pattern)
    rgb = white_balance(rgb, params.wb_gains)
    rgb = camera_to_srgb(rgb, params.srgb_matrix)
    return tone_map(rgb, params)
