"""YUVW decorrelation of (r, g1, g2, b) quads and linear RGB color handling."""

from __future__ import annotations

import numpy as np

# rows: Y, U, V, W; columns: r, g1, g2, b
YUVW_MATRIX = np.array([
    [0.5, 0.5, 0.5, 0.5],
    [-0.5, 0.5, 0.5, -0.5],
    [0.65, 0.2784, -0.2784, -0.65],
    [-0.2784, 0.65, -0.65, 0.2784],
])


def yuvw_forward(planes: np.ndarray) -> np.ndarray:
    """(4, h, w) quad planes -> (4, h, w) Y, U, V, W planes."""
    planes = np.asarray(planes, dtype=np.float64)
    if planes.shape[0] != 4:
        raise ValueError(f"expected 4 planes, got {planes.shape[0]}")
    return np.tensordot(YUVW_MATRIX, planes, axes=1)


def yuvw_inverse(planes: np.ndarray) -> np.ndarray:
    """Apply the transpose; the printed matrix is orthonormal to about 2e-5."""
    planes = np.asarray(planes, dtype=np.float64)
    if planes.shape[0] != 4:
        raise ValueError(f"expected 4 planes, got {planes.shape[0]}")
    return np.tensordot(YUVW_MATRIX.T, planes, axes=1)


def luma(planes: np.ndarray) -> np.ndarray:
    """Y plane only."""
    return np.tensordot(YUVW_MATRIX[0], np.asarray(planes, dtype=np.float64), axes=1)


def camera_to_srgb(rgb: np.ndarray, matrix=None) -> np.ndarray:
    matrix = np.eye(3) if matrix is None else np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (3, 3):
        raise ValueError(f"color matrix must be 3x3, got {matrix.shape}")
    return np.tensordot(matrix, np.asarray(rgb, dtype=np.float64), axes=1)


def white_balance(rgb: np.ndarray, gains) -> np.ndarray:
    gains = np.asarray(gains, dtype=np.float64)
    if gains.shape != (3,) or np.any(gains <= 0):
        raise ValueError(f"white balance needs 3 positive gains, got {gains}")
    return np.asarray(rgb, dtype=np.float64) * gains[:, None, None]
