"""The 30 base high-pass residual kernels of the Spatial Rich Model.

Composition: 8 first-order, 4 second-order and 8 third-order directional
differences, SQUARE 3x3 and 5x5, and 4 rotations each of EDGE 3x3 and 5x5.
Every kernel is zero-padded to 5x5 and divided by its normalizer so that
the largest coefficient magnitude is 1.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

# 8 compass directions as (row, col) steps
_DIRECTIONS = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)]

_SQUARE3 = np.array([[-1, 2, -1],
                     [2, -4, 2],
                     [-1, 2, -1]], dtype=np.float64)

_SQUARE5 = np.array([[-1, 2, -2, 2, -1],
                     [2, -6, 8, -6, 2],
                     [-2, 8, -12, 8, -2],
                     [2, -6, 8, -6, 2],
                     [-1, 2, -2, 2, -1]], dtype=np.float64)


def _pad5(kernel: np.ndarray) -> np.ndarray:
    out = np.zeros((5, 5))
    off = (5 - kernel.shape[0]) // 2
    out[off:off + kernel.shape[0], off:off + kernel.shape[1]] = kernel
    return out


def _directional(coeffs: dict[int, float], step) -> np.ndarray:
    k = np.zeros((5, 5))
    for t, c in coeffs.items():
        k[2 + t * step[0], 2 + t * step[1]] = c
    return k


def _edge(square: np.ndarray) -> list[np.ndarray]:
    half = square.copy()
    half[square.shape[0] // 2 + 1:] = 0
    return [_pad5(np.rot90(half, r)) for r in range(4)]


@lru_cache(maxsize=1)
def _bank() -> tuple[np.ndarray, np.ndarray]:
    kernels: list[np.ndarray] = []
    norms: list[float] = []

    def add(kernel, norm):
        kernels.append(kernel / norm)
        norms.append(norm)

    for d in _DIRECTIONS:
        add(_directional({0: -1, 1: 1}, d), 1.0)
    for d in _DIRECTIONS[:4]:
        add(_directional({-1: 1, 0: -2, 1: 1}, d), 2.0)
    for d in _DIRECTIONS:
        add(_directional({-1: 1, 0: -3, 1: 3, 2: -1}, d), 3.0)
    add(_pad5(_SQUARE3), 4.0)
    add(_SQUARE5.copy(), 12.0)
    for k in _edge(_SQUARE3):
        add(k, 4.0)
    for k in _edge(_SQUARE5):
        add(k, 12.0)
    bank = np.stack(kernels)
    bank.flags.writeable = False
    normalizers = np.array(norms)
    normalizers.flags.writeable = False
    return bank, normalizers


def srm_bank() -> np.ndarray:
    """(30, 5, 5) float64 read-only array of normalized SRM kernels."""
    return _bank()[0]


def srm_normalizers() -> np.ndarray:
    return _bank()[1]


def srm_weight(dtype=torch.float32) -> torch.Tensor:
    """Bank shaped as a conv weight, (30, 1, 5, 5)."""
    return torch.tensor(srm_bank(), dtype=dtype).unsqueeze(1)


def srm_residuals(x: torch.Tensor) -> torch.Tensor:
    """Fixed-bank residuals of a (B, 1, H, W) batch, same spatial size."""
    if x.dim() != 4 or x.shape[1] != 1:
        raise ValueError(f"expected a single-channel (B, 1, H, W) batch, got {tuple(x.shape)}")
    return F.conv2d(x, srm_weight(x.dtype), padding=2)


def format_bank() -> str:
    """Plain-text dump of the bank (integer coefficients over their normalizer)."""
    lines = []
    for i, (k, norm) in enumerate(zip(srm_bank(), srm_normalizers())):
        lines.append(f"kernel {i:2d}  /{norm:g}")
        for row in np.rint(k * norm).astype(int):
            lines.append("  " + " ".join(f"{v:4d}" for v in row))
    return "\n".join(lines) + "\n"
