"""Minimal HWC convolutions with hand-written adjoints (used by the surrogate editor)."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """x: (H, W, Cin), w: (k, k, Cin, Cout) -> (Ho, Wo, Cout)."""
    k = w.shape[0]
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride]
    # win: (Ho, Wo, Cin, k, k)
    return np.einsum("hwcij,ijco->hwo", win, w, optimize=True)


def conv2d_vjp_input(g: np.ndarray, w: np.ndarray, in_shape, stride: int, pad: int) -> np.ndarray:
    """Adjoint of ``conv2d`` with respect to its input."""
    k = w.shape[0]
    H, W, _ = in_shape
    Ho, Wo = g.shape[:2]
    gx = np.zeros((H + 2 * pad, W + 2 * pad, w.shape[2]))
    for i in range(k):
        for j in range(k):
            gx[i:i + stride * Ho:stride, j:j + stride * Wo:stride] += g @ w[i, j].T
    return gx[pad:pad + H, pad:pad + W]


def conv_transpose2d(x: np.ndarray, w: np.ndarray, out_shape, stride: int, pad: int) -> np.ndarray:
    """Transposed convolution: the input-adjoint of ``conv2d`` applied as a forward map.

    ``w`` has the layout of the mirrored forward conv, (k, k, Cout, Cin_of_x).
    """
    H, W = out_shape
    return conv2d_vjp_input(x, w, (H, W, w.shape[2]), stride, pad)
