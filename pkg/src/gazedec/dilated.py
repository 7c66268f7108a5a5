"""Single-output dilated convolution with no padding.

    z(x, y) = sum_k sum_m sum_n u(x + n r1, y + m r2, k) w[n, m, k] + b

This is a cross-correlation (no kernel flip), anchored at the top-left tap.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DilatedKernel:
    weights: np.ndarray  # (N, M, K)
    bias: float = 0.0
    rates: tuple[int, int] = (1, 1)

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim == 2:
            w = w[:, :, None]
        if w.ndim != 3 or min(w.shape) < 1:
            raise ValueError(f"weights must be N x M x K with N, M, K >= 1, got {w.shape}")
        r1, r2 = (int(r) for r in self.rates)
        if r1 < 1 or r2 < 1:
            raise ValueError(f"dilation rates must be >= 1, got {self.rates}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "rates", (r1, r2))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.weights.shape


def output_shape(in_shape, kernel_shape, rates) -> tuple[int, int]:
    X, Y = in_shape[:2]
    N, M = kernel_shape[:2]
    return X - (N - 1) * rates[0], Y - (M - 1) * rates[1]


def dilated_conv(u, kern: DilatedKernel) -> np.ndarray:
    """Valid dilated cross-correlation of feature map `u` (X, Y, K)."""
    u = np.asarray(u)
    if u.ndim == 2:
        u = u[:, :, None]
    N, M, K = kern.shape
    if u.ndim != 3 or u.shape[2] != K:
        raise ValueError(f"input depth {u.shape[2:] or None} does not match kernel depth {K}")
    r1, r2 = kern.rates
    Xo, Yo = output_shape(u.shape, kern.shape, kern.rates)
    if Xo <= 0 or Yo <= 0:
        raise ValueError(f"input {u.shape[:2]} too small for kernel {N}x{M} at rates {kern.rates}")
    w = kern.weights
    dtype = np.result_type(u, w, kern.bias)
    z = np.full((Xo, Yo), kern.bias, dtype=dtype)
    for n in range(N):
        for m in range(M):
            patch = u[n * r1:n * r1 + Xo, m * r2:m * r2 + Yo, :]
            z += patch @ w[n, m, :]
    return z


def receptive_field(kern: DilatedKernel) -> tuple[int, int]:
    N, M, _ = kern.shape
    r1, r2 = kern.rates
    return (N - 1) * r1 + 1, (M - 1) * r2 + 1


def stacked_receptive_field(kernels) -> tuple[int, int]:
    """Receptive field of stride-1 layers applied in sequence."""
    h, w = 1, 1
    for k in kernels:
        kh, kw = receptive_field(k)
        h += kh - 1
        w += kw - 1
    return h, w
