"""Oriented kernel banks over the dihedral group of order 8.

Variant order per base kernel: rotations by 0, 90, 180, 270 degrees (CCW),
then the horizontal mirror of each of those.  In the expanded bank the
variants of base kernel ``i`` occupy indices ``8*i .. 8*i + 7``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..tensor_core import ConvSpec, ValidationError, conv2d, gap
from .attention import KernelBank, aggregate_kernels, kernel_attention

N_ORIENTATIONS = 8


def rotate90(k: np.ndarray, times: int = 1) -> np.ndarray:
    """Rotate the last two axes CCW: ``out[i][j] = in[j][K-1-i]``."""
    out = k
    for _ in range(times % 4):
        out = np.swapaxes(out, -1, -2)[..., ::-1, :]
    return out


def mirror(k: np.ndarray) -> np.ndarray:
    return k[..., ::-1]


def dihedral_variants(k: np.ndarray) -> list[np.ndarray]:
    rots = [rotate90(k, t) for t in range(4)]
    return rots + [mirror(r) for r in rots]


@lru_cache(maxsize=None)
def _gather_indices(size: int) -> np.ndarray:
    """[8, size*size] flat source indices for each variant."""
    grid = np.arange(size * size).reshape(size, size)
    return np.stack([v.reshape(-1) for v in dihedral_variants(grid)])


def _check_square(kernels: np.ndarray):
    if kernels.shape[-1] != kernels.shape[-2]:
        raise ValidationError(f"orientation needs square kernels, got {kernels.shape[-2:]}")


def orient_kernels(kernels: np.ndarray) -> np.ndarray:
    """[K, Cout, Cin, k, k] -> [8K, Cout, Cin, k, k]."""
    _check_square(kernels)
    K, size = kernels.shape[0], kernels.shape[-1]
    flat = kernels.reshape(*kernels.shape[:-2], size * size)
    idx = _gather_indices(size)
    out = flat[..., idx]  # [K, Cout, Cin, 8, k*k]
    out = np.moveaxis(out, -2, 1)
    return out.reshape(K * N_ORIENTATIONS, *kernels.shape[1:])


def orient_kernels_vjp(g_oriented: np.ndarray, base_shape) -> np.ndarray:
    """Accumulate gradients of every variant back onto its base kernel."""
    K, size = base_shape[0], base_shape[-1]
    idx = _gather_indices(size)
    g = g_oriented.reshape(K, N_ORIENTATIONS, *base_shape[1:-2], size * size)
    g = np.moveaxis(g, 1, -2)  # [K, Cout, Cin, 8, k*k]
    out = np.zeros((*base_shape[:-2], size * size), dtype=g_oriented.dtype)
    for v in range(N_ORIENTATIONS):
        out[..., idx[v]] += g[..., v, :]
    return out.reshape(base_shape)


def orient_bank(bank: KernelBank) -> KernelBank:
    return KernelBank(orient_kernels(bank.kernels), frozen=bank.frozen)


def odconv_forward(x: np.ndarray, bank: KernelBank, attn_params: dict | None,
                   spec: ConvSpec | None = None, attention: np.ndarray | None = None) -> np.ndarray:
    """Orientation-pooled dynamic convolution.

    Attention over the 8K oriented kernels comes from ``gap(x)`` through the
    kernel-attention generator unless ``attention`` ([8K] or [N, 8K]) is
    given.  Default padding keeps the spatial size ("same").
    """
    size = bank.kernels.shape[-1]
    if spec is None:
        spec = ConvSpec.make(1, size // 2)
    oriented = orient_kernels(bank.kernels)
    if attention is None:
        attention = kernel_attention(None, gap(x), attn_params)
    A = np.broadcast_to(np.atleast_2d(attention), (x.shape[0], oriented.shape[0]))
    return conv2d(x, aggregate_kernels(oriented, A), spec)


__all__ = [
    "N_ORIENTATIONS",
    "dihedral_variants",
    "mirror",
    "odconv_forward",
    "orient_bank",
    "orient_kernels",
    "orient_kernels_vjp",
    "rotate90",
]
