"""Attention mechanisms for dynamic convolution.

Channel gating (squeeze-and-excitation style), the kernel-attention
generator, kernel-bank aggregation, the recurrent kernel representation and
top-k hard kernel gating.  All functions work on batches: per-sample
vectors are rows of a 2-D array.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..tensor_core import (
    DimensionError,
    ValidationError,
    dense,
    gap,
    gap_vjp,
    sigmoid,
    softmax,
    softmax_vjp,
)


@dataclass
class KernelBank:
    """K parallel kernels sharing one shape, stacked on axis 0."""

    kernels: np.ndarray
    frozen: bool = False

    def __post_init__(self):
        if self.kernels.ndim < 2 or self.kernels.shape[0] < 1:
            raise DimensionError(f"kernel bank needs shape [K, ...] with K >= 1, got {self.kernels.shape}")

    @property
    def K(self) -> int:
        return self.kernels.shape[0]


@dataclass
class KernelRepresentation:
    state: np.ndarray
    layer_index: int = 0

    @classmethod
    def zeros(cls, dim: int = 32, batch: int | None = None) -> "KernelRepresentation":
        shape = (dim,) if batch is None else (batch, dim)
        return cls(np.zeros(shape), 0)


@dataclass
class GateMask:
    mask: np.ndarray
    k_active: int = field(init=False)

    def __post_init__(self):
        self.k_active = int(self.mask.sum(axis=-1).max()) if self.mask.size else 0


def _rows(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    return a[None, :] if a.ndim == 1 else a


# --- channel attention ------------------------------------------------------


def channel_attention(F: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Per-sample channel weights ``sigmoid(weight @ gap(F) + bias)``, shape [N, C]."""
    if F.ndim < 3:
        raise DimensionError(f"feature map must be [N,C,spatial...], got {F.shape}")
    if weight.shape != (F.shape[1], F.shape[1]):
        raise DimensionError(f"weight must be [{F.shape[1]},{F.shape[1]}], got {weight.shape}")
    A = sigmoid(dense(gap(F), weight, bias))
    # saturated logits round to exactly 0 or 1; keep the weights strictly inside
    info = np.finfo(A.dtype)
    return np.clip(A, info.tiny, 1 - info.epsneg)


def channel_attention_vjp(gA, F, weight, A):
    """Returns ``(gF, gweight, gbias)`` given the forward output ``A``."""
    gpre = gA * A * (1 - A)
    g = gap(F)
    gF = gap_vjp(gpre @ weight, F.shape)
    return gF, gpre.T @ g, gpre.sum(axis=0)


def apply_channel_gate(F: np.ndarray, A: np.ndarray) -> np.ndarray:
    A = _rows(A)
    if A.shape != F.shape[:2]:
        raise DimensionError(f"attention shape {A.shape} does not match feature channels {F.shape[:2]}")
    return F * A.reshape(A.shape + (1,) * (F.ndim - 2))


def apply_channel_gate_vjp(gy, F, A):
    """Returns ``(gF, gA)``."""
    A = _rows(A)
    gF = gy * A.reshape(A.shape + (1,) * (F.ndim - 2))
    gA = (gy * F).sum(axis=tuple(range(2, F.ndim)))
    return gF, gA


# --- kernel attention generator --------------------------------------------


def generator_input(kr: KernelRepresentation | np.ndarray | None, gap_feat: np.ndarray) -> np.ndarray:
    g = _rows(gap_feat)
    if kr is None:
        return g
    state = kr.state if isinstance(kr, KernelRepresentation) else kr
    state = np.broadcast_to(_rows(state), (g.shape[0], np.shape(state)[-1]))
    return np.concatenate([state, g], axis=1)


def kernel_logits(z: np.ndarray, params: dict) -> tuple[np.ndarray, tuple]:
    """Two-layer bottleneck ``w2 @ relu(w1 @ z + b1) + b2``."""
    hpre = dense(z, params["w1"], params["b1"])
    h = np.maximum(hpre, 0)
    return dense(h, params["w2"], params["b2"]), (z, hpre, h)


def kernel_logits_vjp(glogits, params: dict, cache) -> tuple[np.ndarray, dict]:
    z, hpre, h = cache
    grads = {"w2": glogits.T @ h, "b2": glogits.sum(axis=0)}
    gh = (glogits @ params["w2"]) * (hpre > 0)
    grads["w1"] = gh.T @ z
    grads["b1"] = gh.sum(axis=0)
    return gh @ params["w1"], grads


def kernel_attention(kr, gap_feat: np.ndarray, params: dict) -> np.ndarray:
    """Softmax kernel attention from ``concat(kr, gap_feat)``; ``kr`` may be None."""
    logits, _ = kernel_logits(generator_input(kr, gap_feat), params)
    A = softmax(logits)
    return A[0] if np.ndim(gap_feat) == 1 else A


def init_generator(rng, in_dim: int, out_dim: int, reduction: int = 4, dtype=np.float64) -> dict:
    from ..tensor_core import he_normal

    hidden = max(4, in_dim // reduction)
    return {
        "w1": he_normal(rng, (hidden, in_dim), in_dim, dtype),
        "b1": np.zeros(hidden, dtype),
        "w2": he_normal(rng, (out_dim, hidden), hidden, dtype),
        "b2": np.zeros(out_dim, dtype),
    }


# --- aggregation ------------------------------------------------------------


def aggregate_kernels(bank: KernelBank | np.ndarray, A: np.ndarray) -> np.ndarray:
    """Weighted sum of the bank's kernels.

    ``A`` of shape [K] yields one kernel; ``A`` of shape [N, K] yields one
    kernel per sample, stacked on a leading batch axis.
    """
    kernels = bank.kernels if isinstance(bank, KernelBank) else bank
    A = np.asarray(A)
    if A.shape[-1] != kernels.shape[0]:
        raise DimensionError(f"attention length {A.shape[-1]} does not match bank size K={kernels.shape[0]}")
    return np.tensordot(A, kernels, axes=([A.ndim - 1], [0]))


def aggregate_kernels_vjp(gW: np.ndarray, bank: KernelBank | np.ndarray, A: np.ndarray):
    """Returns ``(gA, gkernels)``; ``gkernels`` is None for a frozen bank."""
    kernels = bank.kernels if isinstance(bank, KernelBank) else bank
    frozen = isinstance(bank, KernelBank) and bank.frozen
    K = kernels.shape[0]
    flatW = kernels.reshape(K, -1)
    A = np.asarray(A)
    gflat = gW.reshape(-1, flatW.shape[1]) if A.ndim == 2 else gW.reshape(1, -1)
    gA = gflat @ flatW.T
    gA = gA if A.ndim == 2 else gA[0]
    gk = None
    if not frozen:
        gk = (np.atleast_2d(A).T @ gflat).reshape(kernels.shape)
    return gA, gk


# --- kernel representation --------------------------------------------------


def update_kernel_representation(prev: KernelRepresentation, gap_feat: np.ndarray,
                                 params: dict) -> KernelRepresentation:
    """``tanh(U @ prev + V @ gap_feat + b)``, advancing ``layer_index`` by one."""
    state = np.tanh(_kr_pre(prev.state, gap_feat, params))
    if np.ndim(prev.state) == 1 and np.ndim(gap_feat) == 1:
        state = state[0]
    return KernelRepresentation(state, prev.layer_index + 1)


def _kr_pre(prev_state, gap_feat, params):
    g = _rows(gap_feat)
    s = np.broadcast_to(_rows(prev_state), (g.shape[0], params["U"].shape[1]))
    return s @ params["U"].T + g @ params["V"].T + params["b"]


def update_kernel_representation_vjp(gnext, prev_state, gap_feat, params, next_state):
    """Returns ``(gprev, ggap, grads)`` for the batched recurrence."""
    gpre = _rows(gnext) * (1 - _rows(next_state) ** 2)
    g = _rows(gap_feat)
    s = np.broadcast_to(_rows(prev_state), (g.shape[0], params["U"].shape[1]))
    grads = {"U": gpre.T @ s, "V": gpre.T @ g, "b": gpre.sum(axis=0)}
    return gpre @ params["U"], gpre @ params["V"], grads


# --- hard gating ------------------------------------------------------------


def topk_mask(logits: np.ndarray, k_active: int) -> np.ndarray:
    logits = np.asarray(logits)
    K = logits.shape[-1]
    if not 1 <= k_active <= K:
        raise ValidationError(f"k_active must lie in [1, {K}], got {k_active}")
    # stable sort on -logits keeps the lowest index first among ties
    order = np.argsort(-logits, axis=-1, kind="stable")[..., :k_active]
    mask = np.zeros(logits.shape, dtype=np.float64)
    np.put_along_axis(mask, order, 1.0, axis=-1)
    return mask


def hard_select(logits: np.ndarray, k_active: int) -> GateMask:
    return GateMask(topk_mask(logits, k_active))


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax restricted to the active entries; inactive weights are exactly 0."""
    z = np.where(mask > 0, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z) * (mask > 0)
    return e / e.sum(axis=-1, keepdims=True)


def hard_attention_weights(logits: np.ndarray, k_active: int) -> tuple[np.ndarray, np.ndarray]:
    """Forward weights over the top-k kernels plus the full softmax.

    The second value is the surrogate used by the straight-through backward
    pass: ``glogits = softmax_vjp(gA, soft)``.
    """
    mask = topk_mask(logits, k_active)
    return masked_softmax(logits, mask).astype(logits.dtype), softmax(logits)


def straight_through_vjp(gA: np.ndarray, soft: np.ndarray) -> np.ndarray:
    return softmax_vjp(gA, soft)
