"""Dense-tensor substrate: deterministic RNG and differentiable primitives.

Tensors are plain ``numpy.ndarray`` objects.  Every primitive comes as a
forward function plus a ``*_vjp`` companion that maps an output cotangent
back onto the inputs.  Gradients are composed by hand in the layers; there
is no tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when tensor shapes do not line up."""


class ValidationError(ValueError):
    """Raised for out-of-range arguments (labels, counts, options)."""


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class Prng:
    """SplitMix64 stream with a Box-Muller normal sampler.

    The stream is counter based, so drawing ``n`` values at once gives the
    same numbers as drawing them one at a time.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self.state) + steps * _GAMMA
        self.state = (self.state + n * int(_GAMMA)) & _MASK64
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        """Uniform draws on ``[low, high)`` with 53-bit resolution."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size, std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        n = int(np.prod(size))
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1], keeps log finite
        u2 = u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return (mean + std * z[:n]).reshape(size)

    def integers(self, high: int, size=None):
        """Integers in ``[0, high)``."""
        u = self.uniform(size)
        out = np.minimum(np.floor(np.asarray(u) * high), high - 1).astype(np.int64)
        return int(out) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[k] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn(self, offset: int) -> "Prng":
        """Independent child stream keyed by ``offset``."""
        child = Prng(self.state ^ ((offset * 0xD1B54A32D192ED03) & _MASK64))
        child.next_u64(1)
        return child


def he_normal(rng: Prng, shape: Sequence[int], fan_in: int, dtype=np.float64) -> np.ndarray:
    return rng.normal(tuple(shape), std=np.sqrt(2.0 / fan_in)).astype(dtype)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if any(s < 1 for s in self.stride):
            raise ValidationError(f"stride must be positive, got {self.stride}")
        if any(p < 0 for p in self.padding):
            raise ValidationError(f"padding must be non-negative, got {self.padding}")

    @classmethod
    def make(cls, stride=1, padding=0) -> "ConvSpec":
        s = (stride, stride) if np.isscalar(stride) else tuple(stride)
        p = (padding, padding) if np.isscalar(padding) else tuple(padding)
        return cls(tuple(int(v) for v in s), tuple(int(v) for v in p))

    def out_size(self, size: Sequence[int], ksize: Sequence[int]) -> tuple[int, ...]:
        out = tuple(
            (n + 2 * p - k) // s + 1
            for n, k, s, p in zip(size, ksize, self.stride, self.padding)
        )
        if any(n + 2 * p - k < 0 for n, k, p in zip(size, ksize, self.padding)):
            raise DimensionError(
                f"kernel {tuple(ksize)} does not fit padded input {tuple(size)} "
                f"with padding {self.padding}"
            )
        return out


def _check_conv(x: np.ndarray, w: np.ndarray):
    if x.ndim != 4:
        raise DimensionError(f"input must be [N,Cin,H,W], got shape {x.shape}")
    if w.ndim not in (4, 5):
        raise DimensionError(f"kernel must be [Cout,Cin,Kh,Kw] or [N,Cout,Cin,Kh,Kw], got {w.shape}")
    if x.shape[1] != w.shape[-3]:
        raise DimensionError(
            f"Cin mismatch: input axis 1 has {x.shape[1]}, kernel axis {w.ndim - 3} has {w.shape[-3]}"
        )
    if w.ndim == 5 and w.shape[0] != x.shape[0]:
        raise DimensionError(
            f"per-sample kernel batch {w.shape[0]} does not match input batch {x.shape[0]}"
        )


def _pad(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    ph, pw = spec.padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _im2col(x: np.ndarray, kh: int, kw: int, spec: ConvSpec):
    n, c, h, w = x.shape
    ho, wo = spec.out_size((h, w), (kh, kw))
    win = sliding_window_view(_pad(x, spec), (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * spec.stride[0] + 1 : spec.stride[0],
              : (wo - 1) * spec.stride[1] + 1 : spec.stride[1]]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x: np.ndarray, w: np.ndarray, spec: ConvSpec = ConvSpec()) -> np.ndarray:
    """Zero-padded cross-correlation.

    ``w`` is either a shared kernel ``[Cout,Cin,Kh,Kw]`` or a per-sample
    kernel ``[N,Cout,Cin,Kh,Kw]`` (what dynamic layers produce).
    """
    return conv2d_forward(x, w, spec)[0]


def conv2d_forward(x: np.ndarray, w: np.ndarray, spec: ConvSpec = ConvSpec()):
    """Like :func:`conv2d` but also returns the im2col matrix for reuse in the vjp."""
    _check_conv(x, w)
    n = x.shape[0]
    cout, kh, kw = w.shape[-4], w.shape[-2], w.shape[-1]
    cols, ho, wo = _im2col(x, kh, kw, spec)
    if w.ndim == 4:
        y = cols @ w.reshape(cout, -1).T
    else:
        y = cols @ w.reshape(n, cout, -1).transpose(0, 2, 1)
    return y.transpose(0, 2, 1).reshape(n, cout, ho, wo), cols


def conv2d_vjp(gy: np.ndarray, x: np.ndarray, w: np.ndarray, spec: ConvSpec = ConvSpec(),
               need_w: bool = True, cols: np.ndarray | None = None):
    """Returns ``(gx, gw)``; ``gw`` is None when ``need_w`` is false."""
    n, cin, h, wd = x.shape
    cout, kh, kw = w.shape[-4], w.shape[-2], w.shape[-1]
    ho, wo = gy.shape[2:]
    if cols is None and need_w:
        cols = _im2col(x, kh, kw, spec)[0]
    g2 = gy.reshape(n, cout, ho * wo).transpose(0, 2, 1)
    gw = None
    if w.ndim == 4:
        if need_w:
            gw = np.tensordot(g2, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
        gcols = g2 @ w.reshape(cout, -1)
    else:
        if need_w:
            gw = (g2.transpose(0, 2, 1) @ cols).reshape(w.shape)
        gcols = g2 @ w.reshape(n, cout, -1)
    gcols = gcols.reshape(n, ho, wo, cin, kh, kw)
    ph, pw = spec.padding
    sh, sw = spec.stride
    gxp = np.zeros((n, cin, h + 2 * ph, wd + 2 * pw), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += (
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    gx = gxp[:, :, ph : ph + h, pw : pw + wd]
    return gx, gw


def _spec_1d(stride: int, padding: int) -> ConvSpec:
    return ConvSpec((1, int(stride)), (0, int(padding)))


def conv1d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """1-D cross-correlation; ``x`` is [N,Cin,L], ``w`` is [Cout,Cin,K] or [N,Cout,Cin,K]."""
    if x.ndim != 3:
        raise DimensionError(f"input must be [N,Cin,L], got shape {x.shape}")
    y = conv2d(x[:, :, None, :], w[..., None, :], _spec_1d(stride, padding))
    return y[:, :, 0, :]


def conv1d_vjp(gy, x, w, stride: int = 1, padding: int = 0, need_w: bool = True):
    gx, gw = conv2d_vjp(gy[:, :, None, :], x[:, :, None, :], w[..., None, :],
                        _spec_1d(stride, padding), need_w=need_w)
    return gx[:, :, 0, :], (None if gw is None else gw[..., 0, :])


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))


def _maxpool_windows(x: np.ndarray, window, stride):
    kh, kw = window
    sh, sw = stride
    h, w = x.shape[-2:]
    if kh > h or kw > w:
        raise DimensionError(f"pool window {window} larger than input {(h, w)}")
    ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
    win = sliding_window_view(x, (kh, kw), axis=(-2, -1))
    win = win[..., : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw, :, :]
    return win.reshape(*win.shape[:-2], kh * kw)


def maxpool2d_forward(x: np.ndarray, window=2, stride=None):
    """Returns the pooled map and the flat in-window argmax (first occurrence)."""
    window = _pair(window)
    stride = window if stride is None else _pair(stride)
    win = _maxpool_windows(x, window, stride)
    idx = win.argmax(axis=-1)
    return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0], idx


def maxpool2d(x: np.ndarray, window=2, stride=None) -> np.ndarray:
    return maxpool2d_forward(x, window, stride)[0]


def maxpool2d_vjp(gy: np.ndarray, x: np.ndarray, window=2, stride=None, argmax=None):
    window = _pair(window)
    stride = window if stride is None else _pair(stride)
    if argmax is None:
        argmax = maxpool2d_forward(x, window, stride)[1]
    kh, kw = window
    sh, sw = stride
    ho, wo = gy.shape[-2:]
    gx = np.zeros_like(x, dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            hit = argmax == i * kw + j
            gx[..., i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += gy * hit
    return gx


def maxpool1d_forward(x: np.ndarray, window: int = 2, stride: int | None = None):
    stride = window if stride is None else stride
    y, idx = maxpool2d_forward(x[..., None, :], (1, window), (1, stride))
    return y[..., 0, :], idx


def maxpool1d(x, window: int = 2, stride: int | None = None):
    return maxpool1d_forward(x, window, stride)[0]


def maxpool1d_vjp(gy, x, window: int = 2, stride: int | None = None, argmax=None):
    stride = window if stride is None else stride
    gx = maxpool2d_vjp(gy[..., None, :], x[..., None, :], (1, window), (1, stride), argmax)
    return gx[..., 0, :]


def gap(x: np.ndarray) -> np.ndarray:
    """Global average pool over every axis after the channel axis."""
    if x.ndim < 3 or any(d < 1 for d in x.shape[2:]):
        raise DimensionError(f"gap needs [N,C,spatial...] input, got {x.shape}")
    return x.mean(axis=tuple(range(2, x.ndim)))


def gap_vjp(gy: np.ndarray, x_shape: Sequence[int]) -> np.ndarray:
    count = int(np.prod(x_shape[2:]))
    g = (gy / count).reshape(gy.shape + (1,) * (len(x_shape) - 2))
    return np.broadcast_to(g, tuple(x_shape)).copy()


# ---------------------------------------------------------------------------
# Dense, activations, loss
# ---------------------------------------------------------------------------


def dense(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"dense expects input [N,Din] and weight [Dout,Din]; got {x.shape} and {weight.shape}"
        )
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} does not match Dout={weight.shape[0]}")
    return x @ weight.T + bias


def dense_vjp(gy: np.ndarray, x: np.ndarray, weight: np.ndarray):
    """Returns ``(gx, gweight, gbias)``."""
    return gy @ weight, gy.T @ x, gy.sum(axis=0)


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


_POINTWISE = ("relu", "sigmoid", "tanh")


def pointwise(x: np.ndarray, fn: str) -> np.ndarray:
    if fn == "relu":
        return np.maximum(x, 0)
    if fn == "sigmoid":
        return sigmoid(x)
    if fn == "tanh":
        return np.tanh(x)
    raise ValidationError(f"unknown pointwise fn {fn!r}; expected one of {_POINTWISE}")


def pointwise_vjp(gy: np.ndarray, x: np.ndarray, y: np.ndarray, fn: str) -> np.ndarray:
    """``y`` is the forward output; relu'(0) is taken as 0."""
    if fn == "relu":
        return gy * (x > 0)
    if fn == "sigmoid":
        return gy * y * (1 - y)
    if fn == "tanh":
        return gy * (1 - y * y)
    raise ValidationError(f"unknown pointwise fn {fn!r}; expected one of {_POINTWISE}")


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_vjp(gs: np.ndarray, s: np.ndarray, axis: int = -1) -> np.ndarray:
    return s * (gs - (gs * s).sum(axis=axis, keepdims=True))


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean categorical cross-entropy and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} do not align")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValidationError(f"labels must lie in [0, {c}); got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))
    grad = np.exp(z - lse[:, None])
    grad[rows, labels] -= 1
    return loss, grad / n
