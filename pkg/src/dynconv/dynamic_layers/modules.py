"""Layer objects with hand-written backward passes.

Each module owns a ``params`` dict and a matching ``grads`` dict.  The
forward pass caches what the backward pass needs; ``backward`` accumulates
parameter gradients and returns the input cotangent.  State that flows
between layers without being a tensor argument (the kernel representation
and its gradient, dropout RNG, attention logging, FLOP tracing) travels in
a :class:`Context`.
"""

from __future__ import annotations

import numpy as np

from ..metrics import flops_conv2d, flops_dense
from ..tensor_core import (
    ConvSpec,
    Prng,
    conv2d_forward,
    conv2d_vjp,
    dense,
    dense_vjp,
    gap,
    gap_vjp,
    he_normal,
    maxpool2d_forward,
    maxpool2d_vjp,
    softmax,
)
from .attention import (
    channel_attention,
    channel_attention_vjp,
    hard_attention_weights,
    init_generator,
    kernel_logits,
    kernel_logits_vjp,
    straight_through_vjp,
)
from .orientation import N_ORIENTATIONS, orient_kernels, orient_kernels_vjp


class Context:
    def __init__(self, train: bool = False, rng: Prng | None = None,
                 record_attention: bool = False, trace: bool = False):
        self.train = train
        self.rng = rng
        self.record_attention = record_attention
        self.attention: list[tuple[str, np.ndarray]] = []
        self.charges: list[tuple[str, str, int]] | None = [] if trace else None
        self.kr = None
        self.g_kr = None

    def charge(self, path: str, category: str, amount: int):
        if self.charges is not None:
            self.charges.append((path, category, int(amount)))


class Module:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.frozen: set[str] = set()
        self.children: list[tuple[str, Module]] = []
        self.path = ""

    def add(self, name: str, module: "Module") -> "Module":
        self.children.append((name, module))
        return module

    def set_paths(self, prefix: str = ""):
        self.path = prefix.rstrip(".")
        for name, child in self.children:
            child.set_paths(f"{prefix}{name}.")

    def named_parameters(self, prefix: str = ""):
        for key, value in self.params.items():
            yield f"{prefix}{key}", self, key
        for name, child in self.children:
            yield from child.named_parameters(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, child in self.children:
            yield from child.modules()

    def zero_grad(self):
        for key, value in self.params.items():
            if key in self.grads and self.grads[key].shape == value.shape:
                self.grads[key].fill(0)
            else:
                self.grads[key] = np.zeros_like(value)
        for _, child in self.children:
            child.zero_grad()

    def _acc(self, key: str, g):
        if g is not None and key not in self.frozen:
            self.grads[key] += g

    def forward(self, x, ctx: Context):
        raise NotImplementedError

    def backward(self, g, ctx: Context):
        raise NotImplementedError


def _as4d(x, ndim):
    return x if ndim == 2 else x[:, :, None, :]


def _from4d(y, ndim):
    return y if ndim == 2 else y[:, :, 0, :]


class Conv(Module):
    """Static convolution, 1-D (``ndim=1``) or 2-D."""

    def __init__(self, cin, cout, k, stride=1, padding=0, ndim=2, bias=False,
                 rng: Prng | None = None, dtype=np.float64):
        super().__init__()
        self.ndim = ndim
        shape = (cout, cin, k, k) if ndim == 2 else (cout, cin, k)
        self.params["weight"] = he_normal(rng, shape, cin * k * (k if ndim == 2 else 1), dtype)
        if bias:
            self.params["bias"] = np.zeros(cout, dtype)
        self.spec = ConvSpec.make(stride, padding) if ndim == 2 else ConvSpec((1, stride), (0, padding))

    def kernel4d(self):
        w = self.params["weight"]
        return w if self.ndim == 2 else w[:, :, None, :]

    def forward(self, x, ctx):
        self.x = _as4d(x, self.ndim)
        w = self.kernel4d()
        y, self.cols = conv2d_forward(self.x, w, self.spec)
        if "bias" in self.params:
            y = y + self.params["bias"][:, None, None]
        ctx.charge(self.path, "convolution", flops_conv2d(w.shape[1], w.shape[0], w.shape[2], w.shape[3], *y.shape[2:]))
        return _from4d(y, self.ndim)

    def backward(self, g, ctx):
        g4 = _as4d(g, self.ndim)
        need_w = "weight" not in self.frozen
        gx, gw = conv2d_vjp(g4, self.x, self.kernel4d(), self.spec, need_w=need_w, cols=self.cols)
        if gw is not None:
            self._acc("weight", gw.reshape(self.params["weight"].shape))
        if "bias" in self.params:
            self._acc("bias", g4.sum(axis=(0, 2, 3)))
        return _from4d(gx, self.ndim)


class DynamicConv(Module):
    """Convolution whose kernel is an input-conditioned mix of a kernel bank.

    ``mode``:
      * ``"soft"``: softmax attention over the K kernels;
      * ``"hard"``: top-``k_active`` gating with straight-through gradients;
      * ``"oriented"``: softmax attention over the 8K dihedral variants.

    With ``kr_dim > 0`` the layer reads and updates the kernel
    representation carried in the context, and the generator sees
    ``concat(kr, gap(x))``; otherwise it sees ``gap(x)`` alone.
    """

    def __init__(self, cin, cout, k, stride=1, padding=0, ndim=2, num_kernels=4,
                 mode="soft", kr_dim=0, k_active=None, reduction=4,
                 rng: Prng | None = None, dtype=np.float64):
        super().__init__()
        if mode not in ("soft", "hard", "oriented"):
            raise ValueError(f"unknown dynamic conv mode {mode!r}")
        if mode == "oriented" and ndim != 2:
            raise ValueError("oriented banks need 2-D square kernels")
        self.ndim, self.mode, self.kr_dim = ndim, mode, kr_dim
        self.num_kernels = num_kernels
        self.k_active = k_active if k_active is not None else max(1, num_kernels // 2)
        self.soft_surrogate = False
        fan_in = cin * k * (k if ndim == 2 else 1)
        shape = (num_kernels, cout, cin, k, k) if ndim == 2 else (num_kernels, cout, cin, k)
        self.params["bank"] = he_normal(rng, shape, fan_in, dtype)
        n_logits = num_kernels * (N_ORIENTATIONS if mode == "oriented" else 1)
        gen = init_generator(rng, kr_dim + cin, n_logits, reduction, dtype)
        for key, value in gen.items():
            self.params[f"gen_{key}"] = value
        if kr_dim:
            self.params["kr_U"] = he_normal(rng, (kr_dim, kr_dim), kr_dim, dtype)
            self.params["kr_V"] = he_normal(rng, (kr_dim, cin), cin, dtype)
            self.params["kr_b"] = np.zeros(kr_dim, dtype)
        self.spec = ConvSpec.make(stride, padding) if ndim == 2 else ConvSpec((1, stride), (0, padding))

    @property
    def bank_frozen(self) -> bool:
        return "bank" in self.frozen

    def gen_params(self):
        return {key: self.params[f"gen_{key}"] for key in ("w1", "b1", "w2", "b2")}

    def effective_bank(self):
        bank = self.params["bank"]
        if self.ndim == 1:
            bank = bank[:, :, :, None, :]
        return orient_kernels(bank) if self.mode == "oriented" else bank

    def attention_weights(self, logits):
        soft = softmax(logits)
        if self.mode == "hard" and not self.soft_surrogate:
            weights, _ = hard_attention_weights(logits, self.k_active)
            return weights, soft
        return soft, soft

    def forward(self, x, ctx):
        x4 = _as4d(x, self.ndim)
        n, cin = x4.shape[:2]
        g = gap(x4)
        if self.kr_dim:
            kr_in = ctx.kr if ctx.kr is not None else np.zeros((n, self.kr_dim), x4.dtype)
            kr = np.tanh(kr_in @ self.params["kr_U"].T + g @ self.params["kr_V"].T + self.params["kr_b"])
            ctx.kr = kr
            z = np.concatenate([kr, g], axis=1)
        else:
            kr_in = kr = None
            z = g
        logits, gen_cache = kernel_logits(z, self.gen_params())
        A, soft = self.attention_weights(logits)
        bank = self.effective_bank()
        W = np.tensordot(A, bank, axes=([1], [0]))
        y, cols = conv2d_forward(x4, W, self.spec)
        self.cache = (x4, g, kr_in, kr, gen_cache, A, soft, bank, W, cols)
        if ctx.record_attention:
            ctx.attention.append((self.path, A.copy()))
        if ctx.charges is not None:
            cout, _, kh, kw = bank.shape[1:]
            ctx.charge(self.path, "convolution", flops_conv2d(cin, cout, kh, kw, *y.shape[2:]))
            gen = int(np.prod(x4.shape[1:]))
            if self.kr_dim:
                gen += flops_dense(self.kr_dim, self.kr_dim) + flops_dense(cin, self.kr_dim)
            w1, w2 = self.params["gen_w1"], self.params["gen_w2"]
            gen += flops_dense(w1.shape[1], w1.shape[0]) + flops_dense(w2.shape[1], w2.shape[0])
            ctx.charge(self.path, "attention-generator", gen)
            used = self.k_active if (self.mode == "hard" and not self.soft_surrogate) else bank.shape[0]
            ctx.charge(self.path, "other", 2 * used * int(np.prod(bank.shape[1:])))
        return _from4d(y, self.ndim)

    def backward(self, gy, ctx):
        x4, g, kr_in, kr, gen_cache, A, soft, bank, W, cols = self.cache
        n = x4.shape[0]
        gx, gW = conv2d_vjp(_as4d(gy, self.ndim), x4, W, self.spec, cols=cols)
        gflat = gW.reshape(n, -1)
        bflat = bank.reshape(bank.shape[0], -1)
        gA = gflat @ bflat.T
        if not self.bank_frozen:
            gbank = (A.T @ gflat).reshape(bank.shape)
            if self.mode == "oriented":
                gbank = orient_kernels_vjp(gbank, self.params["bank"].shape)
            self._acc("bank", gbank.reshape(self.params["bank"].shape))
        glogits = straight_through_vjp(gA, soft)
        gz, ggen = kernel_logits_vjp(glogits, self.gen_params(), gen_cache)
        for key, value in ggen.items():
            self._acc(f"gen_{key}", value)
        if self.kr_dim:
            gkr = gz[:, : self.kr_dim]
            if ctx.g_kr is not None:
                gkr = gkr + ctx.g_kr
            gg = gz[:, self.kr_dim :]
            gpre = gkr * (1 - kr * kr)
            self._acc("kr_U", gpre.T @ kr_in)
            self._acc("kr_V", gpre.T @ g)
            self._acc("kr_b", gpre.sum(axis=0))
            ctx.g_kr = gpre @ self.params["kr_U"]
            gg = gg + gpre @ self.params["kr_V"]
        else:
            gg = gz
        gx = gx + gap_vjp(gg, x4.shape)
        return _from4d(gx, self.ndim)


class ChannelGate(Module):
    """Channel attention ``sigmoid(W gap(F) + b)`` applied multiplicatively."""

    def __init__(self, channels, rng: Prng | None = None, dtype=np.float64):
        super().__init__()
        self.params["weight"] = he_normal(rng, (channels, channels), channels, dtype)
        self.params["bias"] = np.zeros(channels, dtype)

    def forward(self, x, ctx):
        A = channel_attention(x, self.params["weight"], self.params["bias"])
        self.cache = (x, A)
        if ctx.record_attention:
            ctx.attention.append((self.path, A.copy()))
        c = x.shape[1]
        ctx.charge(self.path, "attention-generator", int(np.prod(x.shape[1:])) + flops_dense(c, c))
        return x * A.reshape(A.shape + (1,) * (x.ndim - 2))

    def backward(self, gy, ctx):
        x, A = self.cache
        gx = gy * A.reshape(A.shape + (1,) * (x.ndim - 2))
        gA = (gy * x).sum(axis=tuple(range(2, x.ndim)))
        gF, gw, gb = channel_attention_vjp(gA, x, self.params["weight"], A)
        self._acc("weight", gw)
        self._acc("bias", gb)
        return gx + gF


class Dense(Module):
    def __init__(self, din, dout, rng: Prng | None = None, dtype=np.float64):
        super().__init__()
        self.params["weight"] = he_normal(rng, (dout, din), din, dtype)
        self.params["bias"] = np.zeros(dout, dtype)

    def forward(self, x, ctx):
        self.x = x
        w = self.params["weight"]
        ctx.charge(self.path, "dense", flops_dense(w.shape[1], w.shape[0]))
        return dense(x, w, self.params["bias"])

    def backward(self, g, ctx):
        gx, gw, gb = dense_vjp(g, self.x, self.params["weight"])
        self._acc("weight", gw)
        self._acc("bias", gb)
        return gx


class ReLU(Module):
    def forward(self, x, ctx):
        self.mask = x > 0
        return x * self.mask

    def backward(self, g, ctx):
        return g * self.mask


class MaxPool(Module):
    def __init__(self, window=2, ndim=2):
        super().__init__()
        self.window = (window, window) if ndim == 2 else (1, window)
        self.ndim = ndim

    def forward(self, x, ctx):
        self.x = _as4d(x, self.ndim)
        y, self.argmax = maxpool2d_forward(self.x, self.window, self.window)
        return _from4d(y, self.ndim)

    def backward(self, g, ctx):
        gx = maxpool2d_vjp(_as4d(g, self.ndim), self.x, self.window, self.window, self.argmax)
        return _from4d(gx, self.ndim)


class GlobalAvgPool(Module):
    def forward(self, x, ctx):
        self.shape = x.shape
        return gap(x)

    def backward(self, g, ctx):
        return gap_vjp(g, self.shape)


class Flatten(Module):
    def forward(self, x, ctx):
        self.shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g, ctx):
        return g.reshape(self.shape)


class Dropout(Module):
    """Inverted dropout; identity outside training."""

    def __init__(self, rate=0.2):
        super().__init__()
        self.rate = rate

    def forward(self, x, ctx):
        if not ctx.train or self.rate == 0 or ctx.rng is None:
            self.scale = None
            return x
        keep = ctx.rng.uniform(x.shape) >= self.rate
        self.scale = (keep / (1.0 - self.rate)).astype(x.dtype)
        return x * self.scale

    def backward(self, g, ctx):
        return g if self.scale is None else g * self.scale


class Upsample(Module):
    """Nearest-neighbour upsampling by an integer factor per spatial axis."""

    def __init__(self, factor):
        super().__init__()
        self.factor = (factor, factor) if np.isscalar(factor) else tuple(factor)

    def forward(self, x, ctx):
        fh, fw = self.factor
        return x.repeat(fh, axis=2).repeat(fw, axis=3)

    def backward(self, g, ctx):
        fh, fw = self.factor
        n, c, h, w = g.shape
        return g.reshape(n, c, h // fh, fh, w // fw, fw).sum(axis=(3, 5))


class Sequential(Module):
    def __init__(self, *layers: tuple[str, Module]):
        super().__init__()
        for name, layer in layers:
            self.add(name, layer)

    def forward(self, x, ctx):
        for _, layer in self.children:
            x = layer.forward(x, ctx)
        return x

    def backward(self, g, ctx):
        for _, layer in reversed(self.children):
            g = layer.backward(g, ctx)
        return g


class ResidualBlock(Module):
    """Two 3x3 convolutions plus identity or 1x1 projection shortcut.

    ``make_conv(cin, cout, stride)`` builds each 3x3 convolution, which lets
    the dynamic variants swap in their own layer type.  An optional channel
    gate runs on the block output.
    """

    def __init__(self, cin, cout, stride, make_conv, gate=False,
                 rng: Prng | None = None, dtype=np.float64):
        super().__init__()
        self.conv1 = self.add("conv1", make_conv(cin, cout, stride))
        self.relu1 = self.add("relu1", ReLU())
        self.conv2 = self.add("conv2", make_conv(cout, cout, 1))
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = self.add("shortcut", Conv(cin, cout, 1, stride, 0, rng=rng, dtype=dtype))
        self.relu_out = self.add("relu_out", ReLU())
        self.gate = self.add("gate", ChannelGate(cout, rng, dtype)) if gate else None

    def forward(self, x, ctx):
        h = self.conv2.forward(self.relu1.forward(self.conv1.forward(x, ctx), ctx), ctx)
        s = self.shortcut.forward(x, ctx) if self.shortcut is not None else x
        out = self.relu_out.forward(h + s, ctx)
        if self.gate is not None:
            out = self.gate.forward(out, ctx)
        return out

    def backward(self, g, ctx):
        if self.gate is not None:
            g = self.gate.backward(g, ctx)
        g = self.relu_out.backward(g, ctx)
        gx = self.conv1.backward(self.relu1.backward(self.conv2.backward(g, ctx), ctx), ctx)
        if self.shortcut is not None:
            gx = gx + self.shortcut.backward(g, ctx)
        else:
            gx = gx + g
        return gx
