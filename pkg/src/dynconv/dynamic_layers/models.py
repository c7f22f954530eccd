"""Model presets: mini-ResNet variants, FCN segmentation head, 1-D nets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..metrics import accuracy, miou
from ..tensor_core import Prng, ValidationError, softmax_xent
from .modules import (
    ChannelGate,
    Context,
    Conv,
    Dense,
    Dropout,
    DynamicConv,
    Flatten,
    GlobalAvgPool,
    MaxPool,
    Module,
    ReLU,
    ResidualBlock,
    Sequential,
    Upsample,
)

IMAGE_PRESETS = ("base_cnn", "global_soft", "local_soft", "hard_attention", "odconv")
SERIES_PRESETS = ("base_cnn", "net1_dcnn", "net2_dcnn")
SUPPORTED = {
    "classify": IMAGE_PRESETS,
    "segment": IMAGE_PRESETS,
    "timeseries": SERIES_PRESETS,
}
PRECISIONS = {"float32": np.float32, "float64": np.float64}


def supported_matrix() -> str:
    return "; ".join(f"{task}: {', '.join(presets)}" for task, presets in SUPPORTED.items())


@dataclass
class ModelSpec:
    preset: str
    task: str = "classify"
    num_classes: int = 10
    input_shape: tuple = (1, 16, 16)
    width_multiplier: float = 1.0
    depth: int = 2
    widths: tuple = (16, 32, 64)
    num_kernels: int = 4
    k_active: int | None = None
    kr_dim: int = 32
    dropout: float = 0.2
    precision: str = "float64"

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.widths = tuple(int(v) for v in self.widths)
        if self.task not in SUPPORTED or self.preset not in SUPPORTED[self.task]:
            raise ValidationError(
                f"unsupported preset/task combination ({self.preset}, {self.task}); "
                f"supported matrix is {supported_matrix()}"
            )
        if self.precision not in PRECISIONS:
            raise ValidationError(f"precision must be one of {sorted(PRECISIONS)}")
        expected = 2 if self.task == "timeseries" else 3
        if len(self.input_shape) != expected:
            raise ValidationError(f"{self.task} input_shape needs {expected} entries, got {self.input_shape}")
        if self.num_kernels < 1 or self.depth < 1 or self.num_classes < 2:
            raise ValidationError("num_kernels and depth must be >= 1 and num_classes >= 2")
        if self.k_active is not None and not 1 <= self.k_active <= self.num_kernels:
            raise ValidationError(f"k_active must lie in [1, {self.num_kernels}], got {self.k_active}")
        if not 0 <= self.dropout < 1:
            raise ValidationError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def scaled_widths(self) -> list[int]:
        return [max(1, int(round(w * self.width_multiplier))) for w in self.widths]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["widths"] = list(self.widths)
        return d


class Model:
    """A built network plus the task-specific loss and metric plumbing."""

    def __init__(self, net: Module, task: str = "classify", spec: ModelSpec | None = None,
                 input_shape=None):
        self.net = net
        self.task = task
        self.spec = spec
        self.input_shape = tuple(input_shape if input_shape is not None else spec.input_shape)
        net.set_paths()
        net.zero_grad()

    # parameters -------------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: mod.params[key] for name, mod, key in self.net.named_parameters()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {name: mod.grads[key] for name, mod, key in self.net.named_parameters()}

    def frozen_names(self) -> set[str]:
        return {name for name, mod, key in self.net.named_parameters() if key in mod.frozen}

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def load_parameters(self, values: dict[str, np.ndarray]):
        params = self.parameters()
        missing = set(params) - set(values)
        if missing:
            raise ValidationError(f"missing parameters: {sorted(missing)[:5]}")
        for name, arr in params.items():
            v = np.asarray(values[name])
            if v.shape != arr.shape:
                raise ValidationError(f"parameter {name}: shape {v.shape} != expected {arr.shape}")
            arr[...] = v

    def dynamic_layers(self) -> list[DynamicConv]:
        return [m for m in self.net.modules() if isinstance(m, DynamicConv)]

    def set_bank_frozen(self, frozen: bool = True):
        for layer in self.dynamic_layers():
            if frozen:
                layer.frozen.add("bank")
            else:
                layer.frozen.discard("bank")

    @property
    def dtype(self):
        return next(iter(self.parameters().values())).dtype

    @property
    def has_attention(self) -> bool:
        return any(isinstance(m, (DynamicConv, ChannelGate)) for m in self.net.modules())

    # passes -----------------------------------------------------------------

    def forward(self, x, ctx: Context | None = None):
        ctx = ctx or Context()
        ctx.kr = None
        self._ctx = ctx
        return self.net.forward(np.asarray(x, dtype=self.dtype), ctx)

    def backward(self, g):
        ctx = self._ctx
        ctx.g_kr = None
        return self.net.backward(g, ctx)

    def _flat_logits(self, logits):
        if self.task == "segment":
            return logits.transpose(0, 2, 3, 1).reshape(-1, logits.shape[1])
        return logits

    def loss_and_grad(self, x, y, rng: Prng | None = None, train: bool = True) -> float:
        """Forward + backward on one batch; gradients are accumulated into ``grads``."""
        logits = self.forward(x, Context(train=train, rng=rng))
        loss, g = softmax_xent(self._flat_logits(logits), np.asarray(y).reshape(-1))
        if self.task == "segment":
            g = g.reshape(logits.shape[0], logits.shape[2], logits.shape[3], -1).transpose(0, 3, 1, 2)
        self.backward(g.astype(logits.dtype))
        return loss

    def loss(self, x, y) -> float:
        logits = self.forward(x)
        return softmax_xent(self._flat_logits(logits), np.asarray(y).reshape(-1))[0]

    def predict(self, x, batch_size: int = 64) -> np.ndarray:
        out = [self.forward(x[i : i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out)

    def evaluate(self, x, y, batch_size: int = 64) -> tuple[float, float]:
        """Mean loss and the task metric (accuracy, or mIoU for segmentation)."""
        total, preds = 0.0, []
        for i in range(0, len(x), batch_size):
            logits = self.forward(x[i : i + batch_size])
            yb = np.asarray(y[i : i + batch_size]).reshape(-1)
            total += softmax_xent(self._flat_logits(logits), yb)[0] * len(yb)
            preds.append(logits.argmax(axis=1))
        pred = np.concatenate(preds)
        count = np.asarray(y).size
        if self.task == "segment":
            return total / count, miou(pred, y, self.num_classes)
        return total / count, accuracy(pred, y)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes if self.spec else None

    def attention_maps(self, x) -> list[tuple[str, np.ndarray]]:
        ctx = Context(record_attention=True)
        self.forward(x, ctx)
        return ctx.attention

    def trace_flops(self, batch: int = 1):
        ctx = Context(trace=True)
        self.forward(np.zeros((batch,) + self.input_shape, dtype=self.dtype), ctx)
        return ctx.charges


# --- builders ---------------------------------------------------------------


def _conv_factory(spec: ModelSpec, rng: Prng):
    dtype = spec.dtype
    if spec.preset in ("base_cnn", "global_soft"):
        return lambda cin, cout, stride: Conv(cin, cout, 3, stride, 1, rng=rng, dtype=dtype)
    mode = {"local_soft": "soft", "hard_attention": "hard", "odconv": "oriented"}[spec.preset]
    kr_dim = spec.kr_dim if mode in ("soft", "hard") else 0
    return lambda cin, cout, stride: DynamicConv(
        cin, cout, 3, stride, 1, num_kernels=spec.num_kernels, mode=mode, kr_dim=kr_dim,
        k_active=spec.k_active, rng=rng, dtype=dtype,
    )


def _build_image(spec: ModelSpec, rng: Prng) -> Sequential:
    dtype = spec.dtype
    widths = spec.scaled_widths()
    cin, h, w = spec.input_shape
    make_conv = _conv_factory(spec, rng)
    layers = [
        ("stem", Conv(cin, widths[0], 3, 1, 1, rng=rng, dtype=dtype)),
        ("stem_relu", ReLU()),
    ]
    c = widths[0]
    downsample = 1
    for s, width in enumerate(widths):
        for b in range(spec.depth):
            stride = 2 if (s > 0 and b == 0) else 1
            downsample *= stride
            block = ResidualBlock(c, width, stride, make_conv, gate=spec.preset == "global_soft",
                                  rng=rng, dtype=dtype)
            layers.append((f"stage{s}.block{b}", block))
            c = width
    if spec.task == "classify":
        layers += [
            ("pool", GlobalAvgPool()),
            ("dropout", Dropout(spec.dropout)),
            ("head", Dense(c, spec.num_classes, rng, dtype)),
        ]
    else:
        if h % downsample or w % downsample:
            raise ValidationError(f"segment input {h}x{w} must be divisible by the backbone stride {downsample}")
        layers += [
            ("dropout", Dropout(spec.dropout)),
            ("head", Conv(c, spec.num_classes, 1, 1, 0, bias=True, rng=rng, dtype=dtype)),
        ]
        if downsample > 1:
            layers.append(("upsample", Upsample(downsample)))
    return Sequential(*layers)


def _build_series(spec: ModelSpec, rng: Prng, hidden: int = 64) -> Sequential:
    dtype = spec.dtype
    cin, length = spec.input_shape
    widths = spec.scaled_widths()[:2]
    n_conv = 2 if spec.preset == "net2_dcnn" else 1

    def conv(ci, co):
        if spec.preset == "base_cnn":
            return Conv(ci, co, 5, 1, 2, ndim=1, rng=rng, dtype=dtype)
        return DynamicConv(ci, co, 5, 1, 2, ndim=1, num_kernels=spec.num_kernels, mode="soft",
                           kr_dim=0, rng=rng, dtype=dtype)

    layers = []
    c, L = cin, length
    for i in range(n_conv):
        layers += [(f"conv{i}", conv(c, widths[i])), (f"relu{i}", ReLU()), (f"pool{i}", MaxPool(2, ndim=1))]
        c, L = widths[i], L // 2
        if L < 1:
            raise ValidationError(f"series length {length} too short for {n_conv} pooling stages")
    layers += [
        ("flatten", Flatten()),
        ("fc1", Dense(c * L, hidden, rng, dtype)),
        ("fc1_relu", ReLU()),
        ("dropout", Dropout(spec.dropout)),
        ("head", Dense(hidden, spec.num_classes, rng, dtype)),
    ]
    return Sequential(*layers)


def build_model(spec: ModelSpec, rng: Prng | int = 0) -> Model:
    rng = Prng(rng) if isinstance(rng, int) else rng
    if spec.task == "timeseries":
        net = _build_series(spec, rng)
    else:
        net = _build_image(spec, rng)
    return Model(net, spec.task, spec)
