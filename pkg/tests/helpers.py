"""Shared builders for the test modules."""

import numpy as np

from dynconv.dynamic_layers import ModelSpec, build_model
from dynconv.tensor_core import Prng


def copy_static_into_dynamic(static, dynamic):
    """Load a base_cnn model's weights into a K=1 dynamic sibling (bank <- weight)."""
    src = static.parameters()
    for name, arr in dynamic.parameters().items():
        if name.endswith(".bank"):
            arr[...] = src[name[: -len("bank")] + "weight"][None]
        elif name in src:
            arr[...] = src[name]


def reduction_pair(preset, seed=0, **kw):
    spec = dict(num_classes=5, input_shape=(1, 8, 8), widths=(4, 8), depth=1, precision="float64", **kw)
    static = build_model(ModelSpec("base_cnn", **spec), Prng(seed))
    dynamic = build_model(ModelSpec(preset, num_kernels=1, k_active=1, **spec), Prng(seed + 1))
    copy_static_into_dynamic(static, dynamic)
    return static, dynamic


def bars_batch(rng, n=4, size=8):
    x = rng.normal((n, 1, size, size))
    return x, np.arange(n) % 3
