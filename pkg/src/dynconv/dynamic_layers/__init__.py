"""Dynamic convolution layers and the model presets built from them."""

from .attention import (
    GateMask,
    KernelBank,
    KernelRepresentation,
    aggregate_kernels,
    aggregate_kernels_vjp,
    apply_channel_gate,
    apply_channel_gate_vjp,
    channel_attention,
    channel_attention_vjp,
    hard_select,
    kernel_attention,
    masked_softmax,
    update_kernel_representation,
    update_kernel_representation_vjp,
)
from .models import IMAGE_PRESETS, SERIES_PRESETS, SUPPORTED, Model, ModelSpec, build_model
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
from .orientation import dihedral_variants, mirror, odconv_forward, orient_bank, orient_kernels, rotate90
