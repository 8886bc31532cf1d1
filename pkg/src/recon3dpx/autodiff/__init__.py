from .gradcheck import check_gradients, numeric_grad
from .ops import (
    RunningStats,
    avg_pool2d_array,
    batch_norm,
    conv2d,
    layer_norm,
    max_pool2d,
    upsample2d,
)
from .tensor import (
    DimensionError,
    GradTape,
    NonFiniteError,
    Tensor,
    add,
    backward,
    concat,
    concat_channels,
    gelu,
    is_grad_enabled,
    matmul,
    mul,
    no_grad,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    split,
    split_channels,
    transpose_axes,
)

__all__ = [
    "DimensionError",
    "GradTape",
    "NonFiniteError",
    "RunningStats",
    "Tensor",
    "add",
    "avg_pool2d_array",
    "backward",
    "batch_norm",
    "check_gradients",
    "concat",
    "concat_channels",
    "conv2d",
    "gelu",
    "is_grad_enabled",
    "layer_norm",
    "matmul",
    "max_pool2d",
    "mul",
    "no_grad",
    "numeric_grad",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "sigmoid",
    "split",
    "split_channels",
    "transpose_axes",
    "upsample2d",
]
