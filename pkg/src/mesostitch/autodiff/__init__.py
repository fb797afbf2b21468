"""Small reverse-mode differentiation engine over numpy arrays."""

from .functional import (
    LEAKY_SLOPE,
    batch_norm,
    concat,
    conv2d,
    cos,
    exp,
    gather_bilinear,
    leaky_relu,
    log,
    nearest_cells,
    pad_reflect,
    piecewise_linear,
    scatter_mean,
    sin,
    sqrt,
    square,
    stack,
    take,
    total_variation,
    upsample2x,
    where,
)
from .tensor import (
    NotScalarLoss,
    ShapeMismatch,
    Tape,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    get_default_dtype,
    no_grad,
    recording,
    stop_gradient,
)

__all__ = [
    "LEAKY_SLOPE", "NotScalarLoss", "ShapeMismatch", "Tape", "Tensor", "as_tensor",
    "backward", "batch_norm", "concat", "conv2d", "cos", "default_dtype", "exp",
    "gather_bilinear", "get_default_dtype", "leaky_relu", "log", "nearest_cells",
    "no_grad", "pad_reflect", "piecewise_linear", "recording", "scatter_mean", "sin",
    "sqrt", "square", "stack", "stop_gradient", "take", "total_variation",
    "upsample2x", "where",
]
