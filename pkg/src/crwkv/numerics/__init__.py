"""Minimal dense tensors with reverse-mode automatic differentiation."""
from . import ctn
from .conv import conv2d, conv_output_size
from .errors import ConfigError, CrwkvError, DetachedError, DimensionError, NumericError, ValidationError
from .gradcheck import check_gradients, rel_error
from .ops import (
    absolute,
    add,
    clamp,
    concat,
    div,
    elementwise,
    exp,
    getitem,
    group_norm,
    layer_norm,
    log,
    matmul,
    maximum,
    mul,
    neg,
    reduce,
    relu,
    reshape,
    sigmoid,
    split,
    sqrt,
    square,
    sub,
    transpose,
)
from .resample import resample2d
from .tensor import (
    OpCounter,
    Tape,
    Tensor,
    active_tape,
    add_ops,
    as_tensor,
    backward,
    count_ops,
    debug_checks,
    default_dtype,
    get_default_dtype,
    memory,
    no_grad,
    parameter,
    record,
    set_debug,
    set_default_dtype,
)

__all__ = [name for name in dir() if not name.startswith("_")]
