"""Minimal dense-tensor core with reverse-mode automatic differentiation."""

from . import ops
from .gradcheck import GradCheckReport, grad_check
from .ops import (
    add, avg_pool2d, batch_norm, broadcast_to, concat, conv2d, div, exp, expand_dims,
    getitem, log, log_softmax, matmul, max_pool2d, mean, mul, neg, power, relu, reshape,
    sigmoid, softmax, sqrt, stack, sub, swapaxes, tanh, transpose,
)
from .ops import max, sum  # noqa: A004 - shadow builtins deliberately
from .tensor import (
    ComputationTape, Tensor, as_tensor, backward, clear_tape, get_default_dtype, get_tape,
    is_grad_enabled, no_grad, precision, set_default_dtype,
)
