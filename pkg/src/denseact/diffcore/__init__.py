from . import ops
from .gradcheck import finite_difference_check, numerical_gradient, relative_error
from .nn import Conv1d, LayerNorm, Linear, Module
from .ops import (conv1d, dropout, gelu, layer_norm, matmul, sigmoid, softmax,
                  softmax_rows, upsample_linear)
from .tensor import (NonFiniteError, Parameter, SequenceTooShortError, ShapeError, Tensor,
                     backward, debug_mode, default_dtype, first_nonfinite_op, no_grad,
                     precision)

__all__ = [
    "ops", "Tensor", "Parameter", "Module", "Linear", "Conv1d", "LayerNorm",
    "matmul", "softmax", "softmax_rows", "sigmoid", "layer_norm", "conv1d",
    "upsample_linear", "dropout", "gelu", "backward", "finite_difference_check",
    "numerical_gradient", "relative_error", "no_grad", "precision", "debug_mode",
    "default_dtype", "first_nonfinite_op", "ShapeError", "SequenceTooShortError",
    "NonFiniteError",
]
