"""Numeric foundation: precision modes, autodiff tensors, sampling kernels."""
from .precision import (
    active_dtype,
    finite_checks_enabled,
    get_precision,
    set_precision,
    using_precision,
)
from .kernels import active_backend, set_backend
from .tensor import (
    Tensor,
    bilinear_sample,
    concat,
    deform_sample,
    gather_rows,
    grad_enabled,
    layer_norm,
    log_sigmoid,
    matmul,
    no_grad,
    pad2d,
    param,
    scatter_rows_add,
    slice_axis,
    softmax,
    softplus,
    tensor,
)
from .gradcheck import GradReport, check_gradients

__all__ = [
    "active_dtype",
    "finite_checks_enabled",
    "get_precision",
    "set_precision",
    "using_precision",
    "active_backend",
    "set_backend",
    "Tensor",
    "tensor",
    "param",
    "no_grad",
    "grad_enabled",
    "concat",
    "matmul",
    "gather_rows",
    "scatter_rows_add",
    "slice_axis",
    "pad2d",
    "softmax",
    "softplus",
    "log_sigmoid",
    "layer_norm",
    "bilinear_sample",
    "deform_sample",
    "GradReport",
    "check_gradients",
]
