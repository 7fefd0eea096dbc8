"""Small dense-tensor kernels with reverse-mode autodiff."""

from captioner.numerics.gradcheck import check_gradients, numeric_grad, relative_error
from captioner.numerics.io import load_tensors, save_tensors
from captioner.numerics.module import Module, init_normal, init_zeros
from captioner.numerics.optim import AdamState, adam_step
from captioner.numerics.tensor import (
    Parameter,
    Tape,
    Tensor,
    add,
    backward,
    bce_with_logits,
    concat,
    conv2d_valid,
    default_dtype,
    div,
    dropout,
    embedding,
    exp,
    gelu,
    get_default_dtype,
    getitem,
    grad_enabled,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    reshape,
    set_default_dtype,
    softmax,
    sub,
    transpose,
    tsum,
)

__all__ = [
    "AdamState",
    "Module",
    "Parameter",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "backward",
    "bce_with_logits",
    "concat",
    "conv2d_valid",
    "default_dtype",
    "div",
    "dropout",
    "embedding",
    "exp",
    "gelu",
    "get_default_dtype",
    "getitem",
    "grad_enabled",
    "init_normal",
    "init_zeros",
    "layer_norm",
    "load_tensors",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "power",
    "reshape",
    "save_tensors",
    "set_default_dtype",
    "softmax",
    "sub",
    "transpose",
    "tsum",
]
