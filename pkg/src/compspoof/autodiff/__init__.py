from . import checkpoint
from .gradcheck import GradCheckReport, finite_difference_check
from .module import Module
from .optim import Adam, AdamState
from .tensor import (
    Parameter,
    Tensor,
    add,
    backward,
    broadcast_to,
    clip,
    concatenate,
    conv1d,
    conv2d,
    div,
    exp,
    getitem,
    linear,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    scatter_add,
    sigmoid,
    softmax,
    sqrt,
    stack,
    sub,
    take,
    tanh,
    transpose,
    tsum,
)
