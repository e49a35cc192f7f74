"""Minimal numpy tensor library with reverse-mode autodiff."""
from . import ops
from .gradcheck import grad_check
from .ops import (
    activation,
    bilinear_upsample,
    combine,
    concat_channels,
    conv2d,
    log_sigmoid,
    log_softmax_channel,
    relu,
    sigmoid,
    softmax_channel,
)
from .optim import SGD, sgd_momentum_step
from .tensor import ContractError, Tensor, debug_mode, is_grad_enabled, no_grad, tape

__all__ = [
    "ContractError",
    "SGD",
    "Tensor",
    "activation",
    "bilinear_upsample",
    "combine",
    "concat_channels",
    "conv2d",
    "debug_mode",
    "grad_check",
    "is_grad_enabled",
    "log_sigmoid",
    "log_softmax_channel",
    "no_grad",
    "ops",
    "relu",
    "sgd_momentum_step",
    "sigmoid",
    "softmax_channel",
    "tape",
]
