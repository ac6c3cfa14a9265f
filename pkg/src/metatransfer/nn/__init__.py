"""Minimal float64 neural network core: autodiff, layers, Adam, checks."""

from .autograd import Tensor
from .gradcheck import GradCheckReport, grad_check
from .layers import (
    ParamStore,
    bahdanau_attention,
    bce_loss,
    bilstm,
    dense,
    dropout,
    layer_norm,
    padding_mask,
    projection_block,
)
from .optim import Adam, adam_step

__all__ = [
    "Adam",
    "GradCheckReport",
    "ParamStore",
    "Tensor",
    "adam_step",
    "bahdanau_attention",
    "bce_loss",
    "bilstm",
    "dense",
    "dropout",
    "grad_check",
    "layer_norm",
    "padding_mask",
    "projection_block",
]
