"""Minimal reverse-mode numeric core for the recurrent models."""
from . import kernels
from .gradcheck import grad_check
from .ops import (add, affine, concat_pool, embedding_lookup, lstm_cell, lstm_layer, mul, relu,
                  reshape, softmax_cross_entropy, transpose)
from .optim import OptimizerState, adam_step, clip_grad_norm
from .random import RngStream, dropout_mask
from .tensor import Tensor

__all__ = [
    "Tensor", "RngStream", "OptimizerState", "kernels",
    "affine", "add", "concat_pool", "embedding_lookup", "lstm_cell", "lstm_layer", "mul", "relu",
    "reshape", "softmax_cross_entropy", "transpose", "dropout_mask", "adam_step",
    "clip_grad_norm", "grad_check",
]
