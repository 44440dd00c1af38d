"""Minimal float64 differentiable tensor core."""

from .checkpoint import load_into, read_checkpoint, save_checkpoint
from .gradcheck import gradient_check
from .layers import (
    BatchNormState,
    LSTMCell,
    batch_norm,
    bilstm_forward,
    conv2d,
    conv_output_size,
    conv_params,
    dense,
    dense_params,
    dropout,
    flatten,
    lstm_step,
    lstm_unroll,
    mse_loss,
    pool2d,
    relu,
    upsample,
    zero_state,
)
from .optim import Adam
from .tensor import Parameter, ShapeError, Tensor, backward, concat, no_grad, stack

__all__ = [
    "Adam", "BatchNormState", "LSTMCell", "Parameter", "ShapeError", "Tensor", "backward",
    "batch_norm", "bilstm_forward", "concat", "conv2d", "conv_output_size", "conv_params",
    "dense", "dense_params", "dropout", "flatten", "gradient_check", "load_into",
    "lstm_step", "lstm_unroll", "mse_loss", "no_grad", "pool2d", "read_checkpoint", "relu",
    "save_checkpoint", "stack", "upsample", "zero_state",
]
