from .layers import (LSTM, Conv1d, Dropout, FullWidthConv2d, Linear, LogSoftmax, Module, ReLU, ShapeError,
                     StackedLSTM, log_softmax, sigmoid, softmax, weighted_nll)
from .optim import Adam, clip_grad_norm
from .gradcheck import GradCheckReport, check_module, grad_check
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "LSTM", "Conv1d", "Dropout", "FullWidthConv2d", "Linear", "LogSoftmax", "Module", "ReLU", "ShapeError",
    "StackedLSTM", "log_softmax", "sigmoid", "softmax", "weighted_nll", "Adam", "clip_grad_norm",
    "GradCheckReport", "check_module", "grad_check", "CheckpointError", "load_checkpoint", "save_checkpoint",
]
