"""Small explicit-backprop neural network kernel on numpy (float64)."""

from .checkpoint import group_bytes, load_into, read_manifest, save_checkpoint
from .gradcheck import gradcheck, model_gradcheck, numeric_grad, relative_error
from .layers import (
    Affine,
    AffineMax,
    Conv1d,
    MaxPool,
    ReLU,
    Sequential,
    glorot_uniform,
    mlp,
    shared_mlp,
    softmax_xent,
)
from .optim import CosineSchedule, adam_step, fit, iterate_minibatches
from .params import Param, ParamGroup, ParamStore

__all__ = [
    "Affine", "AffineMax", "Conv1d", "CosineSchedule", "MaxPool", "Param", "ParamGroup", "ParamStore",
    "ReLU", "Sequential", "adam_step", "fit", "glorot_uniform", "gradcheck", "group_bytes",
    "iterate_minibatches", "load_into", "mlp", "model_gradcheck", "numeric_grad",
    "read_manifest", "relative_error", "save_checkpoint", "shared_mlp", "softmax_xent",
]
