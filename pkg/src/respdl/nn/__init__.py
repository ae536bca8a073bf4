"""Minimal differentiable-layer toolkit backing the two classifiers."""

from ._heap import tune_malloc

tune_malloc()

from .layers import (
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    Dense,
    Dropout,
    FeatureAveragePool,
    GlobalAvgPool,
    Param,
    ReLU,
    softmax,
)
from .loss import add_l2_grads, cross_entropy, l2_penalty, loss_ce_l2
from .optim import Adam, TrainConfig
from .rnn import BiGRU
from .gradcheck import grad_check, grad_check_model, standard_suite
from .checkpoint import assign_params, load_checkpoint, save_checkpoint

__all__ = [
    "Adam",
    "AvgPool2d",
    "BatchNorm2d",
    "BiGRU",
    "Conv2d",
    "Dense",
    "Dropout",
    "FeatureAveragePool",
    "GlobalAvgPool",
    "Param",
    "ReLU",
    "TrainConfig",
    "add_l2_grads",
    "assign_params",
    "cross_entropy",
    "grad_check",
    "grad_check_model",
    "l2_penalty",
    "load_checkpoint",
    "loss_ce_l2",
    "save_checkpoint",
    "softmax",
    "standard_suite",
]
