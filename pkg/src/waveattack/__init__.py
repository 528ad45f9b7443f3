"""Backdoor attack via an HH-subband trigger, with a self-contained autodiff engine."""

__version__ = "0.1.0"

from .attack import (
    LabeledDataset,
    PoisonPlan,
    TrainConfig,
    apply_trigger,
    badnets_poison,
    badnets_train,
    partition_batch,
    poison_for_inference,
    train_clean,
    waveattack_train,
)
from .errors import ConfigError, DivergenceError, FormatError, ShapeError, UsageError, ValidationError
from .nets import ClassifierNet, GeneratorNet
from .tensor import Tensor, no_grad
from .wavelet import SubbandSet, dwt2, idwt2

__all__ = [
    "ClassifierNet",
    "ConfigError",
    "DivergenceError",
    "FormatError",
    "GeneratorNet",
    "LabeledDataset",
    "PoisonPlan",
    "ShapeError",
    "SubbandSet",
    "Tensor",
    "TrainConfig",
    "UsageError",
    "ValidationError",
    "apply_trigger",
    "badnets_poison",
    "badnets_train",
    "dwt2",
    "idwt2",
    "no_grad",
    "partition_batch",
    "poison_for_inference",
    "train_clean",
    "waveattack_train",
]
