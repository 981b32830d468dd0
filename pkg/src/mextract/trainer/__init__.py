"""Piracy-model training: KD on soft labels, MixMatch, optimizers, augmentation."""

from .augment import AugmentConfig, augment, augment_batch
from .checkpoint import load_checkpoint, save_checkpoint
from .kd import TrainResult, cross_entropy, kd_loss, kd_train, predict_classes, predict_proba, write_loss_trace
from .labels import lift_many, lift_response
from .mixmatch import MixMatchConfig, mixmatch_round, mixmatch_train, sharpen
from .models import PiracyModelSpec, build_model, count_parameters, register_pretrained
from .optim import Lion, OptimizerConfig, make_optimizer

__all__ = [
    "AugmentConfig", "augment", "augment_batch",
    "load_checkpoint", "save_checkpoint",
    "TrainResult", "cross_entropy", "kd_loss", "kd_train", "predict_classes", "predict_proba",
    "write_loss_trace", "lift_many", "lift_response",
    "MixMatchConfig", "mixmatch_round", "mixmatch_train", "sharpen",
    "PiracyModelSpec", "build_model", "count_parameters", "register_pretrained",
    "Lion", "OptimizerConfig", "make_optimizer",
]
