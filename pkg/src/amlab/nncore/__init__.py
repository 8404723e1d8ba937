"""Small deterministic neural-network engine on top of numpy."""

from amlab.nncore.layers import LAYER_KINDS, LayerSpec
from amlab.nncore.losses import (
    EPS,
    cross_entropy,
    cross_entropy_to_uniform,
    distillation_loss,
    reverse_cross_entropy,
    softmax,
)
from amlab.nncore.model import Classifier, conv_net, dense_net, forward
from amlab.nncore.persist import classifier_from_bytes, classifier_to_bytes, load_classifier, save_classifier
from amlab.nncore.train import LOSS_KINDS, TrainConfig, gradient_check, input_gradient, train

__all__ = [
    "EPS",
    "LAYER_KINDS",
    "LOSS_KINDS",
    "Classifier",
    "LayerSpec",
    "TrainConfig",
    "classifier_from_bytes",
    "classifier_to_bytes",
    "conv_net",
    "cross_entropy",
    "cross_entropy_to_uniform",
    "dense_net",
    "distillation_loss",
    "forward",
    "gradient_check",
    "input_gradient",
    "load_classifier",
    "reverse_cross_entropy",
    "save_classifier",
    "softmax",
    "train",
]
