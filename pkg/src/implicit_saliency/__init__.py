"""Implicit saliency: unsupervised saliency maps from conflict gradients of a trained classifier."""

__version__ = "0.1.0"

from .errors import SaliencyError  # noqa: E402
from .model import NetworkModel, build_toy_cnn, load_model, predict, save_model, train  # noqa: E402
from .saliency import (  # noqa: E402
    feedforward_saliency,
    grad_cam,
    guided_bp_saliency,
    implicit_saliency,
)

__all__ = [
    "NetworkModel",
    "SaliencyError",
    "build_toy_cnn",
    "feedforward_saliency",
    "grad_cam",
    "guided_bp_saliency",
    "implicit_saliency",
    "load_model",
    "predict",
    "save_model",
    "train",
]
