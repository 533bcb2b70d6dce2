"""Implicit saliency from conflict gradients, plus the comparison baselines.

Implicit saliency imposes every class in turn as an unexpected one-hot
label, backpropagates the cross-entropy of that label to a convolutional
layer and combines the per-class absolute gradients with class-axis
statistics:

    mu      = mean over classes of |grad|
    var     = population variance over classes of |grad|
    S       = mean over filters of (1 - normalised var) * mu

The baselines are the same statistics over activations (feed-forward),
Grad-CAM and guided backpropagation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import engine
from .errors import IndexOutOfRange, ShapeMismatch
from .imaging import resize_bilinear

METHODS = ("implicit", "feedforward", "gradcam", "gbp")
TAP_POINTS = ("block", "relu", "conv")


@dataclass(frozen=True)
class PseudoSaliencyStack:
    """Absolute conflict gradients indexed ``[class, filter, row, col]``."""

    values: np.ndarray
    tap_layer: str


@dataclass(frozen=True)
class ClassStats:
    mu: np.ndarray
    var: np.ndarray
    var_norm: np.ndarray


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray
    method: str
    resolution: str = "image"


def unexpected_stimulus(class_index: int, class_count: int) -> np.ndarray:
    """One-hot vector naming ``class_index`` as the imposed label."""
    if not 0 <= class_index < class_count:
        raise IndexOutOfRange(f"class index {class_index} outside [0, {class_count})")
    onehot = np.zeros(class_count)
    onehot[class_index] = 1.0
    return onehot


def tap_target(model, tap_layer: str, tap_point: str = "block") -> str:
    """Name of the layer whose output a saliency method reads for ``tap_layer``.

    For a conv layer, ``conv`` reads the raw convolution output, ``relu``
    the activation after the following ReLU, and ``block`` the output of
    the whole conv block (after the ReLU and, if present, the 2x2 max-pool).
    Any other layer name is read as-is.
    """
    if tap_point not in TAP_POINTS:
        raise ValueError(f"tap_point must be one of {', '.join(TAP_POINTS)}")
    idx = engine.layer_index(model, tap_layer)
    layers = model.layers
    if layers[idx].kind != "conv2d" or tap_point == "conv":
        return tap_layer
    for follow in ("relu", "maxpool2x2"):
        if idx + 1 < len(layers) and layers[idx + 1].kind == follow:
            idx += 1
        if tap_point == "relu":
            break
    return layers[idx].name


def _tap(model, trace, grad_logits, target: str) -> np.ndarray:
    return engine.backward_to_layer(model, trace, grad_logits, target, pre_relu=True)


def pseudo_saliency_stack(model, image, tap_layer: str, tap_point: str = "block") -> PseudoSaliencyStack:
    """One forward pass, then one backward pass per imposed class (decision class included)."""
    target = tap_target(model, tap_layer, tap_point)
    trace = engine.forward(model, image)
    maps = []
    for i in range(model.class_count):
        _, grad_logits = engine.cross_entropy(trace.logits, i)
        maps.append(np.abs(_tap(model, trace, grad_logits, target)))
    return PseudoSaliencyStack(np.stack(maps), target)


def normalise_variance(var: np.ndarray, mode: str = "per_filter") -> np.ndarray:
    """Min-max scale a ``[K, H, W]`` variance volume into [0, 1].

    ``per_filter`` scales each filter over its spatial positions; ``global``
    uses one range for the whole volume. A zero range gives an all-zero
    (neutral) mask.
    """
    if mode == "per_filter":
        lo = var.min(axis=(-2, -1), keepdims=True)
        span = var.max(axis=(-2, -1), keepdims=True) - lo
    elif mode == "global":
        lo = var.min()
        span = var.max() - lo
    else:
        raise ValueError(f"unknown variance normalisation {mode!r}")
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (var - lo) / safe, 0.0)


def class_statistics(stack, var_mode: str = "per_filter") -> ClassStats:
    """Mean and population variance over the class axis of a pseudo-saliency stack."""
    values = stack.values if isinstance(stack, PseudoSaliencyStack) else np.asarray(stack, dtype=np.float64)
    if values.ndim != 4:
        raise ShapeMismatch(f"stack must be [classes, filters, H, W], got shape {values.shape}")
    mu = values.mean(axis=0)
    var = ((values - mu) ** 2).mean(axis=0)
    return ClassStats(mu, var, normalise_variance(var, var_mode))


def combine_implicit(stats: ClassStats) -> np.ndarray:
    """Filter-averaged variance-masked mean map, ``[H_f, W_f]``."""
    return ((1.0 - stats.var_norm) * stats.mu).mean(axis=0)


def finalize(grid, target_size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Upsample to ``target_size`` (bilinear) and min-max rescale to [0, 255].

    A constant map becomes all zeros.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if target_size is not None:
        grid = resize_bilinear(grid, *target_size)
    lo, hi = grid.min(), grid.max()
    if not hi > lo:
        return np.zeros_like(grid)
    return (grid - lo) / (hi - lo) * 255.0


def _target(model, target_size):
    if target_size is None:
        return tuple(model.input_shape[-2:])
    return tuple(target_size)


def implicit_saliency(model, image, tap_layer: str, target_size=None, *, tap_point="block", var_mode="per_filter") -> SaliencyMap:
    stack = pseudo_saliency_stack(model, image, tap_layer, tap_point)
    feature_map = combine_implicit(class_statistics(stack, var_mode))
    return SaliencyMap(finalize(feature_map, _target(model, target_size)), "implicit")


def feedforward_map(activation: np.ndarray, var_mode: str = "per_filter") -> np.ndarray:
    """Variance-masked mean over the filter axis of ``|activation|`` (``[K, H, W]`` in)."""
    pseudo = np.abs(activation)
    mu = pseudo.mean(axis=0)
    var = ((pseudo - mu) ** 2).mean(axis=0)
    var_norm = normalise_variance(var[None], var_mode)[0]
    return (1.0 - var_norm) * mu


def feedforward_saliency(model, image, tap_layer: str, target_size=None, *, tap_point="block", var_mode="per_filter") -> SaliencyMap:
    """Expectancy-only baseline: the same statistics applied to activations.

    Activations have no class axis, so the filter axis plays the ensemble
    role and is consumed by the statistics.
    """
    trace = engine.forward(model, image)
    act = trace[tap_target(model, tap_layer, tap_point)]
    return SaliencyMap(finalize(feedforward_map(act, var_mode), _target(model, target_size)), "feedforward")


def _decision(trace, class_choice):
    if class_choice is None:
        return int(np.argmax(trace.logits))
    return class_choice


def grad_cam_map(activation: np.ndarray, logit_grad: np.ndarray) -> np.ndarray:
    """ReLU of the feature maps weighted by their spatially averaged gradients."""
    alpha = logit_grad.mean(axis=(-2, -1))
    return np.maximum(np.tensordot(alpha, activation, axes=1), 0.0)


def grad_cam(model, image, tap_layer: str, target_size=None, class_choice: Optional[int] = None, *, tap_point="block") -> SaliencyMap:
    """Grad-CAM on the raw class logit (not the loss); defaults to the decision class."""
    target = tap_target(model, tap_layer, tap_point)
    trace = engine.forward(model, image)
    cls = _decision(trace, class_choice)
    grad = _tap(model, trace, unexpected_stimulus(cls, model.class_count), target)
    act = trace[target]
    return SaliencyMap(finalize(grad_cam_map(act, grad), _target(model, target_size)), "gradcam")


def collapse_channels(grad: np.ndarray) -> np.ndarray:
    """Sum of absolute values over the channel axis of a ``[C, H, W]`` gradient."""
    return np.abs(grad).sum(axis=0)


def guided_bp_saliency(model, image, target_size=None, class_choice: Optional[int] = None) -> SaliencyMap:
    """Guided backpropagation of the class logit to the input, channels collapsed.

    The result is already at input resolution; ``target_size`` only applies
    if it differs.
    """
    trace = engine.forward(model, image)
    cls = _decision(trace, class_choice)
    grad = engine.guided_backward_to_input(model, trace, unexpected_stimulus(cls, model.class_count))
    grid = collapse_channels(grad) if grad.ndim == 3 else np.abs(grad)
    size = None if target_size is None or tuple(target_size) == grid.shape else tuple(target_size)
    return SaliencyMap(finalize(grid, size), "gbp")


def compute_saliency(method: str, model, image, tap_layer: Optional[str] = None, target_size=None, **options) -> SaliencyMap:
    """Dispatch by method name; ``tap_layer`` is ignored by ``gbp``."""
    if method == "implicit":
        return implicit_saliency(model, image, tap_layer, target_size, **options)
    if method == "feedforward":
        return feedforward_saliency(model, image, tap_layer, target_size, **options)
    if method == "gradcam":
        return grad_cam(model, image, tap_layer, target_size, **options)
    if method == "gbp":
        return guided_bp_saliency(model, image, target_size, options.get("class_choice"))
    raise ValueError(f"unknown saliency method {method!r}; expected one of {', '.join(METHODS)}")
