"""Dense float64 layer pipeline with reverse-mode differentiation.

The network is a straight chain of layers, so backpropagation is a reverse
fold over the recorded activations. Feature maps are channel-major
``[channels, height, width]``; every kernel below also accepts a leading
batch axis, which the trainer uses.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    IndexOutOfRange,
    InvalidModel,
    ShapeMismatch,
    TraceMismatch,
    UnknownLayer,
)

LAYER_KINDS = ("conv2d", "relu", "maxpool2x2", "flatten", "linear")
DTYPE = np.float64


def _frozen(array) -> np.ndarray:
    out = np.array(array, dtype=DTYPE, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class LayerSpec:
    """One layer of the chain. ``weight`` is the conv kernel or linear matrix."""

    kind: str
    name: str
    weight: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InvalidModel(f"unknown layer kind {self.kind!r}")
        if not self.name:
            raise InvalidModel("layer name must be non-empty")
        if self.kind in ("conv2d", "linear"):
            if self.weight is None or self.bias is None:
                raise InvalidModel(f"{self.kind} layer {self.name!r} needs weight and bias")
            w, b = _frozen(self.weight), _frozen(self.bias)
            object.__setattr__(self, "weight", w)
            object.__setattr__(self, "bias", b)
            if self.kind == "conv2d":
                if w.ndim != 4 or b.shape != (w.shape[0],):
                    raise InvalidModel(
                        f"conv2d {self.name!r}: kernel must be [out,in,kh,kw] and bias [out], "
                        f"got {w.shape} and {b.shape}"
                    )
                if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
                    raise InvalidModel(f"conv2d {self.name!r}: same-padding needs odd kernel sizes")
            elif w.ndim != 2 or b.shape != (w.shape[0],):
                raise InvalidModel(
                    f"linear {self.name!r}: weight must be [out,in] and bias [out], "
                    f"got {w.shape} and {b.shape}"
                )
        elif self.weight is not None or self.bias is not None:
            raise InvalidModel(f"{self.kind} layer {self.name!r} takes no parameters")

    @property
    def params(self) -> Tuple[np.ndarray, ...]:
        if self.weight is None:
            return ()
        return (self.weight, self.bias)

    def __eq__(self, other):
        if not isinstance(other, LayerSpec):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.name == other.name
            and len(self.params) == len(other.params)
            and all(
                a.shape == b.shape and np.array_equal(a, b)
                for a, b in zip(self.params, other.params)
            )
        )

    __hash__ = None


def output_shape(layer: LayerSpec, in_shape: Sequence[int]) -> Tuple[int, ...]:
    """Shape produced by ``layer`` for one (unbatched) input of ``in_shape``."""
    in_shape = tuple(in_shape)
    if layer.kind == "conv2d":
        if len(in_shape) != 3 or in_shape[0] != layer.weight.shape[1]:
            raise InvalidModel(
                f"conv2d {layer.name!r} expects [{layer.weight.shape[1]},H,W], got {list(in_shape)}"
            )
        return (layer.weight.shape[0],) + in_shape[1:]
    if layer.kind == "relu":
        return in_shape
    if layer.kind == "maxpool2x2":
        if len(in_shape) != 3 or in_shape[1] < 2 or in_shape[2] < 2:
            raise InvalidModel(f"maxpool2x2 {layer.name!r} needs [C,H,W] with H,W >= 2, got {list(in_shape)}")
        return (in_shape[0], in_shape[1] // 2, in_shape[2] // 2)
    if layer.kind == "flatten":
        return (int(np.prod(in_shape)),)
    # linear
    if len(in_shape) != 1 or in_shape[0] != layer.weight.shape[1]:
        raise InvalidModel(
            f"linear {layer.name!r} expects [{layer.weight.shape[1]}], got {list(in_shape)}"
        )
    return (layer.weight.shape[0],)


def infer_shapes(layers: Sequence[LayerSpec], input_shape: Sequence[int]) -> List[Tuple[int, ...]]:
    """Per-layer output shapes; raises InvalidModel if the chain does not compose."""
    shapes = []
    shape = tuple(input_shape)
    for layer in layers:
        shape = output_shape(layer, shape)
        shapes.append(shape)
    return shapes


# ---------------------------------------------------------------------------
# Batched layer kernels. ``x`` always carries a leading batch axis.
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Same-padded patches as a ``[C*kh*kw, B*H*W]`` matrix."""
    b, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    padded = np.zeros((c, b, h + 2 * ph, w + 2 * pw))
    padded[:, :, ph : ph + h, pw : pw + w] = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, b, h, w))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = padded[:, :, i : i + h, j : j + w]
    return cols.reshape(c * kh * kw, b * h * w)


def _conv(x, kernel):
    """Same-padded cross-correlation without bias, returned as ``[B, O, H, W]``."""
    b, _, h, w = x.shape
    out_ch = kernel.shape[0]
    out = kernel.reshape(out_ch, -1) @ _im2col(x, kernel.shape[2], kernel.shape[3])
    return np.ascontiguousarray(out.reshape(out_ch, b, h, w).transpose(1, 0, 2, 3))


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    out = _conv(x, kernel)
    out += bias[:, None, None]
    return out


def conv2d_backward(x, kernel, grad_out, need_params=True, need_input=True):
    """Returns (grad_x, grad_kernel, grad_bias); unrequested parts are None."""
    grad_x = None
    if need_input:
        # same-padded correlation with the flipped, transposed kernel
        flipped = kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        grad_x = _conv(grad_out, np.ascontiguousarray(flipped))
    if not need_params:
        return grad_x, None, None
    out_ch = kernel.shape[0]
    g = grad_out.transpose(1, 0, 2, 3).reshape(out_ch, -1)
    grad_k = (g @ _im2col(x, kernel.shape[2], kernel.shape[3]).T).reshape(kernel.shape)
    return grad_x, grad_k, g.sum(axis=1)


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out, guided=False):
    mask = x > 0
    if guided:
        mask = mask & (grad_out > 0)
    return np.where(mask, grad_out, 0.0)


def _pool_corners(x):
    h2, w2 = x.shape[2] // 2, x.shape[3] // 2
    # row-major order inside each 2x2 window
    return [x[:, :, i : 2 * h2 : 2, j : 2 * w2 : 2] for i in (0, 1) for j in (0, 1)]


def maxpool_forward(x):
    a, b, c, d = _pool_corners(x)
    return np.maximum(np.maximum(a, b), np.maximum(c, d))


def maxpool_backward(x, grad_out):
    corners = _pool_corners(x)
    best = maxpool_forward(x)
    grad_x = np.zeros_like(x)
    taken = np.zeros(best.shape, dtype=bool)
    h2, w2 = best.shape[2], best.shape[3]
    for (i, j), corner in zip(((0, 0), (0, 1), (1, 0), (1, 1)), corners):
        # ties go to the first corner that reaches the maximum
        win = (corner == best) & ~taken
        taken |= win
        grad_x[:, :, i : 2 * h2 : 2, j : 2 * w2 : 2] = np.where(win, grad_out, 0.0)
    return grad_x


def linear_forward(x, weight, bias):
    return x @ weight.T + bias


def linear_backward(x, weight, grad_out, need_params=True):
    grad_x = grad_out @ weight
    if not need_params:
        return grad_x, None, None
    return grad_x, grad_out.T @ x, grad_out.sum(axis=0)


def layer_forward(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    if layer.kind == "conv2d":
        return conv2d_forward(x, layer.weight, layer.bias)
    if layer.kind == "relu":
        return relu_forward(x)
    if layer.kind == "maxpool2x2":
        return maxpool_forward(x)
    if layer.kind == "flatten":
        return x.reshape(x.shape[0], -1)
    return linear_forward(x, layer.weight, layer.bias)


def layer_backward(layer, x, grad_out, guided=False, need_params=False, need_input=True):
    """Gradient w.r.t. the layer input (and parameters when ``need_params``)."""
    if layer.kind == "conv2d":
        return conv2d_backward(x, layer.weight, grad_out, need_params, need_input)
    if layer.kind == "relu":
        return relu_backward(x, grad_out, guided), None, None
    if layer.kind == "maxpool2x2":
        return maxpool_backward(x, grad_out), None, None
    if layer.kind == "flatten":
        return grad_out.reshape(x.shape), None, None
    return linear_backward(x, layer.weight, grad_out, need_params)


def forward_batch(layers: Sequence[LayerSpec], x: np.ndarray) -> List[np.ndarray]:
    """Outputs of every layer for a batch ``x``; index 0 of the result is layer 0's output."""
    outputs = []
    for layer in layers:
        x = layer_forward(layer, x)
        outputs.append(x)
    return outputs


def backward_batch(
    layers: Sequence[LayerSpec],
    inputs: np.ndarray,
    outputs: Sequence[np.ndarray],
    grad_logits: np.ndarray,
    stop: int = -1,
    guided: bool = False,
    need_params: bool = False,
    need_input: bool = True,
):
    """Reverse fold from the logits down to the output of layer ``stop``.

    ``stop=-1`` propagates all the way to the network input. Returns
    ``(grad, param_grads)`` where ``param_grads`` maps layer name to
    ``(grad_weight, grad_bias)`` when ``need_params`` is set. With
    ``need_input=False`` the gradient w.r.t. the network input is skipped
    where that saves work (the returned ``grad`` is then unspecified).
    """
    grad = grad_logits
    param_grads: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    for idx in range(len(layers) - 1, stop, -1):
        layer = layers[idx]
        x = outputs[idx - 1] if idx > 0 else inputs
        grad, gw, gb = layer_backward(
            layer, x, grad, guided=guided, need_params=need_params, need_input=need_input or idx > 0
        )
        if gw is not None:
            param_grads[layer.name] = (gw, gb)
    return grad, param_grads


# ---------------------------------------------------------------------------
# Public single-sample API
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ActivationTrace:
    """Every layer's output for one input, in execution order."""

    input: np.ndarray
    outputs: Dict[str, np.ndarray] = field(repr=False)

    @property
    def logits(self) -> np.ndarray:
        return next(reversed(self.outputs.values()))

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.outputs[name]
        except KeyError:
            raise UnknownLayer(f"no activation recorded for layer {name!r}") from None


def _check_input(model, image) -> np.ndarray:
    image = np.asarray(image, dtype=DTYPE)
    if image.shape != tuple(model.input_shape):
        raise ShapeMismatch(
            f"input shape {list(image.shape)} does not match model input {list(model.input_shape)}"
        )
    return image


def forward(model, image) -> ActivationTrace:
    image = _check_input(model, image)
    infer_shapes(model.layers, model.input_shape)
    outs = forward_batch(model.layers, image[None])
    return ActivationTrace(
        input=image,
        outputs={layer.name: out[0] for layer, out in zip(model.layers, outs)},
    )


def cross_entropy(logits, class_index: int) -> Tuple[float, np.ndarray]:
    """Softmax cross-entropy against a one-hot target and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=DTYPE)
    if not 0 <= class_index < logits.shape[-1]:
        raise IndexOutOfRange(f"class index {class_index} outside [0, {logits.shape[-1]})")
    shifted = logits - logits.max()
    log_norm = np.log(np.exp(shifted).sum())
    loss = float(log_norm - shifted[class_index])
    grad = np.exp(shifted - log_norm)
    grad[class_index] -= 1.0
    return loss, grad


def softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=DTYPE)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def layer_index(model, name: str) -> int:
    for i, layer in enumerate(model.layers):
        if layer.name == name:
            return i
    raise UnknownLayer(f"model has no layer named {name!r}")


def resolve_tap(model, tap_layer: str, pre_relu: bool = False) -> int:
    """Index of the layer whose output is read for ``tap_layer``.

    A conv layer immediately followed by a ReLU is read after the ReLU
    unless ``pre_relu`` is set.
    """
    idx = layer_index(model, tap_layer)
    layers = model.layers
    if (
        not pre_relu
        and layers[idx].kind == "conv2d"
        and idx + 1 < len(layers)
        and layers[idx + 1].kind == "relu"
    ):
        return idx + 1
    return idx


def _check_trace(model, trace: ActivationTrace) -> List[np.ndarray]:
    names = [layer.name for layer in model.layers]
    if list(trace.outputs) != names:
        raise TraceMismatch("trace layers do not match the model's layer chain")
    expected = infer_shapes(model.layers, model.input_shape)
    outs = list(trace.outputs.values())
    if trace.input.shape != tuple(model.input_shape) or any(
        o.shape != s for o, s in zip(outs, expected)
    ):
        raise TraceMismatch("trace shapes disagree with the model")
    return outs


def _check_grad_logits(trace, grad_logits) -> np.ndarray:
    grad_logits = np.asarray(grad_logits, dtype=DTYPE)
    if grad_logits.shape != trace.logits.shape:
        raise ShapeMismatch(
            f"grad_logits shape {list(grad_logits.shape)} != logits shape {list(trace.logits.shape)}"
        )
    return grad_logits


def backward_to_layer(model, trace, grad_logits, tap_layer: str, pre_relu: bool = False) -> np.ndarray:
    """Gradient of the loss w.r.t. the tapped activation, shaped like that activation."""
    stop = resolve_tap(model, tap_layer, pre_relu)
    outs = _check_trace(model, trace)
    grad_logits = _check_grad_logits(trace, grad_logits)
    grad, _ = backward_batch(
        model.layers, trace.input[None], [o[None] for o in outs], grad_logits[None], stop=stop
    )
    return grad[0]


def backward_to_input(model, trace, grad_logits, guided: bool = False) -> np.ndarray:
    outs = _check_trace(model, trace)
    grad_logits = _check_grad_logits(trace, grad_logits)
    grad, _ = backward_batch(
        model.layers, trace.input[None], [o[None] for o in outs], grad_logits[None], guided=guided
    )
    return grad[0]


def guided_backward_to_input(model, trace, grad_logits) -> np.ndarray:
    """Input gradient with every ReLU passing only positive-activation, positive-gradient units."""
    return backward_to_input(model, trace, grad_logits, guided=True)


def parameter_gradients(model, trace, grad_logits) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Per-layer (weight, bias) gradients for a single sample."""
    outs = _check_trace(model, trace)
    grad_logits = _check_grad_logits(trace, grad_logits)
    _, grads = backward_batch(
        model.layers,
        trace.input[None],
        [o[None] for o in outs],
        grad_logits[None],
        need_params=True,
    )
    return grads
