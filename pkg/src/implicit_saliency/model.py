"""Network definition, ISW1 weight files, SGD trainer and prediction."""
from __future__ import annotations

import hashlib
import math
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from . import engine
from .engine import LayerSpec
from .errors import DataError, FormatError, InvalidConfig, InvalidModel, IoError, ShapeMismatch

ISW1_MAGIC = b"ISW1"
ISW1_VERSION = 1
KIND_TAGS = {"conv2d": 0, "relu": 1, "maxpool2x2": 2, "flatten": 3, "linear": 4}
TAG_KINDS = {tag: kind for kind, tag in KIND_TAGS.items()}
TOY_INPUT_SHAPE = (3, 64, 64)


@dataclass(frozen=True)
class NetworkModel:
    """Immutable layer chain mapping ``input_shape`` to ``class_count`` logits.

    ``metadata`` (name, seeds, epochs, loss history) is informational: it is
    not stored in ISW1 files and does not take part in equality.
    """

    layers: Tuple[LayerSpec, ...]
    input_shape: Tuple[int, ...]
    class_count: int
    metadata: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if not self.layers:
            raise InvalidModel("model has no layers")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise InvalidModel("layer names must be unique")
        shapes = engine.infer_shapes(self.layers, self.input_shape)
        if shapes[-1] != (self.class_count,):
            raise InvalidModel(
                f"layer chain ends in shape {list(shapes[-1])}, expected [{self.class_count}]"
            )

    @property
    def conv_layers(self) -> Tuple[str, ...]:
        return tuple(layer.name for layer in self.layers if layer.kind == "conv2d")

    def layer(self, name: str) -> LayerSpec:
        return self.layers[engine.layer_index(self, name)]


def _glorot(rng, shape, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def build_toy_cnn(class_count: int, seed: int, input_shape=TOY_INPUT_SHAPE) -> NetworkModel:
    """conv(3->8)/relu/pool/conv(8->16)/relu/pool/flatten/linear(->class_count).

    Weights are Glorot-uniform from ``numpy.random.default_rng(seed)``,
    biases start at zero.
    """
    if int(class_count) != class_count or class_count < 1:
        raise InvalidConfig(f"class_count must be a positive integer, got {class_count!r}")
    c, h, w = input_shape
    if h % 4 or w % 4:
        raise InvalidConfig("input height and width must be multiples of 4")
    rng = np.random.default_rng(seed)

    def conv(name, cin, cout):
        k = _glorot(rng, (cout, cin, 3, 3), cin * 9, cout * 9)
        return LayerSpec("conv2d", name, k, np.zeros(cout))

    flat = 16 * (h // 4) * (w // 4)
    layers = [
        conv("conv1", c, 8),
        LayerSpec("relu", "relu1"),
        LayerSpec("maxpool2x2", "pool1"),
        conv("conv2", 8, 16),
        LayerSpec("relu", "relu2"),
        LayerSpec("maxpool2x2", "pool2"),
        LayerSpec("flatten", "flatten"),
        LayerSpec(
            "linear",
            "fc",
            _glorot(rng, (class_count, flat), flat, class_count),
            np.zeros(class_count),
        ),
    ]
    return NetworkModel(
        layers, tuple(input_shape), int(class_count), {"name": "toy-cnn", "init_seed": seed}
    )


# ---------------------------------------------------------------------------
# ISW1 serialisation
# ---------------------------------------------------------------------------

def model_to_bytes(model: NetworkModel) -> bytes:
    out = bytearray(ISW1_MAGIC)
    out += struct.pack("<HI", ISW1_VERSION, len(model.layers))
    for layer in model.layers:
        name = layer.name.encode("utf-8")
        if len(name) > 255:
            raise InvalidModel(f"layer name {layer.name!r} exceeds 255 bytes")
        out += struct.pack("<BB", KIND_TAGS[layer.kind], len(name)) + name
        for tensor in layer.params:
            out += struct.pack("<I", tensor.ndim)
            out += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
            out += np.ascontiguousarray(tensor, dtype="<f8").tobytes()
    out += struct.pack("<I", model.class_count)
    return bytes(out)


def model_digest(model: NetworkModel) -> str:
    return hashlib.sha256(model_to_bytes(model)).hexdigest()


def save_model(model: NetworkModel, path):
    try:
        with open(path, "wb") as fh:
            fh.write(model_to_bytes(model))
    except OSError as exc:
        raise IoError(f"cannot write {os.fspath(path)}: {exc.strerror}") from exc


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _read_tensor(reader: _Reader, what: str) -> np.ndarray:
    (rank,) = reader.unpack("<I", f"{what} rank")
    if rank > 8:
        raise FormatError(f"implausible rank {rank} for {what}", reader.pos - 4)
    extents = reader.unpack(f"<{rank}I", f"{what} extents")
    count = int(np.prod(extents, dtype=np.int64))
    raw = reader.take(8 * count, f"{what} values")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(extents)


def _infer_input_shape(layers: Sequence[LayerSpec]) -> Tuple[int, ...]:
    """Recover the input shape, assuming square spatial input for conv models."""
    first_param = next((l for l in layers if l.params), None)
    if first_param is None:
        raise InvalidModel("cannot infer input shape of a parameter-free model")
    if first_param.kind == "linear" and not any(l.kind == "flatten" for l in layers[: layers.index(first_param)]):
        return (first_param.weight.shape[1],)
    convs = [l for l in layers if l.kind == "conv2d"]
    linear_after_flatten = None
    seen_flatten = False
    pools = 0
    channels = None
    for layer in layers:
        if layer.kind == "flatten":
            seen_flatten = True
        elif layer.kind == "maxpool2x2" and not seen_flatten:
            pools += 1
        elif layer.kind == "conv2d" and not seen_flatten:
            channels = layer.weight.shape[0]
        elif layer.kind == "linear" and seen_flatten:
            linear_after_flatten = layer
            break
    if not convs or linear_after_flatten is None:
        raise InvalidModel("cannot infer input shape; pass input_shape explicitly")
    area = linear_after_flatten.weight.shape[1] / channels
    side = math.isqrt(int(area)) if area == int(area) else 0
    if side * side != area:
        raise InvalidModel("cannot infer a square input shape; pass input_shape explicitly")
    return (convs[0].weight.shape[1], side * 2**pools, side * 2**pools)


def model_from_bytes(data: bytes, input_shape: Optional[Sequence[int]] = None) -> NetworkModel:
    reader = _Reader(data)
    magic = reader.take(4, "magic")
    if magic != ISW1_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {ISW1_MAGIC!r}", 0)
    version, n_layers = reader.unpack("<HI", "header")
    if version != ISW1_VERSION:
        raise FormatError(f"unsupported ISW1 version {version}", 4)
    layers = []
    for i in range(n_layers):
        tag_at = reader.pos
        tag, name_len = reader.unpack("<BB", f"layer {i} header")
        if tag not in TAG_KINDS:
            raise FormatError(f"unknown layer kind tag {tag}", tag_at)
        kind = TAG_KINDS[tag]
        name_at = reader.pos
        try:
            name = reader.take(name_len, f"layer {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("layer name is not valid UTF-8", name_at) from None
        params = ()
        if kind in ("conv2d", "linear"):
            params = (_read_tensor(reader, f"{name} weight"), _read_tensor(reader, f"{name} bias"))
        try:
            layers.append(LayerSpec(kind, name, *params))
        except InvalidModel as exc:
            raise FormatError(str(exc), tag_at) from None
    (class_count,) = reader.unpack("<I", "class count")
    if reader.pos != len(data):
        raise FormatError("trailing bytes after class count", reader.pos)
    try:
        shape = tuple(input_shape) if input_shape is not None else _infer_input_shape(layers)
        return NetworkModel(tuple(layers), shape, class_count)
    except InvalidModel as exc:
        raise FormatError(f"layer chain is inconsistent: {exc}", len(data)) from None


def load_model(path, input_shape: Optional[Sequence[int]] = None) -> NetworkModel:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {os.fspath(path)}: {exc.strerror}") from exc
    return model_from_bytes(data, input_shape)


BUNDLED_MODEL = "synsal_v1.isw"
# recipe for the bundled weights (see scripts/make_golden.py)
BUNDLED_RECIPE = {"init_seed": 17, "epochs": 30, "lr": 0.01, "batch_size": 8, "seed": 17}


def bundled_model_path():
    from importlib.resources import files

    return files(__package__).joinpath("assets", BUNDLED_MODEL)


def load_bundled_model() -> NetworkModel:
    """The toy CNN trained on the SynSal-v1 train split, shipped with the package."""
    return model_from_bytes(bundled_model_path().read_bytes())


# ---------------------------------------------------------------------------
# Training and inference
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    lr: float
    batch_size: int
    seed: int

    def __post_init__(self):
        if self.epochs < 0 or self.lr <= 0 or self.batch_size <= 0:
            raise InvalidConfig("epochs must be >= 0, lr and batch_size > 0")
        if self.seed is None:
            raise InvalidConfig("seed is mandatory")


def batch_accuracy(model: NetworkModel, images: np.ndarray, labels: np.ndarray, chunk: int = 50) -> float:
    hits = 0
    for start in range(0, len(images), chunk):
        logits = engine.forward_batch(model.layers, images[start : start + chunk])[-1]
        hits += int((logits.argmax(axis=1) == labels[start : start + chunk]).sum())
    return hits / len(images)


def train(model: NetworkModel, data, cfg: TrainConfig):
    """Mini-batch SGD on mean cross-entropy; returns ``(new_model, train_accuracy)``.

    The shuffle order of each epoch comes from ``default_rng(cfg.seed)``, so a
    fixed seed yields bitwise-identical weights.
    """
    from .dataset import load_split_arrays

    if data.split != "train":
        raise DataError(f"training needs a train split, got {data.split!r}")
    images, labels = load_split_arrays(data)
    if images.shape[1:] != model.input_shape:
        raise ShapeMismatch(
            f"dataset images {list(images.shape[1:])} do not match model input {list(model.input_shape)}"
        )
    if labels.size and labels.max() >= model.class_count:
        raise DataError("dataset labels exceed the model's class count")

    params = {l.name: [l.weight.copy(), l.bias.copy()] for l in model.layers if l.params}
    layers = list(model.layers)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(images))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, y = images[idx], labels[idx]
            outs = engine.forward_batch(layers, x)
            probs = engine.softmax(outs[-1])
            epoch_loss += float(-np.log(probs[np.arange(len(y)), y]).sum())
            grad = probs
            grad[np.arange(len(y)), y] -= 1.0
            grad /= len(y)
            _, grads = engine.backward_batch(layers, x, outs, grad, need_params=True, need_input=False)
            for name, (gw, gb) in grads.items():
                params[name][0] -= cfg.lr * gw
                params[name][1] -= cfg.lr * gb
            layers = [
                LayerSpec(l.kind, l.name, *params[l.name]) if l.params else l for l in layers
            ]
        history.append(epoch_loss / len(images))

    trained = replace(
        model,
        layers=tuple(layers),
        metadata={
            **model.metadata,
            "train_seed": cfg.seed,
            "epochs": model.metadata.get("epochs", 0) + cfg.epochs,
            "loss_history": history,
        },
    )
    return trained, batch_accuracy(trained, images, labels)


def predict(model: NetworkModel, image):
    """Return ``(class_index, probabilities)``; ties go to the lowest index."""
    trace = engine.forward(model, image)
    probs = engine.softmax(trace.logits)
    return int(np.argmax(probs)), probs
