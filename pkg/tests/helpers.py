"""Small model builders and finite-difference utilities shared by the tests."""
import numpy as np

from implicit_saliency.engine import LayerSpec
from implicit_saliency.model import NetworkModel

FD_STEP = 1e-5


def rel_err(analytic, numeric):
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def central_diff(f, x, step=FD_STEP):
    """Numerical gradient of scalar ``f`` at array ``x`` (x is restored afterwards)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        up = f(x)
        flat[i] = keep - step
        down = f(x)
        flat[i] = keep
        gflat[i] = (up - down) / (2 * step)
    return grad


def random_cnn(seed, class_count=3, channels=(2, 3, 4), side=8, pool=True):
    """conv/relu/[pool]/conv/relu/[pool]/flatten/linear with random weights and biases."""
    rng = np.random.default_rng(seed)
    c0, c1, c2 = channels
    layers = [
        LayerSpec("conv2d", "conv1", rng.normal(0, 0.5, (c1, c0, 3, 3)), rng.normal(0, 0.1, c1)),
        LayerSpec("relu", "relu1"),
    ]
    s = side
    if pool:
        layers.append(LayerSpec("maxpool2x2", "pool1"))
        s //= 2
    layers += [
        LayerSpec("conv2d", "conv2", rng.normal(0, 0.5, (c2, c1, 3, 3)), rng.normal(0, 0.1, c2)),
        LayerSpec("relu", "relu2"),
    ]
    if pool:
        layers.append(LayerSpec("maxpool2x2", "pool2"))
        s //= 2
    layers += [
        LayerSpec("flatten", "flatten"),
        LayerSpec("linear", "fc", rng.normal(0, 0.5, (class_count, c2 * s * s)), rng.normal(0, 0.1, class_count)),
    ]
    return NetworkModel(layers, (c0, side, side), class_count)
