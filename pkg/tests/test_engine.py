import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implicit_saliency import engine
from implicit_saliency.engine import LayerSpec, layer_backward, layer_forward
from implicit_saliency.errors import (
    IndexOutOfRange,
    InvalidModel,
    ShapeMismatch,
    TraceMismatch,
    UnknownLayer,
)
from implicit_saliency.model import NetworkModel

import oracles
from helpers import central_diff, random_cnn, rel_err

SEEDS = (0, 1, 2)


# ---------------------------------------------------------------------------
# forward examples
# ---------------------------------------------------------------------------

def test_identity_conv_returns_input():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 1, 5, 7))
    layer = LayerSpec("conv2d", "id", np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(layer_forward(layer, x), x)


def test_relu_definition():
    x = np.array([[[[-1.0, 2.0], [0.0, 3.0]]]])
    out = layer_forward(LayerSpec("relu", "r"), x)
    np.testing.assert_array_equal(out[0, 0], [[0.0, 2.0], [0.0, 3.0]])


@pytest.mark.parametrize("seed", SEEDS)
def test_forward_matches_scalar_loop_model(seed):
    model = random_cnn(seed, class_count=3, channels=(2, 3, 2), side=6)
    x = np.random.default_rng(seed + 100).normal(size=model.input_shape)
    trace = engine.forward(model, x)
    expected = oracles.forward_reference(model.layers, x)
    assert list(trace.outputs) == [l.name for l in model.layers]
    for name, ref in zip(trace.outputs, expected):
        np.testing.assert_allclose(trace[name], ref, rtol=0, atol=1e-12)
    assert trace.logits.shape == (model.class_count,)


def test_trace_has_one_entry_per_layer_in_order():
    model = random_cnn(0)
    trace = engine.forward(model, np.zeros(model.input_shape))
    assert list(trace.outputs) == [l.name for l in model.layers]


def test_forward_rejects_wrong_input_shape():
    model = random_cnn(0)
    with pytest.raises(ShapeMismatch):
        engine.forward(model, np.zeros((3, 8, 8)))


def test_chain_that_does_not_compose_is_rejected():
    rng = np.random.default_rng(0)
    layers = [
        LayerSpec("conv2d", "c", rng.normal(size=(2, 1, 3, 3)), np.zeros(2)),
        LayerSpec("flatten", "f"),
        LayerSpec("linear", "fc", rng.normal(size=(2, 5)), np.zeros(2)),
    ]
    with pytest.raises(InvalidModel):
        NetworkModel(layers, (1, 4, 4), 2)


def test_layer_spec_shape_checks():
    with pytest.raises(InvalidModel):
        LayerSpec("conv2d", "c", np.zeros((2, 1, 3, 3)), np.zeros(3))
    with pytest.raises(InvalidModel):
        LayerSpec("linear", "l", np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(InvalidModel):
        LayerSpec("relu", "r", np.zeros(1), np.zeros(1))
    with pytest.raises(InvalidModel):
        LayerSpec("softmax", "s")


@pytest.mark.parametrize("seed", SEEDS)
def test_forward_and_backward_are_bitwise_repeatable(seed):
    model = random_cnn(seed)
    x = np.random.default_rng(seed).normal(size=model.input_shape)
    a, b = engine.forward(model, x), engine.forward(model, x)
    for name in a.outputs:
        assert a[name].tobytes() == b[name].tobytes()
    g = np.random.default_rng(seed + 1).normal(size=model.class_count)
    assert engine.backward_to_layer(model, a, g, "conv1").tobytes() == engine.backward_to_layer(model, b, g, "conv1").tobytes()


def test_outputs_are_finite_for_finite_inputs():
    model = random_cnn(4)
    x = np.random.default_rng(0).normal(scale=50.0, size=model.input_shape)
    trace = engine.forward(model, x)
    assert all(np.isfinite(v).all() for v in trace.outputs.values())
    _, grad = engine.cross_entropy(trace.logits, 0)
    assert np.isfinite(engine.backward_to_input(model, trace, grad)).all()


# ---------------------------------------------------------------------------
# convolution against the six-loop reference
# ---------------------------------------------------------------------------

CONV_SHAPES = [
    ((1, 3, 3), (1, 1, 3, 3)),
    ((2, 5, 4), (3, 2, 3, 3)),
    ((3, 6, 6), (2, 3, 1, 1)),
    ((2, 7, 5), (2, 2, 5, 3)),
    ((4, 8, 8), (4, 4, 3, 3)),
]


@pytest.mark.parametrize("x_shape,k_shape", CONV_SHAPES)
def test_conv_matches_loop_oracle(x_shape, k_shape):
    rng = np.random.default_rng(sum(x_shape) + sum(k_shape))
    x = rng.normal(size=x_shape)
    k = rng.normal(size=k_shape)
    b = rng.normal(size=k_shape[0])
    layer = LayerSpec("conv2d", "c", k, b)
    out = layer_forward(layer, x[None])[0]
    np.testing.assert_allclose(out, oracles.conv_loops(x, k, b), rtol=0, atol=1e-12)

    g = rng.normal(size=out.shape)
    gx, gk, gb = layer_backward(layer, x[None], g[None], need_params=True)
    rx, rk, rb = oracles.conv_loops_backward(x, k, g)
    np.testing.assert_allclose(gx[0], rx, rtol=0, atol=1e-12)
    np.testing.assert_allclose(gk, rk, rtol=0, atol=1e-12)
    np.testing.assert_allclose(gb, rb, rtol=0, atol=1e-12)


def test_maxpool_ties_go_to_first_row_major_position():
    x = np.array([[[[1.0, 1.0], [1.0, 1.0]]]])
    g = np.array([[[[5.0]]]])
    gx = engine.maxpool_backward(x, g)
    np.testing.assert_array_equal(gx[0, 0], [[5.0, 0.0], [0.0, 0.0]])
    x = np.array([[[[0.0, 2.0], [2.0, 1.0]]]])
    np.testing.assert_array_equal(engine.maxpool_backward(x, g)[0, 0], [[0.0, 5.0], [0.0, 0.0]])


def test_maxpool_matches_loop_oracle_on_odd_sizes():
    rng = np.random.default_rng(5)
    x = rng.integers(0, 3, size=(3, 7, 5)).astype(float)  # many ties
    g = rng.normal(size=(3, 3, 2))
    np.testing.assert_array_equal(engine.maxpool_forward(x[None])[0], oracles.maxpool_loops(x))
    np.testing.assert_array_equal(engine.maxpool_backward(x[None], g[None])[0], oracles.maxpool_loops_backward(x, g))


# ---------------------------------------------------------------------------
# finite differences, layer by layer
# ---------------------------------------------------------------------------

def _away_from_zero(x, gap=1e-3):
    # keep relu/maxpool kinks out of reach of the finite-difference step
    return np.where(np.abs(x) < gap, gap, x)


def _layer_cases():
    cases = []
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        for shape in ((1, 4, 4), (2, 5, 3), (3, 6, 6)):
            c = shape[0]
            cases.append(("conv2d", seed, shape, LayerSpec("conv2d", "c", rng.normal(size=(2, c, 3, 3)), rng.normal(size=2))))
            cases.append(("relu", seed, shape, LayerSpec("relu", "r")))
            cases.append(("maxpool2x2", seed, shape, LayerSpec("maxpool2x2", "p")))
            cases.append(("flatten", seed, shape, LayerSpec("flatten", "f")))
        for n in (1, 4, 9):
            cases.append(("linear", seed, (n,), LayerSpec("linear", "l", rng.normal(size=(3, n)), rng.normal(size=3))))
    return cases


LAYER_CASES = _layer_cases()


@pytest.mark.parametrize(
    "kind,seed,shape,layer", LAYER_CASES, ids=[f"{c[0]}-s{c[1]}-{'x'.join(map(str, c[2]))}" for c in LAYER_CASES]
)
def test_layer_input_gradient_finite_differences(kind, seed, shape, layer):
    rng = np.random.default_rng(seed + 10)
    x = _away_from_zero(rng.normal(size=shape))
    out = layer_forward(layer, x[None])[0]
    r = rng.normal(size=out.shape)

    def loss(v):
        return float((layer_forward(layer, v[None])[0] * r).sum())

    gx, _, _ = layer_backward(layer, x[None], r[None])
    assert rel_err(gx[0], central_diff(loss, x)) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", ["conv2d", "linear"])
@pytest.mark.parametrize("size", [3, 5, 6])
def test_parameter_gradients_finite_differences(seed, kind, size):
    rng = np.random.default_rng(seed)
    if kind == "conv2d":
        x = rng.normal(size=(2, size, size))
        w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    else:
        x = rng.normal(size=(size,))
        w, b = rng.normal(size=(4, size)), rng.normal(size=4)
    layer = LayerSpec(kind, "p", w, b)
    r = rng.normal(size=layer_forward(layer, x[None])[0].shape)
    _, gw, gb = layer_backward(layer, x[None], r[None], need_params=True)

    def loss_w(v):
        return float((layer_forward(LayerSpec(kind, "p", v, b), x[None])[0] * r).sum())

    def loss_b(v):
        return float((layer_forward(LayerSpec(kind, "p", w, v), x[None])[0] * r).sum())

    assert rel_err(gw, central_diff(loss_w, w)) < 1e-4
    assert rel_err(gb, central_diff(loss_b, b)) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_model_parameter_gradients_finite_differences(seed):
    model = random_cnn(seed, class_count=3, channels=(1, 2, 2), side=4)
    x = np.random.default_rng(seed).normal(size=model.input_shape)
    target = seed % 3
    trace = engine.forward(model, x)
    _, g = engine.cross_entropy(trace.logits, target)
    grads = engine.parameter_gradients(model, trace, g)
    for i, layer in enumerate(model.layers):
        if not layer.params:
            continue

        def loss(v, i=i, layer=layer):
            layers = list(model.layers)
            layers[i] = LayerSpec(layer.kind, layer.name, v, layer.bias)
            return engine.cross_entropy(engine.forward_batch(layers, x[None])[-1][0], target)[0]

        assert rel_err(grads[layer.name][0], central_diff(loss, layer.weight)) < 1e-4


# ---------------------------------------------------------------------------
# cross-entropy
# ---------------------------------------------------------------------------

def test_cross_entropy_symmetric_two_class():
    loss, grad = engine.cross_entropy([0.0, 0.0], 0)
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    np.testing.assert_allclose(grad, [-0.5, 0.5], atol=1e-15)


def test_cross_entropy_singleton():
    loss, grad = engine.cross_entropy([3.7], 0)
    assert loss == 0.0
    np.testing.assert_array_equal(grad, [0.0])


def test_cross_entropy_bad_index():
    with pytest.raises(IndexOutOfRange):
        engine.cross_entropy([1.0, 2.0], 2)
    with pytest.raises(IndexOutOfRange):
        engine.cross_entropy([1.0, 2.0], -1)


def test_cross_entropy_is_stable_for_huge_logits():
    loss, grad = engine.cross_entropy([1000.0, 0.0], 1)
    assert loss == pytest.approx(1000.0)
    np.testing.assert_allclose(grad, [1.0, -1.0])


def test_cross_entropy_finite_differences_reference_case():
    z = np.array([2.0, -1.0, 0.5])
    loss, grad = engine.cross_entropy(z, 1)
    assert loss == pytest.approx(-math.log(math.exp(-1) / sum(math.exp(v) for v in z)), rel=1e-14)
    numeric = central_diff(lambda v: engine.cross_entropy(v, 1)[0], z)
    assert rel_err(grad, numeric) < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("n", [2, 4, 7])
def test_cross_entropy_finite_differences(seed, n):
    z = np.random.default_rng(seed).normal(scale=3.0, size=n)
    for i in range(n):
        _, grad = engine.cross_entropy(z, i)
        assert rel_err(grad, central_diff(lambda v: engine.cross_entropy(v, i)[0], z)) < 1e-4


# ---------------------------------------------------------------------------
# backward_to_layer
# ---------------------------------------------------------------------------

def _loss_from(model, start, activation, target):
    """Cross-entropy as a function of the output of layer ``start``."""
    x = activation[None]
    for layer in model.layers[start + 1 :]:
        x = layer_forward(layer, x)
    return engine.cross_entropy(x[0], target)[0]


FD_MODELS = [
    (seed, kwargs)
    for seed in SEEDS
    for kwargs in (
        dict(channels=(1, 2, 2), side=4),
        dict(channels=(2, 3, 2), side=8),
        dict(channels=(3, 2, 3), side=6, pool=False),
    )
]


@pytest.mark.parametrize("seed,kwargs", FD_MODELS)
@pytest.mark.parametrize("tap,pre_relu", [("conv1", False), ("conv2", False), ("conv1", True), ("conv2", True)])
def test_backward_to_layer_finite_differences(seed, kwargs, tap, pre_relu):
    model = random_cnn(seed, class_count=3, **kwargs)
    x = np.random.default_rng(seed + 7).normal(size=model.input_shape)
    trace = engine.forward(model, x)
    target = (seed + 1) % model.class_count
    _, g = engine.cross_entropy(trace.logits, target)
    idx = engine.resolve_tap(model, tap, pre_relu)
    assert model.layers[idx].kind == ("conv2d" if pre_relu else "relu")
    analytic = engine.backward_to_layer(model, trace, g, tap, pre_relu=pre_relu)
    act = trace[model.layers[idx].name]
    assert analytic.shape == act.shape
    numeric = central_diff(lambda a: _loss_from(model, idx, a, target), act)
    keep = ~_pool_tie_mask(model, idx, act)
    assert keep.any()
    assert rel_err(analytic[keep], numeric[keep]) < 1e-4


def _pool_tie_mask(model, idx, act):
    """Entries feeding a 2x2 window whose values are all exactly zero.

    Post-ReLU zeros that share a pooling window are ties of the max, where
    the loss has only one-sided derivatives; central differences are not
    meaningful there.
    """
    mask = np.zeros(act.shape, dtype=bool)
    if idx + 1 >= len(model.layers) or model.layers[idx + 1].kind != "maxpool2x2":
        return mask
    c, h, w = act.shape
    h2, w2 = h // 2, w // 2
    win = act[:, : 2 * h2, : 2 * w2].reshape(c, h2, 2, w2, 2)
    dead = (win == 0).all(axis=(2, 4))
    mask[:, : 2 * h2, : 2 * w2] = np.repeat(np.repeat(dead, 2, axis=1), 2, axis=2)
    return mask


def test_backward_to_final_layer_is_identity():
    model = random_cnn(1)
    trace = engine.forward(model, np.ones(model.input_shape))
    g = np.array([0.3, -1.2, 0.9])
    np.testing.assert_array_equal(engine.backward_to_layer(model, trace, g, "fc"), g)


def test_backward_of_zero_gradient_is_zero():
    model = random_cnn(1)
    trace = engine.forward(model, np.ones(model.input_shape))
    for tap in ("conv1", "pool1", "conv2", "flatten"):
        assert not engine.backward_to_layer(model, trace, np.zeros(3), tap).any()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), alpha=st.floats(-1e3, 1e3, allow_nan=False))
def test_backward_is_linear_in_grad_logits(seed, alpha):
    model = random_cnn(seed % 5)
    rng = np.random.default_rng(seed)
    trace = engine.forward(model, rng.normal(size=model.input_shape))
    g = rng.normal(size=3)
    for tap in ("conv1", "conv2"):
        base = engine.backward_to_layer(model, trace, g, tap)
        scaled = engine.backward_to_layer(model, trace, alpha * g, tap)
        np.testing.assert_allclose(scaled, alpha * base, rtol=1e-12, atol=1e-12 * max(1.0, abs(alpha)))


def test_backward_errors():
    model = random_cnn(0)
    trace = engine.forward(model, np.zeros(model.input_shape))
    with pytest.raises(UnknownLayer):
        engine.backward_to_layer(model, trace, np.zeros(3), "conv9")
    other = random_cnn(0, channels=(2, 3, 5))
    with pytest.raises(TraceMismatch):
        engine.backward_to_layer(other, trace, np.zeros(3), "conv1")
    with pytest.raises(ShapeMismatch):
        engine.backward_to_layer(model, trace, np.zeros(4), "conv1")


# ---------------------------------------------------------------------------
# guided backpropagation
# ---------------------------------------------------------------------------

def _relu_linear_model(weights):
    layers = [
        LayerSpec("relu", "relu"),
        LayerSpec("flatten", "flatten"),
        LayerSpec("linear", "fc", np.array([weights]), np.zeros(1)),
    ]
    return NetworkModel(layers, (1, 2, 2), 1)


def test_guided_rule_hand_case():
    model = _relu_linear_model([-1.0, 2.0, 0.5, 4.0])
    x = np.array([[[1.0, -2.0], [3.0, 0.0]]])
    trace = engine.forward(model, x)
    plain = engine.backward_to_input(model, trace, np.ones(1))
    guided = engine.guided_backward_to_input(model, trace, np.ones(1))
    # upstream gradient is the weight row; plain keeps x > 0, guided also needs grad > 0
    np.testing.assert_array_equal(plain[0], [[-1.0, 0.0], [0.5, 0.0]])
    np.testing.assert_array_equal(guided[0], [[0.0, 0.0], [0.5, 0.0]])


def test_guided_equals_plain_without_relu():
    rng = np.random.default_rng(0)
    layers = [
        LayerSpec("conv2d", "c", rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2)),
        LayerSpec("maxpool2x2", "p"),
        LayerSpec("flatten", "f"),
        LayerSpec("linear", "fc", rng.normal(size=(3, 8)), rng.normal(size=3)),
    ]
    model = NetworkModel(layers, (1, 4, 4), 3)
    trace = engine.forward(model, rng.normal(size=(1, 4, 4)))
    g = rng.normal(size=3)
    np.testing.assert_array_equal(
        engine.guided_backward_to_input(model, trace, g), engine.backward_to_input(model, trace, g)
    )


@pytest.mark.parametrize("seed", SEEDS)
def test_guided_blocks_units_with_nonpositive_input(seed):
    model = random_cnn(seed)
    x = np.random.default_rng(seed).normal(size=model.input_shape)
    trace = engine.forward(model, x)
    g = np.random.default_rng(seed + 1).normal(size=3)
    # gradient arriving at the conv2 output (before relu2) under the guided rule
    outs = [o[None] for o in trace.outputs.values()]
    idx = engine.layer_index(model, "conv2")
    grad, _ = engine.backward_batch(model.layers, x[None], outs, g[None], stop=idx, guided=True)
    pre = trace["conv2"]
    assert not grad[0][pre <= 0].any()
    assert (grad[0] >= 0).all()
