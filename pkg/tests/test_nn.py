"""Layer forward/backward correctness against finite differences, plus
loss and SGD behavior."""

import numpy as np
import pytest

from splitfed.errors import LabelOutOfRange, ShapeMismatch, UnknownLayerKind
from splitfed.nn import (
    GradientSet,
    LayerSpec,
    ParameterSet,
    init_layer_params,
    layer_backward,
    layer_forward,
    sgd_update,
    softmax_cross_entropy,
    stack_backward,
    stack_forward,
)

FD_STEP = 1e-6

LAYER_CASES = [
    ("dense", LayerSpec("dense", "d", in_features=5, out_features=4), (3, 5)),
    ("conv2d", LayerSpec("conv2d", "c", in_channels=2, out_channels=3, kernel=3), (2, 6, 6, 2)),
    (
        "conv2d_stride_pad",
        LayerSpec("conv2d", "cs", in_channels=1, out_channels=2, kernel=3, stride=2, pad=1),
        (2, 7, 7, 1),
    ),
    ("maxpool2d", LayerSpec("maxpool2d", "m", pool=2), (2, 4, 4, 3)),
    ("avgpool2d", LayerSpec("avgpool2d", "a", pool=2), (2, 4, 4, 3)),
    ("relu", LayerSpec("relu", "r"), (4, 6)),
    ("tanh", LayerSpec("tanh", "t"), (4, 6)),
    ("flatten", LayerSpec("flatten", "f"), (3, 2, 2, 2)),
]


def random_instance(layer, x_shape, rng):
    x = rng.uniform(-1, 1, size=x_shape)
    params = ParameterSet(init_layer_params(layer, rng))
    for _, value in params.entries:
        value += rng.uniform(-0.1, 0.1, size=value.shape)
    return x, params


def fd_grad(fn, theta, step=FD_STEP):
    """Central finite difference of a scalar function, coordinate by coordinate."""
    flat = theta.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn()
        flat[i] = orig - step
        lo = fn()
        flat[i] = orig
        out[i] = (hi - lo) / (2 * step)
    return out.reshape(theta.shape)


def rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom))


class TestLayerGradients:
    @pytest.mark.parametrize("name,layer,x_shape", LAYER_CASES, ids=[c[0] for c in LAYER_CASES])
    def test_matches_finite_differences(self, name, layer, x_shape):
        rng = np.random.Generator(np.random.PCG64(42))
        worst = 0.0
        for _ in range(20):
            x, params = random_instance(layer, x_shape, rng)
            probe = rng.uniform(-1, 1, size=layer_forward(layer, x, params).shape)

            def score():
                return float(np.sum(layer_forward(layer, x, params) * probe))

            dx, dparams = layer_backward(layer, x, probe, params)
            worst = max(worst, rel_err(dx, fd_grad(score, x)))
            for _, grad in dparams.entries:
                # identify the matching parameter array by shape-object identity
                target = next(v for n, v in params.entries if v.shape == grad.shape)
                worst = max(worst, rel_err(grad, fd_grad(score, target)))
        assert worst < 1e-4, f"{name}: max relative error {worst}"

    def test_conv2d_random_instance_tight(self):
        rng = np.random.Generator(np.random.PCG64(3))
        layer = LayerSpec("conv2d", "c", in_channels=2, out_channels=3, kernel=3)
        x, params = random_instance(layer, (2, 6, 6, 2), rng)
        probe = rng.uniform(-1, 1, size=layer_forward(layer, x, params).shape)

        def score():
            return float(np.sum(layer_forward(layer, x, params) * probe))

        dx, dparams = layer_backward(layer, x, probe, params)
        assert rel_err(dx, fd_grad(score, x)) < 1e-5
        for _, grad in dparams.entries:
            target = next(v for n, v in params.entries if v.shape == grad.shape)
            assert rel_err(grad, fd_grad(score, target)) < 1e-5


class TestLayerForward:
    def test_dense_identity(self):
        layer = LayerSpec("dense", "d", in_features=2, out_features=2)
        params = ParameterSet([("d.weight", np.eye(2)), ("d.bias", np.zeros(2))])
        out = layer_forward(layer, np.array([[1.0, 2.0]]), params)
        assert np.array_equal(out, [[1.0, 2.0]])

    def test_relu_definition(self):
        layer = LayerSpec("relu", "r")
        out = layer_forward(layer, np.array([[-1.0, 0.0, 3.0]]), ParameterSet())
        assert np.array_equal(out, [[0.0, 0.0, 3.0]])

    def test_maxpool_window(self):
        layer = LayerSpec("maxpool2d", "m", pool=2)
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        out = layer_forward(layer, x, ParameterSet())
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 4.0

    def test_forward_deterministic(self):
        rng = np.random.Generator(np.random.PCG64(0))
        layer = LayerSpec("conv2d", "c", in_channels=2, out_channels=3, kernel=3)
        x, params = random_instance(layer, (2, 6, 6, 2), rng)
        a = layer_forward(layer, x, params)
        b = layer_forward(layer, x, params)
        assert np.array_equal(a, b)

    def test_shape_mismatch_raises(self):
        layer = LayerSpec("dense", "d", in_features=3, out_features=2)
        params = ParameterSet([("d.weight", np.zeros((3, 2))), ("d.bias", np.zeros(2))])
        with pytest.raises(ShapeMismatch):
            layer_forward(layer, np.zeros((1, 4)), params)

    def test_unknown_kind_rejected(self):
        with pytest.raises(UnknownLayerKind):
            LayerSpec("batchnorm", "b")

    def test_pool_requires_divisible_input(self):
        layer = LayerSpec("maxpool2d", "m", pool=2)
        with pytest.raises(ShapeMismatch):
            layer_forward(layer, np.zeros((1, 5, 4, 1)), ParameterSet())


class TestLayerBackwardBasics:
    def test_relu_subgradient_zero_at_negative_and_zero(self):
        layer = LayerSpec("relu", "r")
        x = np.array([[-1.0, 3.0]])
        dx, _ = layer_backward(layer, x, np.array([[1.0, 1.0]]), ParameterSet())
        assert np.array_equal(dx, [[0.0, 1.0]])
        dx0, _ = layer_backward(layer, np.array([[0.0]]), np.array([[5.0]]), ParameterSet())
        assert dx0[0, 0] == 0.0

    def test_dense_identity_weight_passes_gradient(self):
        layer = LayerSpec("dense", "d", in_features=3, out_features=3)
        params = ParameterSet([("d.weight", np.eye(3)), ("d.bias", np.zeros(3))])
        g = np.array([[0.5, -1.0, 2.0]])
        dx, _ = layer_backward(layer, np.array([[1.0, 1.0, 1.0]]), g, params)
        assert np.array_equal(dx, g)

    def test_upstream_shape_checked(self):
        layer = LayerSpec("relu", "r")
        with pytest.raises(ShapeMismatch):
            layer_backward(layer, np.zeros((2, 3)), np.zeros((2, 4)), ParameterSet())


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss, grad = softmax_cross_entropy(np.array([[0.0, 0.0]]), np.array([0]))
        assert loss == pytest.approx(np.log(2.0), abs=1e-12)
        assert grad.shape == (1, 2)

    def test_saturated_no_overflow(self):
        loss, grad = softmax_cross_entropy(np.array([[1000.0, 0.0]]), np.array([0]))
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert np.all(np.isfinite(grad))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.Generator(np.random.PCG64(11))
        logits = rng.normal(size=(4, 3))
        labels = rng.integers(0, 3, size=4)
        _, grad = softmax_cross_entropy(logits, labels)

        def score():
            return softmax_cross_entropy(logits, labels)[0]

        assert rel_err(grad, fd_grad(score, logits)) < 1e-5

    def test_loss_nonnegative_and_rows_sum_zero(self):
        rng = np.random.Generator(np.random.PCG64(5))
        for _ in range(25):
            logits = rng.normal(size=(6, 5)) * rng.uniform(0.1, 10)
            labels = rng.integers(0, 5, size=6)
            loss, grad = softmax_cross_entropy(logits, labels)
            assert loss >= 0.0
            assert np.max(np.abs(grad.sum(axis=1))) < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(LabelOutOfRange):
            softmax_cross_entropy(np.zeros((1, 3)), np.array([3]))

    def test_row_count_mismatch(self):
        with pytest.raises(ShapeMismatch):
            softmax_cross_entropy(np.zeros((2, 3)), np.array([0]))


class TestSgdUpdate:
    def test_arithmetic(self):
        params = ParameterSet([("w", np.array([1.0]))])
        grads = GradientSet([("w", np.array([0.5]))])
        out = sgd_update(params, grads, 0.1)
        assert out.entries[0][1][0] == pytest.approx(0.95, abs=1e-15)
        assert out.version == params.version + 1

    def test_zero_gradient_fixed_point(self):
        params = ParameterSet([("w", np.array([1.0, -2.0]))], version=3)
        out = sgd_update(params, GradientSet([("w", np.zeros(2))]), 0.1)
        assert np.array_equal(out.entries[0][1], params.entries[0][1])
        assert out.version == 4

    def test_zero_lr_is_identity_on_values(self):
        rng = np.random.Generator(np.random.PCG64(1))
        params = ParameterSet([("w", rng.normal(size=(3, 3)))])
        grads = GradientSet([("w", rng.normal(size=(3, 3)))])
        out = sgd_update(params, grads, 0.0)
        assert np.array_equal(out.entries[0][1], params.entries[0][1])

    def test_shape_mismatch(self):
        params = ParameterSet([("w", np.zeros(2))])
        with pytest.raises(ShapeMismatch):
            sgd_update(params, GradientSet([("w", np.zeros(3))]), 0.1)


class TestStacks:
    def test_stack_roundtrip_matches_layerwise(self):
        rng = np.random.Generator(np.random.PCG64(8))
        layers = [
            LayerSpec("dense", "fc1", in_features=6, out_features=5),
            LayerSpec("tanh", "t"),
            LayerSpec("dense", "fc2", in_features=5, out_features=3),
        ]
        entries = []
        for layer in layers:
            entries.extend(init_layer_params(layer, rng))
        params = ParameterSet(entries)
        x = rng.normal(size=(4, 6))
        out, caches = stack_forward(layers, params, x)
        manual = x
        for layer in layers:
            manual = layer_forward(layer, manual, params)
        assert np.array_equal(out, manual)
        upstream = rng.normal(size=out.shape)
        dx, grads = stack_backward(layers, params, caches, upstream)
        assert dx.shape == x.shape
        assert grads.element_count() == params.element_count()

    def test_skip_input_grad_leaves_param_grads_identical(self):
        rng = np.random.Generator(np.random.PCG64(9))
        layers = [
            LayerSpec("conv2d", "c", in_channels=1, out_channels=2, kernel=3),
            LayerSpec("relu", "r"),
            LayerSpec("flatten", "f"),
            LayerSpec("dense", "d", in_features=2 * 4 * 4, out_features=3),
        ]
        entries = []
        for layer in layers:
            entries.extend(init_layer_params(layer, rng))
        params = ParameterSet(entries)
        x = rng.normal(size=(2, 6, 6, 1))
        out, caches = stack_forward(layers, params, x)
        upstream = rng.normal(size=out.shape)
        dx, full = stack_backward(layers, params, caches, upstream)
        none_dx, skipped = stack_backward(layers, params, caches, upstream, need_input_grad=False)
        assert none_dx is None
        for (na, va), (nb, vb) in zip(full.entries, skipped.entries):
            assert na == nb and np.array_equal(va, vb)
