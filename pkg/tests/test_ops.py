from __future__ import annotations

import math

import numpy as np
import pytest

from app.core import ops
from app.core.errors import ConfigurationError, DimensionError, NumericError
from app.core.tensor import Tape, Tensor, precision

from conftest import gradcheck

RNG = np.random.default_rng(42)


def uniform(*shape):
    return RNG.uniform(-1.0, 1.0, size=shape)


# -------------------------
# Valeurs
# -------------------------

def test_matmul_identity():
    out = ops.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_allclose(out.data, [[3.0], [4.0]])


def test_matmul_dot():
    out = ops.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_allclose(out.data, [[11.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_of_sum():
    a = Tensor(uniform(3, 4), requires_grad=True)
    b = Tensor(uniform(4, 2))
    with Tape() as tape:
        loss = ops.sum(ops.matmul(a, b))
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-5)


def test_conv1d_identity_kernel():
    out = ops.conv1d(Tensor([[1.0], [2.0], [3.0]]), Tensor([[[1.0]]]))
    np.testing.assert_allclose(out.data[:, 0], [1.0, 2.0, 3.0])


def test_conv1d_two_tap_kernel():
    out = ops.conv1d(Tensor([[1.0], [2.0], [3.0]]), Tensor([[[1.0]], [[1.0]]]))
    np.testing.assert_allclose(out.data[:, 0], [3.0, 5.0])


def test_conv1d_output_length_with_stride_pad_dilation():
    x = Tensor(np.ones((10, 2)))
    w = Tensor(np.ones((3, 2, 4)))
    assert ops.conv1d(x, w, stride=2, pad=1).shape == (5, 4)
    assert ops.conv1d(x, w, pad=2, dilation=2).shape == (10, 4)


@pytest.mark.parametrize("kwargs", [{"stride": 0}, {"pad": -1}, {"dilation": 0}])
def test_conv1d_invalid_configuration(kwargs):
    with pytest.raises(ConfigurationError):
        ops.conv1d(Tensor(np.ones((8, 1))), Tensor(np.ones((3, 1, 1))), **kwargs)


def test_conv1d_kernel_longer_than_input():
    with pytest.raises(DimensionError):
        ops.conv1d(Tensor(np.ones((2, 1))), Tensor(np.ones((3, 1, 1))))


def test_relu_values():
    np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_mean_value():
    assert ops.mean(Tensor([1.0, 2.0, 3.0])).item() == pytest.approx(2.0)


def test_var_is_population_variance():
    assert ops.var(Tensor([1.0, 2.0, 3.0, 4.0])).item() == pytest.approx(1.25)


def test_softmax_cross_entropy_closed_form():
    loss = ops.softmax_cross_entropy(Tensor([0.0, 0.0]), 0)
    assert loss.item() == pytest.approx(math.log(2.0), abs=1e-6)


def test_softmax_cross_entropy_bad_target():
    with pytest.raises(DimensionError):
        ops.softmax_cross_entropy(Tensor([[0.0, 1.0]]), [2])


def test_add_shape_mismatch():
    with pytest.raises(DimensionError):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_cos_angle_zero_norm():
    with pytest.raises(NumericError):
        ops.cos_angle(Tensor(np.zeros(3)), Tensor(np.ones((2, 3))))


def test_angular_margin_on_aligned_target():
    cos = Tensor([[1.0, 0.0]])
    out = ops.angular_margin(cos, [0], 0.2)
    assert out.data[0, 0] == pytest.approx(math.cos(0.2), abs=1e-6)
    assert out.data[0, 1] == pytest.approx(0.0)


# -------------------------
# Gradients (différences finies, float64)
# -------------------------

def test_gradcheck_elementwise():
    gradcheck(ops.add, [uniform(3, 4), uniform(4)])
    gradcheck(ops.sub, [uniform(3, 4), uniform(3, 1)])
    gradcheck(ops.mul, [uniform(3, 4), uniform(3, 4)])
    gradcheck(ops.relu, [uniform(5, 3)])
    gradcheck(ops.sqrt, [RNG.uniform(0.5, 2.0, size=(4,))])


def test_gradcheck_reductions():
    gradcheck(lambda a: ops.sum(a, axis=0), [uniform(3, 4)])
    gradcheck(lambda a: ops.mean(a, axis=1), [uniform(3, 4)])
    gradcheck(lambda a: ops.var(a, axis=1), [uniform(3, 5)])
    gradcheck(lambda a: ops.var(a), [uniform(6)])


def test_gradcheck_shapes():
    gradcheck(lambda a: ops.reshape(a, (6, 2)), [uniform(3, 4)])
    gradcheck(lambda a, b: ops.concat([a, b], axis=-1), [uniform(2, 3), uniform(2, 2)])


def test_gradcheck_matmul():
    gradcheck(ops.matmul, [uniform(3, 4), uniform(4, 2)])
    gradcheck(ops.matmul, [uniform(2, 3, 4), uniform(4, 2)])


def test_gradcheck_conv1d():
    gradcheck(lambda x, w: ops.conv1d(x, w), [uniform(8, 2), uniform(3, 2, 3)])
    gradcheck(lambda x, w: ops.conv1d(x, w, stride=2, pad=1), [uniform(2, 9, 2), uniform(3, 2, 2)])
    gradcheck(lambda x, w: ops.conv1d(x, w, pad=2, dilation=2), [uniform(7, 2), uniform(3, 2, 2)])


def test_gradcheck_conv2d():
    gradcheck(lambda x, w: ops.conv2d(x, w, pad=1), [uniform(5, 4, 2), uniform(3, 3, 2, 2)])
    gradcheck(lambda x, w: ops.conv2d(x, w, stride=2, pad=1), [uniform(2, 5, 6, 1), uniform(3, 3, 1, 2)])


def test_gradcheck_batchnorm():
    gradcheck(lambda x, g, b: ops.batchnorm(x, g, b), [uniform(6, 3), uniform(3), uniform(3)])
    mean, var = uniform(3), RNG.uniform(0.5, 1.5, size=3)
    gradcheck(
        lambda x, g, b: ops.batchnorm(x, g, b, running=(mean, var)),
        [uniform(2, 5, 3), uniform(3), uniform(3)],
    )


def test_gradcheck_softmax_cross_entropy():
    gradcheck(lambda z: ops.softmax_cross_entropy(z, [0, 2, 1]), [uniform(3, 4)])


def test_gradcheck_cos_angle_and_margin():
    gradcheck(ops.cos_angle, [uniform(3, 4), uniform(5, 4)])
    gradcheck(lambda a, b: ops.angular_margin(ops.cos_angle(a, b), [1, 0, 4], 0.2), [uniform(3, 4), uniform(5, 4)])


def test_two_layer_mlp_gradients():
    with precision(np.float64):
        x = uniform(6, 4)
        w1, w2 = uniform(4, 5), uniform(5, 3)
        target = [0, 1, 2, 0, 1, 2]

        def model(a, b):
            return ops.softmax_cross_entropy(ops.matmul(ops.relu(ops.matmul(Tensor(x), a)), b), target)

        gradcheck(model, [w1, w2])
