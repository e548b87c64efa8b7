import numpy as np
import pytest

from conftest import assert_gradients_close
from nn_core import (
    GradientBuffer,
    LayerParams,
    MlpNetwork,
    backward,
    backward_batch,
    dump_parameters,
    forward,
    forward_batch,
    init_xavier_normal,
    load_parameters,
    parameter_count,
)
from utils import DimensionError


def _zero(net):
    for array in net.parameters():
        array.fill(0.0)
    return net


class TestInitXavierNormal:
    def test_full_1d_shape_parameter_count(self):
        net = init_xavier_normal([1, 20, 40, 500], 42)
        # 1*20+20 + 20*40+40 + 40*500+500
        assert parameter_count(net) == 21380
        assert net.output_dim == 500
        assert net.dims == [1, 20, 40, 500]

    def test_biases_are_zero(self):
        net = init_xavier_normal([1, 1, 1], 7)
        for layer in net.layers:
            assert np.all(layer.biases == 0.0)

    def test_same_seed_is_bitwise_identical(self):
        a = init_xavier_normal([2, 8, 8, 3], 123)
        b = init_xavier_normal([2, 8, 8, 3], 123)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa, pb)

    def test_different_seed_differs(self):
        a = init_xavier_normal([2, 8, 3], 1)
        b = init_xavier_normal([2, 8, 3], 2)
        assert not np.array_equal(a.layers[0].weights, b.layers[0].weights)

    @pytest.mark.parametrize("shape", [[1, 0, 3], [0, 4], [2, -1, 1], [3]])
    def test_bad_dimensions_rejected(self, shape):
        with pytest.raises(DimensionError):
            init_xavier_normal(shape, 0)

    def test_weight_statistics(self):
        net = init_xavier_normal([100, 100], 2024)
        std = net.layers[0].weights.std()
        assert abs(std - np.sqrt(2.0 / 200.0)) < 0.1 * np.sqrt(2.0 / 200.0)

    def test_incompatible_layers_rejected(self):
        with pytest.raises(DimensionError):
            MlpNetwork([LayerParams(np.ones((3, 1)), np.zeros(3)), LayerParams(np.ones((2, 4)), np.zeros(2))])


class TestForward:
    def test_zero_network_outputs_zero(self):
        net = _zero(init_xavier_normal([1, 5, 4], 0))
        np.testing.assert_array_equal(forward(net, 0.37), np.zeros(4))

    def test_affine_identity(self):
        net = MlpNetwork([LayerParams(np.array([[1.0]]), np.array([0.0]))])
        assert forward(net, 0.3)[0] == 0.3

    def test_pure(self):
        net = init_xavier_normal([2, 6, 6, 3], 5)
        x = np.array([0.1, -0.4])
        assert np.array_equal(forward(net, x), forward(net, x))

    def test_batch_matches_single_points(self):
        net = init_xavier_normal([1, 6, 3], 5)
        points = np.array([[-0.5], [0.0], [0.25]])
        batch = net(points)
        for row, p in zip(batch, points):
            np.testing.assert_allclose(row, forward(net, p), rtol=0, atol=1e-14)

    def test_dimension_mismatch(self):
        net = init_xavier_normal([2, 4, 3], 0)
        with pytest.raises(DimensionError):
            forward(net, [0.1, 0.2, 0.3])


class TestBackward:
    def test_zero_cotangent_gives_zero_gradient(self):
        net = init_xavier_normal([1, 4, 3], 3)
        grads = backward(net, 0.2, np.zeros(3))
        assert np.all(grads.flat() == 0.0)

    @pytest.mark.parametrize("shape,seed", [([1, 8, 3], 0), ([2, 5, 8, 2], 1), ([2, 3, 3, 3], 2), ([1, 2], 3)])
    def test_matches_finite_differences(self, shape, seed, fd_gradient):
        rng = np.random.default_rng(seed)
        net = init_xavier_normal(shape, seed)
        for layer in net.layers:
            layer.biases[:] = rng.normal(0, 0.3, size=layer.biases.shape)
        x = rng.uniform(-1, 1, size=shape[0])
        cotangent = rng.normal(size=shape[-1])

        def loss():
            return float(np.dot(cotangent, forward(net, x)))

        numeric = fd_gradient(loss, net.parameters())
        assert_gradients_close(backward(net, x, cotangent).arrays(), numeric)

    def test_additive_over_points(self):
        net = init_xavier_normal([1, 6, 2], 9)
        cot = np.array([0.7, -1.2])
        total = backward(net, 0.1, cot)
        total.accumulate(backward(net, -0.6, cot))
        _, cache = forward_batch(net, np.array([[0.1], [-0.6]]))
        together = backward_batch(net, cache, np.vstack([cot, cot]))
        np.testing.assert_allclose(total.flat(), together.flat(), rtol=1e-13, atol=1e-15)

    def test_cotangent_length_checked(self):
        net = init_xavier_normal([1, 4, 3], 0)
        with pytest.raises(DimensionError):
            backward(net, 0.0, np.ones(2))

    def test_buffer_zero_and_scale(self):
        net = init_xavier_normal([1, 3, 2], 0)
        buf = backward(net, 0.5, np.ones(2))
        summed = GradientBuffer.zeros_like(net)
        summed.accumulate(buf)
        summed.accumulate(buf)
        summed.scale(0.5)
        np.testing.assert_allclose(summed.flat(), buf.flat())
        buf.zero()
        assert np.all(buf.flat() == 0.0)


def test_parameter_snapshot_restores_network():
    net = init_xavier_normal([2, 5, 3], 11)
    blob = dump_parameters(net) + b"tail"
    assert blob.startswith(b"dims=2,5,3\n")
    restored, rest = load_parameters(blob)
    assert rest == b"tail"
    for a, b in zip(net.parameters(), restored.parameters()):
        assert np.array_equal(a, b)


def test_truncated_parameter_blob_rejected():
    blob = dump_parameters(init_xavier_normal([1, 4, 2], 3))
    with pytest.raises(DimensionError, match="truncated"):
        load_parameters(blob[:-8])


@pytest.mark.parametrize("blob", [b"dims=1,x,2\n", b"no header", b""])
def test_bad_parameter_header_rejected(blob):
    with pytest.raises(DimensionError):
        load_parameters(blob)
