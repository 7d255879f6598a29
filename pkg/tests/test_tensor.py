"""
Tests for the tensor engine: functional kernels, graph shape inference and
reverse-mode gradients checked against central finite differences.
"""

import numpy as np
import pytest

from nowcast.core.errors import NegativeExtent, NowcastError, ShapeError
from nowcast.core.tensor import (Graph, ParameterSet, Workspace, avgpool, center_crop, check_gradients,
                                 conv2d_reference, conv2d_valid, conv_output_extent, crop_offsets, forward,
                                 loss_and_gradients, mse_cropped, upsample_nearest)


def naive_conv(x, w, b, s):
    batch, height, width, cin = x.shape
    k, _, _, cout = w.shape
    ho, wo = (height - k) // s + 1, (width - k) // s + 1
    out = np.zeros((batch, ho, wo, cout))
    for n in range(batch):
        for i in range(ho):
            for j in range(wo):
                for o in range(cout):
                    acc = b[o]
                    for di in range(k):
                        for dj in range(k):
                            for ci in range(cin):
                                acc += x[n, i * s + di, j * s + dj, ci] * w[di, dj, ci, o]
                    out[n, i, j, o] = acc
    return out


def random_params(graph, rng, scale=0.5):
    return ParameterSet((p.name, rng.normal(scale=scale, size=p.shape)) for p in graph.params)


# =============================================================================
# Functional kernels
# =============================================================================

class TestConvOutputExtent:

    @pytest.mark.parametrize("length,kernel,stride,expected", [
        (256, 2, 2, 128),
        (57, 2, 2, 28),
        (5, 3, 1, 3),
    ])
    def test_formula(self, length, kernel, stride, expected):
        assert conv_output_extent(length, kernel, stride) == expected

    def test_input_smaller_than_kernel_names_layer(self):
        with pytest.raises(NegativeExtent, match="enc3.conv0"):
            conv_output_extent(2, 3, 1, layer='enc3.conv0')


class TestConv2dValid:

    def test_ones(self):
        out = conv2d_valid(np.ones((1, 3, 3, 1)), np.ones((3, 3, 1, 1)), np.zeros(1))
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 9.0

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 5, 4, 1))
        out = conv2d_valid(x, np.ones((1, 1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(out, x)

    def test_strided_matches_loop_oracle(self, rng):
        x = rng.normal(size=(1, 8, 8, 2))
        w = rng.normal(size=(3, 3, 2, 4))
        b = rng.normal(size=4)
        out = conv2d_valid(x, w, b, stride=2)
        assert out.shape == (1, 3, 3, 4)
        assert np.max(np.abs(out - naive_conv(x, w, b, 2))) <= 1e-12

    @pytest.mark.parametrize("shape,k,s", [((2, 9, 7, 3), 3, 1), ((1, 10, 10, 2), 2, 2), ((1, 6, 6, 5), 1, 1)])
    def test_fast_kernel_matches_reference(self, rng, shape, k, s):
        x = rng.normal(size=shape)
        w = rng.normal(size=(k, k, shape[-1], 3))
        b = rng.normal(size=3)
        fast = conv2d_valid(x, w, b, s)
        assert np.max(np.abs(fast - conv2d_reference(x, w, b, s))) <= 1e-12
        assert np.max(np.abs(fast - naive_conv(x, w, b, s))) <= 1e-12

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            conv2d_valid(rng.normal(size=(1, 5, 5, 2)), rng.normal(size=(3, 3, 3, 1)))


class TestResampling:

    def test_upsample_single_value(self):
        out = upsample_nearest(np.full((1, 1, 1, 1), 5.0))
        assert out.shape == (1, 2, 2, 1)
        assert np.all(out == 5.0)

    def test_upsample_block_replication(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        expected = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=float)
        np.testing.assert_array_equal(upsample_nearest(x)[0, :, :, 0], expected)

    def test_avgpool_inverts_upsample(self, rng):
        x = rng.normal(size=(2, 3, 5, 4))
        np.testing.assert_allclose(avgpool(upsample_nearest(x), 2), x, atol=1e-15)

    def test_avgpool_needs_divisible_extent(self, rng):
        with pytest.raises(ShapeError):
            avgpool(rng.normal(size=(1, 5, 4, 1)), 2)


class TestCenterCrop:

    def test_symmetric(self):
        assert crop_offsets(28, 24) == (2, 2)

    def test_identity(self, rng):
        x = rng.normal(size=(1, 6, 6, 2))
        np.testing.assert_array_equal(center_crop(x, (6, 6)), x)

    def test_odd_difference_removes_bottom(self):
        assert crop_offsets(5, 4) == (0, 1)
        x = np.arange(25, dtype=float).reshape(1, 5, 5, 1)
        np.testing.assert_array_equal(center_crop(x, (4, 4)), x[:, 0:4, 0:4, :])

    def test_target_too_large(self, rng):
        with pytest.raises(ShapeError):
            center_crop(rng.normal(size=(1, 4, 4, 1)), (5, 5))


class TestMseCropped:

    def test_equal_is_zero(self, rng):
        x = rng.normal(size=(2, 6, 6, 3))
        assert mse_cropped(x, x, (4, 4)) == 0.0

    def test_constant_offset(self, rng):
        x = rng.normal(size=(1, 6, 6, 2))
        assert mse_cropped(x, x + 0.5, (4, 4)) == pytest.approx(0.25, abs=1e-12)

    def test_loop_oracle(self, rng):
        x = rng.normal(size=(1, 6, 6, 1))
        expected = sum(x[0, i, j, 0] ** 2 for i in range(1, 5) for j in range(1, 5)) / 16
        assert mse_cropped(x, np.zeros_like(x), (4, 4)) == pytest.approx(expected, abs=1e-12)


# =============================================================================
# Graphs
# =============================================================================

class TestGraph:

    def test_shapes_inferred_at_build(self):
        g = Graph()
        x = g.input('x', 8, 8, 2)
        c = g.conv2d(x, 'c', kernel=3, out_channels=4, stride=2)
        assert g.shape(c) == (3, 3, 4)
        assert g.shape(g.upsample(c, 'up')) == (6, 6, 4)

    def test_too_small_input_names_layer(self):
        g = Graph()
        x = g.input('x', 2, 2, 1)
        with pytest.raises(NegativeExtent, match="deep"):
            g.conv2d(x, 'deep', kernel=3, out_channels=1)

    def test_concat_mismatch(self):
        g = Graph()
        a = g.input('a', 4, 4, 1)
        b = g.input('b', 5, 5, 1)
        with pytest.raises(ShapeError, match="cat"):
            g.concat([a, b], 'cat')

    def test_frozen_graph_rejects_nodes(self):
        g = Graph()
        g.input('x', 2, 2, 1)
        g.freeze()
        with pytest.raises(NowcastError):
            g.input('y', 2, 2, 1)

    def test_forward_matches_static_shapes(self, rng):
        g = Graph()
        x = g.input('x', 9, 9, 3)
        c = g.relu(g.bias(g.conv2d(x, 'c', 3, 5), 'c'), 'r')
        g.mark_output('out', g.avgpool(g.center_crop(c, 'crop', 6, 6), 'pool', 2))
        out = forward(g, random_params(g, rng), {'x': rng.normal(size=(2, 9, 9, 3))})['out']
        assert out.shape == (2,) + g.shape('out')

    def test_missing_feed(self, rng):
        g = Graph()
        g.mark_output('out', g.relu(g.input('x', 2, 2, 1), 'r'))
        with pytest.raises(ShapeError, match="x"):
            forward(g, {}, {})

    def test_deterministic(self, rng):
        g = Graph()
        x = g.input('x', 10, 10, 2)
        g.mark_output('out', g.bias(g.conv2d(x, 'c', 3, 4), 'c'))
        params = random_params(g, rng)
        feeds = {'x': rng.normal(size=(3, 10, 10, 2))}
        first = forward(g, params, feeds)['out']
        second = forward(g, params, feeds)['out']
        assert first.tobytes() == second.tobytes()


class TestBackward:

    def test_mse_of_node_with_itself_has_zero_gradient(self, rng):
        g = Graph()
        x = g.input('x', 5, 5, 2)
        c = g.bias(g.conv2d(x, 'c', 3, 2), 'c')
        g.mse_cropped(c, c, 'loss', 3, 3)
        params = random_params(g, rng)
        _, grads = loss_and_gradients(g, params, {'x': rng.normal(size=(1, 5, 5, 2))}, 'loss')
        for _, value in grads:
            assert np.all(value == 0.0)

    def test_bias_gradient_of_sum_is_one(self):
        g = Graph()
        x = g.input('x', 1, 1, 1)
        g.sum_scalar([g.bias(x, 'lin')], 'loss')
        params = ParameterSet([('lin.bias', np.array([0.3]))])
        value, grads = loss_and_gradients(g, params, {'x': np.array([[[[2.0]]]])}, 'loss')
        assert value == pytest.approx(2.3)
        np.testing.assert_array_equal(grads['lin.bias'], [1.0])

    def test_non_scalar_loss_rejected(self, rng):
        g = Graph()
        x = g.input('x', 3, 3, 1)
        b = g.bias(x, 'lin')
        ws = Workspace(g)
        params = random_params(g, rng)
        ws.forward(params, {'x': rng.normal(size=(1, 3, 3, 1))}, ['lin/bias'])
        with pytest.raises(ShapeError):
            ws.backward(params, 'lin/bias')

    def test_backward_requires_forward(self, rng):
        g = Graph()
        x = g.input('x', 1, 1, 1)
        g.sum_scalar([g.bias(x, 'lin')], 'loss')
        with pytest.raises(NowcastError):
            Workspace(g).backward(random_params(g, rng), 'loss')

    def test_gradient_order_matches_parameters(self, rng):
        g = Graph()
        x = g.input('x', 6, 6, 1)
        a = g.bias(g.conv2d(x, 'a', 3, 2), 'a')
        b = g.bias(g.conv2d(a, 'b', 1, 1), 'b')
        t = g.input('t', 4, 4, 1)
        g.mse_cropped(b, t, 'loss', 2, 2)
        params = random_params(g, rng)
        _, grads = loss_and_gradients(g, params, {'x': rng.normal(size=(1, 6, 6, 1)),
                                                  't': rng.normal(size=(1, 4, 4, 1))}, 'loss')
        assert grads.structure() == params.structure()


def _graph_conv(stride):
    g = Graph('conv')
    x = g.input('x', 8, 8, 2)
    c = g.bias(g.conv2d(x, 'c', 3, 3, stride), 'c')
    size = g.shape(c)[0]
    g.mse_cropped(c, g.input('t', size, size, 3), 'loss', size - 1, size - 1)
    return g


def _graph_upsample():
    g = Graph('upsample')
    x = g.input('x', 3, 3, 2)
    up = g.upsample(g.bias(g.conv2d(x, 'c', 1, 2), 'c'), 'up')
    g.mse_cropped(up, g.input('t', 6, 6, 2), 'loss', 4, 4)
    return g


def _graph_crop():
    g = Graph('crop')
    x = g.input('x', 7, 7, 2)
    c = g.center_crop(g.bias(g.conv2d(x, 'c', 1, 2), 'c'), 'crop', 4, 4)
    g.mse_cropped(c, g.input('t', 4, 4, 2), 'loss', 4, 4)
    return g


def _graph_concat_relu():
    g = Graph('concat')
    x = g.input('x', 7, 7, 2)
    a = g.relu(g.bias(g.conv2d(x, 'a', 1, 2), 'a'), 'a/relu')
    b = g.relu(g.bias(g.conv2d(x, 'b', 3, 3), 'b'), 'b/relu')
    cat = g.concat([g.center_crop(a, 'a/crop', 5, 5), b], 'cat')
    out = g.bias(g.conv2d(cat, 'mix', 3, 2), 'mix')
    g.mse_cropped(out, g.input('t', 3, 3, 2), 'loss', 3, 3)
    return g


def _graph_avgpool_sum():
    g = Graph('avgpool')
    x = g.input('x', 8, 8, 2)
    c = g.bias(g.conv2d(x, 'c', 1, 2), 'c')
    pooled = g.avgpool(c, 'pool', 2)
    t = g.input('t', 8, 8, 2)
    fine = g.mse_cropped(c, t, 'mse_fine', 6, 6)
    coarse = g.mse_cropped(pooled, g.avgpool(t, 'tpool', 2), 'mse_coarse', 4, 4)
    g.sum_scalar([fine, coarse], 'loss')
    return g


def _graph_learned_truth():
    g = Graph('truth-side')
    x = g.input('x', 6, 6, 1)
    pred = g.bias(g.conv2d(x, 'p', 3, 1), 'p')
    truth = g.relu(g.bias(g.conv2d(x, 'q', 3, 1), 'q'), 'q/relu')
    g.mse_cropped(pred, truth, 'loss', 2, 2)
    return g


class TestGradientCheck:

    @pytest.mark.parametrize("build", [
        lambda: _graph_conv(1),
        lambda: _graph_conv(2),
        _graph_upsample,
        _graph_crop,
        _graph_concat_relu,
        _graph_avgpool_sum,
        _graph_learned_truth,
    ])
    def test_against_finite_differences(self, rng, build):
        g = build()
        params = random_params(g, rng)
        feeds = {}
        for node in g.nodes:
            if node.kind.value == 'input':
                feeds[node.name] = rng.normal(size=(2,) + g.shape(node.id))
        worst = check_gradients(g, params, feeds, 'loss', rng, coords_per_param=6)
        assert worst < 1e-4
