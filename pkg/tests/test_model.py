import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedrco.errors import EmptyDataset, KernelLargerThanInput, LabelOutOfRange, ShapeMismatch
from fedrco.model import (Conv2d, Dense, Flatten, MaxPool, Network, ReLU, build_cnn, build_mlp,
                          evaluate_accuracy, flatten_params, fold, forward_backward, init_params,
                          loss, output_shape, param_shape, predict_logits, unflatten_params, unfold)

from conftest import finite_difference_errors


def conv_loop(x, w, bias, k, stride, pad):
    """Direct nested-loop convolution oracle."""
    x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    b, c, h, wd = x.shape
    ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((b, w.shape[0], ho, wo))
    kern = w.reshape(w.shape[0], c, k, k)
    for n in range(b):
        for o in range(w.shape[0]):
            for i in range(ho):
                for j in range(wo):
                    patch = x[n, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[n, o, i, j] = np.sum(patch * kern[o]) + bias[o]
    return out


def test_unfold_1x1_is_channel_major_reshape():
    x = np.arange(8.0).reshape(1, 2, 2, 2)
    np.testing.assert_array_equal(unfold(x, 1), x.reshape(2, 4))


def test_unfold_full_image_patch():
    x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    np.testing.assert_array_equal(unfold(x, 3), np.arange(1.0, 10.0).reshape(9, 1))


@pytest.mark.parametrize("shape,k,stride,pad", [((1, 1, 4, 4), 2, 2, 0), ((2, 3, 5, 5), 3, 1, 1),
                                                 ((2, 2, 6, 5), 3, 2, 0)])
def test_conv_as_matrix_product_matches_loop(rng, shape, k, stride, pad):
    x = rng.normal(size=shape)
    w = rng.normal(size=(4, shape[1] * k * k))
    bias = rng.normal(size=4)
    cols = unfold(x, k, stride, pad)
    ref = conv_loop(x, w, bias, k, stride, pad)
    b, _, ho, wo = ref.shape
    got = (w @ cols + bias[:, None]).reshape(4, b, ho, wo).transpose(1, 0, 2, 3)
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_unfold_errors():
    with pytest.raises(KernelLargerThanInput):
        unfold(np.zeros((1, 1, 2, 2)), 3)
    with pytest.raises(ShapeMismatch):
        unfold(np.zeros((2, 2)), 1)


@settings(max_examples=30, deadline=None)
@given(k=st.integers(1, 3), stride=st.integers(1, 2), pad=st.integers(0, 1), seed=st.integers(0, 10**6))
def test_fold_is_adjoint_of_unfold(k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    shape = (2, 2, 5, 4)
    x = rng.normal(size=shape)
    cols = unfold(x, k, stride, pad)
    c = rng.normal(size=cols.shape)
    assert math.isclose(np.sum(cols * c), np.sum(x * fold(c, shape, k, stride, pad)), rel_tol=1e-10, abs_tol=1e-10)


def test_zero_dense_net_loss_is_log2():
    layers = [Dense(3, 2)]
    net = Network(layers, [np.zeros((2, 4))], (3,))
    x = np.ones((1, 3))
    value, grads, cap = forward_backward(net, x, np.array([1]))
    assert value == pytest.approx(math.log(2))
    # logits gradient = softmax - onehot = (0.5, -0.5); weight grad is its outer product with [x, 1]
    np.testing.assert_allclose(grads[0], np.outer([0.5, -0.5], [1, 1, 1, 1]))
    np.testing.assert_allclose(cap[0].g, [[0.5], [-0.5]])


def test_gradients_match_finite_differences_dense(rng):
    net = build_mlp([6, 5, 3], rng)
    x = rng.normal(size=(5, 6))
    y = rng.integers(0, 3, 5)
    assert finite_difference_errors(net, x, y).max() <= 1e-4


def test_gradients_match_finite_differences_conv(rng):
    layers = [Conv2d(2, 3, 3, 1, 1), ReLU(), MaxPool(2), Flatten(), Dense(27, 4)]
    net = Network(layers, init_params(layers, rng), (2, 6, 6))
    x = rng.normal(size=(3, 2, 6, 6))
    y = rng.integers(0, 4, 3)
    assert finite_difference_errors(net, x, y).max() <= 1e-4


def test_duplicate_sample_leaves_gradient_unchanged(rng):
    net = build_mlp([4, 6, 3], rng)
    x = rng.normal(size=(1, 4))
    y = np.array([2])
    _, g1, _ = forward_backward(net, x, y)
    _, g2, _ = forward_backward(net, np.vstack([x, x]), np.array([2, 2]))
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(a, b, atol=1e-15)


def test_capture_dimensions(rng):
    net = build_cnn((1, 10, 10), 5, rng, channels=(2, 3), hidden=(4,))
    x = rng.normal(size=(3, 1, 10, 10))
    _, grads, cap = forward_backward(net, x, rng.integers(0, 5, 3))
    # conv1: 8x8 positions, conv2 on 4x4 pooled map: 2x2 positions
    assert [c.n_eff for c in cap] == [3 * 64, 3 * 4, 3, 3]
    for p, g, c in zip(net.params, grads, cap):
        assert g.shape == p.shape
        assert c.a.shape == (p.shape[1], c.n_eff)
        assert c.g.shape == (p.shape[0], c.n_eff)
        assert c.batch_size == 3
        # bias row of A is all ones
        np.testing.assert_array_equal(c.a[-1], 1.0)


def test_capture_reconstructs_gradient(rng):
    net = build_mlp([4, 6, 3], rng)
    x = rng.normal(size=(7, 4))
    _, grads, cap = forward_backward(net, x, rng.integers(0, 3, 7))
    for g, c in zip(grads, cap):
        np.testing.assert_allclose(c.g @ c.a.T / c.batch_size, g, atol=1e-14)


def test_forward_is_deterministic(rng):
    net = build_mlp([4, 6, 3], rng)
    x = rng.normal(size=(9, 4))
    a = forward_backward(net, x, np.zeros(9, dtype=int))
    b = forward_backward(net, x, np.zeros(9, dtype=int))
    assert a[0] == b[0]
    for u, v in zip(a[1], b[1]):
        assert np.array_equal(u, v)


def test_forward_errors(rng):
    net = build_mlp([4, 3], rng)
    with pytest.raises(LabelOutOfRange):
        forward_backward(net, np.zeros((2, 4)), np.array([0, 3]))
    with pytest.raises(ShapeMismatch):
        forward_backward(net, np.zeros((2, 5)), np.array([0, 1]))
    with pytest.raises(ShapeMismatch):
        forward_backward(net, np.zeros((2, 4)), np.array([0]))
    with pytest.raises(EmptyDataset):
        evaluate_accuracy(net, np.zeros((0, 4)), np.zeros(0, dtype=int))


def test_accuracy_examples(rng):
    layers = [Dense(3, 2)]
    w = np.zeros((2, 4))
    w[1, -1] = 5.0  # always predicts class 1
    net = Network(layers, [w], (3,))
    x = rng.normal(size=(10, 3))
    assert evaluate_accuracy(net, x, np.ones(10, dtype=int)) == 1.0
    zero = Network(layers, [np.zeros((2, 4))], (3,))
    y = rng.integers(0, 2, 50)
    assert evaluate_accuracy(zero, rng.normal(size=(50, 3)), y) == np.mean(y == 0)


def test_training_improves_accuracy(rng):
    from fedrco.data import make_synthetic_classification
    ds = make_synthetic_classification(8, 4, 400, 4.0, rng)
    net = build_mlp([8, 16, 4], rng)
    before = evaluate_accuracy(net, ds.features, ds.labels)
    for _ in range(200):
        idx = rng.choice(400, 32, replace=False)
        _, grads, _ = forward_backward(net, ds.features[idx], ds.labels[idx])
        net.params = [p - 0.1 * g for p, g in zip(net.params, grads)]
    assert evaluate_accuracy(net, ds.features, ds.labels) > before


def test_shapes_and_builders(rng):
    assert param_shape(Dense(3, 2)) == (2, 4)
    assert param_shape(Conv2d(3, 16, 3)) == (16, 28)
    assert param_shape(ReLU()) is None
    cnn = build_cnn((3, 32, 32), 10, rng)
    # 32 -> conv3 -> 30 -> pool -> 15 -> conv3 -> 13; 32*13*13 flat
    assert [p.shape for p in cnn.params] == [(16, 28), (32, 145), (32, 32 * 13 * 13 + 1), (256, 33), (10, 257)]
    assert output_shape(cnn.layers, (3, 32, 32)) == (10,)
    with pytest.raises(KernelLargerThanInput):
        output_shape([Conv2d(1, 1, 5)], (1, 3, 3))
    with pytest.raises(ShapeMismatch):
        Network([Dense(3, 2)], [np.zeros((2, 3))])
    mlp = build_mlp([5, 7, 2], rng)
    assert mlp.num_params == 7 * 6 + 2 * 8
    assert mlp.num_classes == 2
    np.testing.assert_array_equal(mlp.params[0][:, -1], 0.0)


def test_flatten_roundtrip(rng):
    net = build_mlp([5, 7, 2], rng)
    vec = flatten_params(net.params)
    back = unflatten_params(vec, net.params)
    for a, b in zip(net.params, back):
        assert np.array_equal(a, b)


def test_loss_matches_forward_backward_and_chunked_logits(rng):
    net = build_mlp([4, 5, 3], rng)
    x = rng.normal(size=(11, 4))
    y = rng.integers(0, 3, 11)
    assert loss(net, x, y) == pytest.approx(forward_backward(net, x, y)[0], rel=1e-14)
    np.testing.assert_allclose(predict_logits(net, x, chunk=3), predict_logits(net, x), atol=1e-14)
