"""Gradient correctness: backward() against central finite differences."""

import numpy as np
import pytest

import ftscope.tensor as T
from oracles import finite_difference_grad, relative_error

H_FD = 1e-5
TOL = 1e-4


def check_grad(build_loss, *arrays, seed=0):
    """Compare backward() gradients with finite differences for every input.

    ``build_loss`` maps tensors (one per input array) to a scalar Tensor.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tape = T.Tape()
    leaves = [tape.leaf(a) for a in arrays]
    loss = build_loss(*leaves)
    grads = T.backward(tape, loss)
    for i, (leaf, arr) in enumerate(zip(leaves, arrays)):
        def scalar_fn(x, i=i):
            probe = list(arrays)
            probe[i] = x
            return build_loss(*[T.Tensor(p) for p in probe]).item()

        fd = finite_difference_grad(scalar_fn, arr.copy(), h=H_FD)
        err = relative_error(grads[leaf.node], fd)
        assert err <= TOL, f"input {i}: autodiff/FD relative error {err:.3e}"


class TestBasicGradients:
    def test_sum_gradient_all_ones(self):
        tape = T.Tape()
        x = tape.leaf(np.random.default_rng(0).standard_normal((3, 4)))
        grads = T.backward(tape, T.sum_all(x))
        np.testing.assert_array_equal(grads[x.node], np.ones((3, 4)))

    def test_half_square_gradient_is_x(self):
        rng = np.random.default_rng(1)
        xv = rng.standard_normal(6)
        tape = T.Tape()
        x = tape.leaf(xv)
        loss = T.sum_all(T.mul(x, x)) / 2.0
        grads = T.backward(tape, loss)
        np.testing.assert_allclose(grads[x.node], xv, atol=1e-12)

    def test_untouched_leaf_gets_zeros(self):
        tape = T.Tape()
        x = tape.leaf(np.ones(3))
        y = tape.leaf(np.ones((2, 2)))
        grads = T.backward(tape, T.sum_all(x))
        np.testing.assert_array_equal(grads[y.node], np.zeros((2, 2)))

    def test_non_scalar_loss_raises(self):
        tape = T.Tape()
        x = tape.leaf(np.ones(3))
        with pytest.raises(T.AutodiffError, match="scalar"):
            T.backward(tape, T.mul(x, x))

    def test_mixed_tapes_raise(self):
        t1, t2 = T.Tape(), T.Tape()
        a = t1.leaf(np.ones(2))
        b = t2.leaf(np.ones(2))
        with pytest.raises(T.AutodiffError, match="tape"):
            T.add(a, b)


class TestOpGradients:
    def test_elementwise_chain(self):
        rng = np.random.default_rng(2)
        check_grad(
            lambda a, b: T.sum_all(T.mul(T.sigmoid(a), T.relu(T.sub(a, b)))),
            rng.standard_normal((3, 3)) + 0.3,
            rng.standard_normal((3, 3)),
        )

    def test_log_clamp(self):
        rng = np.random.default_rng(3)
        check_grad(
            lambda a: T.sum_all(T.log(T.clamp(a, 1e-12, 1.0))),
            rng.uniform(0.1, 0.9, size=(4, 2)),
        )

    def test_matmul(self):
        rng = np.random.default_rng(4)
        check_grad(
            lambda a, b: T.mean_all(T.matmul(a, b)),
            rng.standard_normal((3, 4)),
            rng.standard_normal((4, 2)),
        )

    def test_dense_with_bias_broadcast(self):
        rng = np.random.default_rng(5)
        check_grad(
            lambda x, w, b: T.sum_all(T.sigmoid(T.dense(x, w, b))),
            rng.standard_normal((2, 3)),
            rng.standard_normal((3, 4)),
            rng.standard_normal(4),
        )

    def test_softmax(self):
        rng = np.random.default_rng(6)
        w = rng.standard_normal((2, 5))
        check_grad(
            lambda a: T.sum_all(T.mul(T.softmax(a), T.constant(w))),
            rng.standard_normal((2, 5)),
        )

    def test_conv2d_all_inputs(self):
        rng = np.random.default_rng(7)
        w = rng.standard_normal((2, 2, 3, 3))
        check_grad(
            lambda x, k, b: T.sum_all(T.mul(T.conv2d(x, k, b, stride=2, padding=1), T.constant(w))),
            rng.standard_normal((2, 2, 5, 5)),
            rng.standard_normal((2, 2, 3, 3)),
            rng.standard_normal(2),
        )

    def test_maxpool(self):
        rng = np.random.default_rng(8)
        w = rng.standard_normal((1, 2, 2, 2))
        check_grad(
            lambda x: T.sum_all(T.mul(T.pool2d(x, "max", 2, 2), T.constant(w))),
            rng.standard_normal((1, 2, 4, 4)),
        )

    def test_avgpool_with_padding(self):
        rng = np.random.default_rng(9)
        w = rng.standard_normal((1, 1, 3, 3))
        check_grad(
            lambda x: T.sum_all(T.mul(T.pool2d(x, "avg", 3, 2, padding=1), T.constant(w))),
            rng.standard_normal((1, 1, 5, 5)),
        )

    def test_concat_and_select(self):
        rng = np.random.default_rng(10)
        check_grad(
            lambda a, b: T.mean_all(T.select_channel(T.concat_channels([a, b]), 2)),
            rng.standard_normal((2, 2, 3, 3)),
            rng.standard_normal((2, 2, 3, 3)),
        )

    def test_global_avg_pool(self):
        rng = np.random.default_rng(11)
        w = rng.standard_normal((2, 3))
        check_grad(
            lambda x: T.sum_all(T.mul(T.global_avg_pool(x), T.constant(w))),
            rng.standard_normal((2, 3, 4, 4)),
        )

    def test_cross_entropy(self):
        rng = np.random.default_rng(12)
        labels = np.array([0, 2, 1])
        check_grad(
            lambda p: T.cross_entropy(T.softmax(p), labels),
            rng.standard_normal((3, 3)),
        )

    def test_multilabel_bce(self):
        rng = np.random.default_rng(13)
        labels = (rng.random((3, 4)) < 0.5).astype(float)
        check_grad(
            lambda z: T.multilabel_bce(T.sigmoid(z), labels),
            rng.standard_normal((3, 4)),
        )

    def test_color_transform(self):
        rng = np.random.default_rng(14)
        m = rng.standard_normal((3, 3))
        w = rng.standard_normal((3, 4, 4))
        check_grad(
            lambda x: T.sum_all(T.mul(T.color_transform(x, m), T.constant(w))),
            rng.standard_normal((3, 4, 4)),
        )

    @pytest.mark.parametrize("h,w", [(4, 4), (5, 7), (3, 8), (1, 5), (6, 1)])
    def test_half_spectrum_to_image(self, h, w):
        rng = np.random.default_rng(15)
        half = w // 2 + 1
        weights = rng.standard_normal((h, w))
        check_grad(
            lambda p: T.sum_all(T.mul(T.half_spectrum_to_image(p, h, w), T.constant(weights))),
            rng.standard_normal((h, half, 2)),
        )

    def test_half_spectrum_batched_channels(self):
        rng = np.random.default_rng(16)
        h, w = 4, 6
        weights = rng.standard_normal((3, h, w))
        check_grad(
            lambda p: T.sum_all(T.mul(T.half_spectrum_to_image(p, h, w), T.constant(weights))),
            rng.standard_normal((3, h, w // 2 + 1, 2)) * 0.2,
        )


class TestRandomizedGradientSweep:
    """Every differentiable op under random shapes, as one batched sweep."""

    @pytest.mark.parametrize("seed", range(10))
    def test_random_op_chain(self, seed):
        rng = np.random.default_rng(100 + seed)
        n, c, h, w = 2, int(rng.integers(1, 4)), int(rng.integers(4, 7)), int(rng.integers(4, 7))
        f = int(rng.integers(1, 4))
        x = rng.standard_normal((n, c, h, w)) * 0.5
        k = rng.standard_normal((f, c, 3, 3)) * 0.5
        b = rng.standard_normal(f) * 0.1
        wmat = rng.standard_normal((f, 3)) * 0.5
        bias = rng.standard_normal(3) * 0.1
        labels = rng.integers(0, 3, size=n)

        def loss_fn(xt, kt, bt, wt, bt2):
            y = T.relu(T.conv2d(xt, kt, bt, stride=1, padding=1))
            y = T.pool2d(y, "max", 2, 2)
            feats = T.global_avg_pool(y)
            probs = T.softmax(T.dense(feats, wt, bt2))
            return T.cross_entropy(probs, labels)

        check_grad(loss_fn, x, k, b, wmat, bias)
