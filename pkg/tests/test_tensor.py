import math

import numpy as np
import pytest

from conftest import assert_grads_close
from scalant import tensor as T
from scalant.tensor import Tape, Tensor, backward


def rand(*shape, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


class TestConstruction:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            Tensor([1.0, float("nan")])

    def test_rejects_inf(self):
        with pytest.raises(ValueError):
            Tensor([[np.inf]])

    def test_float64_and_shape(self):
        t = Tensor([[1, 2], [3, 4]])
        assert t.data.dtype == np.float64
        assert t.shape == (2, 2)
        assert t.size == 4

    def test_debug_guard_catches_overflow(self):
        T.set_debug_checks(True)
        try:
            big = Tensor([1e308])
            with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
                T.mul(big, Tensor([1e308]))
        finally:
            T.set_debug_checks(False)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(a, Tensor(np.eye(2)))
        assert np.array_equal(out.data, a.data)

    def test_unit_selection(self):
        out = T.matmul(Tensor([[1.0, 0.0]]), Tensor([[2.0], [3.0]]))
        assert np.array_equal(out.data, [[2.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_grad_of_sum_equals_ones_times_bt(self):
        a = rand(3, 4, seed=1)
        b = rand(4, 2, seed=2)
        with Tape() as tape:
            loss = T.sum_all(T.matmul(a, b))
            backward(tape, loss)
        expected = np.ones((3, 2)) @ b.data.T
        assert np.allclose(tape.grad(a), expected, rtol=1e-12)

    def test_grad_vs_finite_differences(self):
        a = rand(3, 4, seed=1)
        b = rand(4, 2, seed=2)
        assert_grads_close(lambda: T.sum_all(T.matmul(a, b)), [a, b])

    def test_batched_grad(self):
        a = rand(2, 3, 3, 4, seed=3)
        b = rand(2, 3, 4, 2, seed=4)
        w = np.random.default_rng(5).normal(size=(2, 3, 3, 2))

        def loss():
            return T.sum_all(T.mul(T.matmul(a, b), Tensor(w)))

        assert_grads_close(loss, [a, b])

    def test_nd_by_2d_grad(self):
        a = rand(2, 3, 4, seed=6)
        b = rand(4, 5, seed=7)
        assert_grads_close(lambda: T.sum_all(T.matmul(a, b)), [a, b])


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0]))
        assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_single_element(self):
        assert np.array_equal(T.softmax(Tensor([7.0])).data, [1.0])

    def test_no_overflow_at_extreme_logits(self):
        out = T.softmax(Tensor([1000.0, 0.0]))
        assert abs(out.data[0] - 1.0) < 1e-12
        assert abs(out.data[1]) < 1e-12

    def test_rows_sum_to_one_randomized(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            x = Tensor(rng.normal(size=(4, 7)) * rng.uniform(0.1, 50))
            s = T.softmax(x, axis=-1).data.sum(axis=-1)
            assert np.abs(s - 1.0).max() < 1e-12

    def test_grad(self):
        x = rand(3, 5, seed=8)
        w = np.random.default_rng(9).normal(size=(3, 5))
        assert_grads_close(lambda: T.sum_all(T.mul(T.softmax(x, -1), Tensor(w))), [x])


class TestLayerNorm:
    def test_constant_row_gives_zeros(self):
        x = Tensor([[3.0, 3.0, 3.0, 3.0]])
        gain = Tensor(np.ones(4))
        bias = Tensor(np.zeros(4))
        out = T.layer_norm(x, gain, bias)
        assert np.allclose(out.data, 0.0)

    def test_already_normalized_row(self):
        out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                           eps=1e-12)
        assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-9)

    def test_moments(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(6, 32)) * 3 + 5)
        gain = Tensor(np.full(32, 1.7))
        bias = Tensor(np.full(32, 0.3))
        out = T.layer_norm(x, gain, bias, eps=1e-5).data
        assert np.abs(out.mean(axis=-1) - 0.3).max() < 1e-6
        assert np.abs(out.std(axis=-1) - 1.7).max() < 1e-4

    def test_pre_affine_invariants(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(5, 16)))
        out = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-12).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-8
        assert np.abs(out.std(axis=-1) - 1.0).max() < 1e-6

    def test_rejects_single_feature(self):
        with pytest.raises(ValueError):
            T.layer_norm(Tensor([[1.0]]), Tensor([1.0]), Tensor([0.0]))

    def test_grad(self):
        x = rand(4, 6, seed=10)
        gain = rand(6, seed=11)
        bias = rand(6, seed=12)
        w = np.random.default_rng(13).normal(size=(4, 6))
        assert_grads_close(
            lambda: T.sum_all(T.mul(T.layer_norm(x, gain, bias), Tensor(w))),
            [x, gain, bias],
        )


class TestElementwiseAndShape:
    def test_relu(self):
        assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_relu_grad(self):
        x = Tensor(np.array([0.5, -0.7, 1.3, -2.0]), requires_grad=True)
        assert_grads_close(lambda: T.sum_all(T.mul(T.relu(x), x)), [x])

    def test_add_broadcast_grad(self):
        x = rand(3, 4, seed=14)
        b = rand(4, seed=15)
        w = np.random.default_rng(16).normal(size=(3, 4))
        assert_grads_close(lambda: T.sum_all(T.mul(T.add(x, b), Tensor(w))), [x, b])

    def test_scale_and_mul_grad(self):
        x = rand(5, seed=17)
        y = rand(5, seed=18)
        assert_grads_close(lambda: T.sum_all(T.scale(T.mul(x, y), 2.5)), [x, y])

    def test_transpose_grad(self):
        x = rand(2, 3, 4, seed=19)
        w = np.random.default_rng(20).normal(size=(4, 2, 3))
        assert_grads_close(
            lambda: T.sum_all(T.mul(T.transpose(x, (2, 0, 1)), Tensor(w))), [x]
        )

    def test_reshape_grad(self):
        x = rand(2, 6, seed=21)
        w = np.random.default_rng(22).normal(size=(3, 4))
        assert_grads_close(
            lambda: T.sum_all(T.mul(T.reshape(x, (3, 4)), Tensor(w))), [x]
        )

    def test_concat_grad(self):
        a = rand(2, 3, seed=23)
        b = rand(2, 2, seed=24)
        w = np.random.default_rng(25).normal(size=(2, 5))
        assert_grads_close(
            lambda: T.sum_all(T.mul(T.concat([a, b], axis=1), Tensor(w))), [a, b]
        )

    def test_slice_grad(self):
        x = rand(4, 5, seed=26)
        w = np.random.default_rng(27).normal(size=(4, 2))
        assert_grads_close(
            lambda: T.sum_all(T.mul(T.slice_axis(x, 1, 1, 3), Tensor(w))), [x]
        )

    def test_gather_rows_grad(self):
        table = rand(6, 3, seed=28)
        ids = np.array([[0, 2, 2], [5, 0, 1]])
        w = np.random.default_rng(29).normal(size=(2, 3, 3))
        assert_grads_close(
            lambda: T.sum_all(T.mul(T.gather_rows(table, ids), Tensor(w))), [table]
        )


class TestDropout:
    def test_rate_zero_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(5, 5)))
        assert T.dropout(x, 0.0, np.random.default_rng(1)) is x

    def test_invalid_rate(self):
        x = Tensor([1.0])
        for rate in (-0.1, 1.0, 1.5):
            with pytest.raises(ValueError):
                T.dropout(x, rate, np.random.default_rng(0))

    def test_mean_preserved_large_sample(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.uniform(1.0, 2.0, size=10**6))
        out = T.dropout(x, 0.3, np.random.default_rng(4))
        assert abs(out.data.mean() / x.data.mean() - 1.0) < 0.01

    def test_grad_with_fixed_mask(self):
        x = rand(8, 8, seed=30)

        def loss():
            return T.sum_all(T.dropout(x, 0.4, np.random.default_rng(77)))

        assert_grads_close(loss, [x])


class TestCrossEntropy:
    def test_peaked_logits_loss_near_zero(self):
        logits = Tensor(np.array([[100.0, 0.0, 0.0]]))
        target = np.array([[1.0, 0.0, 0.0]])
        loss = T.cross_entropy(logits, target, np.array([True]))
        assert loss.item() < 1e-12

    def test_uniform_logits_give_log_n(self):
        n = 7
        logits = Tensor(np.zeros((4, n)))
        target = np.eye(n)[[0, 3, 5, 6]]
        loss = T.cross_entropy(logits, target, np.ones(4, dtype=bool))
        assert abs(loss.item() - math.log(n)) < 1e-12

    def test_self_target_gives_entropy(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(6, 9))
        p = np.exp(T.log_softmax_np(z))
        loss = T.cross_entropy(Tensor(z), p, np.ones(6, dtype=bool))
        entropy = -(p * np.log(p)).sum(axis=-1).mean()
        assert abs(loss.item() - entropy) < 1e-12

    def test_pad_positions_excluded(self):
        rng = np.random.default_rng(6)
        z = rng.normal(size=(4, 5))
        t = np.eye(5)[[0, 1, 2, 3]]
        mask = np.array([True, True, False, False])
        full = T.cross_entropy(Tensor(z[:2]), t[:2], np.array([True, True]))
        masked = T.cross_entropy(Tensor(z), t, mask)
        assert masked.item() == pytest.approx(full.item(), abs=1e-15)

    def test_rejects_unnormalized_target(self):
        with pytest.raises(ValueError):
            T.cross_entropy(Tensor(np.zeros((1, 3))), np.array([[0.5, 0.2, 0.2]]),
                            np.array([True]))

    def test_rejects_empty_mask(self):
        with pytest.raises(ValueError):
            T.cross_entropy(Tensor(np.zeros((1, 3))), np.array([[1.0, 0, 0]]),
                            np.array([False]))

    def test_grad(self):
        z = rand(3, 6, seed=31)
        t = np.exp(T.log_softmax_np(np.random.default_rng(32).normal(size=(3, 6))))
        mask = np.array([True, False, True])
        assert_grads_close(lambda: T.cross_entropy(z, t, mask), [z])


class TestBackward:
    def test_sum_gives_ones(self):
        x = rand(3, 4, seed=33)
        with Tape() as tape:
            backward(tape, T.sum_all(x))
        assert np.array_equal(tape.grad(x), np.ones((3, 4)))

    def test_sum_of_squares_gives_2x(self):
        x = rand(5, seed=34)
        with Tape() as tape:
            backward(tape, T.sum_all(T.mul(x, x)))
        assert np.allclose(tape.grad(x), 2 * x.data, rtol=1e-15)

    def test_reuse_accumulates_both_branches(self):
        x = rand(4, seed=35)

        def loss():
            a = T.scale(x, 3.0)
            b = T.mul(x, x)
            return T.sum_all(T.add(a, b))

        assert_grads_close(loss, [x])
        with Tape() as tape:
            backward(tape, loss())
        assert np.allclose(tape.grad(x), 3.0 + 2 * x.data, rtol=1e-14)

    def test_rejects_non_scalar(self):
        x = rand(3, seed=36)
        with Tape() as tape:
            y = T.scale(x, 2.0)
            with pytest.raises(ValueError):
                backward(tape, y)

    def test_no_grad_outside_tape(self):
        x = rand(3, seed=37)
        out = T.scale(x, 2.0)  # no active tape
        tape = Tape()
        assert tape.nodes == []
        assert out.requires_grad

    def test_grads_only_for_requires_grad(self):
        x = rand(3, seed=38)
        c = Tensor(np.ones(3))
        with Tape() as tape:
            backward(tape, T.sum_all(T.mul(x, c)))
        assert tape.grad(c) is None
        assert tape.grad(x) is not None

    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(99)
            x = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
            y = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
            with Tape() as tape:
                out = T.matmul(T.softmax(T.matmul(x, y), -1), y)
                loss = T.sum_all(T.mul(out, out))
                backward(tape, loss)
            return loss.item(), tape.grad(x).copy(), tape.grad(y).copy()

        l1, gx1, gy1 = run()
        l2, gx2, gy2 = run()
        assert l1 == l2
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gy1, gy2)
