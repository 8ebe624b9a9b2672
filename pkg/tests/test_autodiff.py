import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from encodenet.autodiff import SGD, Adam, OptimizerState, Tape, Tensor, float64_mode, gradcheck, optimizer_step
from encodenet.autodiff import functional as F
from encodenet.autodiff.gradcheck import numerical_gradient, relative_error
from encodenet.errors import NumericError, ShapeError, TapeError


def grad_of(fn, *arrays):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
    tape.backward(out)
    return [leaf.grad for leaf in leaves]


class TestConv2d:
    def test_stride2_same_shape(self):
        x = Tensor(np.zeros((1, 3, 32, 32)))
        w = Tensor(np.zeros((32, 3, 3, 3)))
        out = F.conv2d(x, w, Tensor(np.zeros(32)), stride=2, padding="same")
        assert out.shape == (1, 32, 16, 16)

    def test_identity_kernel(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = F.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_ones_valid_sums_to_nine(self):
        out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)),
                       padding="valid")
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 9.0

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        got = F.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64),
                       stride=2, padding="valid").data
        expect = np.zeros((2, 3, 2, 2))
        for n in range(2):
            for f in range(3):
                for i in range(2):
                    for j in range(2):
                        expect[n, f, i, j] = (x[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[f]).sum() + b[f]
        np.testing.assert_allclose(got, expect, rtol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            F.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_non_finite_input(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = np.nan
        with pytest.raises(NumericError):
            F.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))))


class TestUpsample:
    def test_blocks(self):
        out = F.upsample_nearest2x(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]))
        expect = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=np.float32)
        np.testing.assert_array_equal(out.data[0, 0], expect)

    def test_backward_counts_replicas(self):
        (g,) = grad_of(lambda x: F.sum(F.upsample_nearest2x(x)), np.ones((1, 1, 2, 2)))
        np.testing.assert_array_equal(g, np.full((1, 1, 2, 2), 4.0))

    def test_shape(self):
        assert F.upsample_nearest2x(Tensor(np.zeros((1, 8, 4, 4)))).shape == (1, 8, 8, 8)


class TestActivations:
    def test_relu(self):
        out = F.relu(Tensor([-2.0, 3.0]))
        np.testing.assert_array_equal(out.data, [0.0, 3.0])

    def test_sigmoid_at_zero(self):
        assert F.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_gradient_at_zero(self):
        (g,) = grad_of(lambda x: F.sum(F.sigmoid(x)), np.array([0.0]))
        assert g[0] == pytest.approx(0.25, abs=1e-7)

    def test_sigmoid_extremes_stay_finite(self):
        out = F.sigmoid(Tensor([-200.0, 200.0]))
        np.testing.assert_array_equal(out.data, [0.0, 1.0])


class TestBatchnorm:
    def _bn(self, x, train=True, gamma=None, beta=None, rm=None, rv=None):
        c = x.shape[1]
        gamma = np.ones(c) if gamma is None else gamma
        beta = np.zeros(c) if beta is None else beta
        rm = np.zeros(c, np.float32) if rm is None else rm
        rv = np.ones(c, np.float32) if rv is None else rv
        return F.batchnorm2d(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv, train)

    def test_constant_channel_gives_beta(self):
        x = np.full((4, 2, 3, 3), 5.0)
        out = self._bn(x, beta=np.array([0.5, -1.5]))
        np.testing.assert_allclose(out.data[:, 0], 0.5)
        np.testing.assert_allclose(out.data[:, 1], -1.5)

    def test_standardized_input_is_unchanged(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(8, 3, 4, 4))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out = self._bn(x)
        # eps = 1e-5 scales by 1/sqrt(1 + 1e-5); |x| stays small enough for 1e-5.
        assert np.abs(out.data - x.astype(np.float32)).max() < 1e-4
        assert np.abs(out.data - x.astype(np.float32) / np.sqrt(1 + 1e-5)).max() < 1e-5

    def test_eval_is_pure(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 4, 4))
        rm, rv = rng.normal(size=3).astype(np.float32), rng.uniform(0.5, 2, 3).astype(np.float32)
        rm0, rv0 = rm.copy(), rv.copy()
        a = self._bn(x, train=False, rm=rm, rv=rv).data
        b = self._bn(x, train=False, rm=rm, rv=rv).data
        assert a.tobytes() == b.tobytes()
        assert rm.tobytes() == rm0.tobytes() and rv.tobytes() == rv0.tobytes()

    def test_train_updates_running_stats(self):
        x = np.full((2, 1, 2, 2), 3.0)
        rm, rv = np.zeros(1, np.float32), np.ones(1, np.float32)
        self._bn(x, rm=rm, rv=rv)
        assert rm[0] == pytest.approx(0.3)
        assert rv[0] == pytest.approx(0.9)

    def test_single_value_in_train_mode_rejected(self):
        with pytest.raises(ShapeError):
            self._bn(np.ones((1, 1, 1, 1)))


class TestPooling:
    def test_max2x2(self):
        assert F.max_pool2x2(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])).item() == 4.0

    def test_global_avg_constant(self):
        out = F.global_avg_pool(Tensor(np.full((2, 3, 4, 4), 1.5)))
        assert out.shape == (2, 3, 1, 1)
        np.testing.assert_array_equal(out.data, 1.5)

    def test_max2x2_gradient_routes_to_argmax(self):
        x = np.array([[[[0.1, 0.7], [0.3, -0.2]]]])
        (g,) = grad_of(lambda t: F.sum(F.max_pool2x2(t)), x)
        np.testing.assert_array_equal(g, [[[[0.0, 1.0], [0.0, 0.0]]]])
        with float64_mode():
            numeric = numerical_gradient(lambda a: float(F.max_pool2x2(Tensor(a)).data.sum()), [x], 0)
        np.testing.assert_allclose(g, numeric, atol=1e-9)

    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeError, match="even"):
            F.max_pool2x2(Tensor(np.zeros((1, 1, 5, 5))))


class TestDense:
    def test_identity(self):
        x = np.array([[1.0, -2.0, 3.0]])
        out = F.dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_small_case(self):
        out = F.dense(Tensor([[1.0, 2.0]]), Tensor([[1.0], [1.0]]), Tensor([0.0]))
        np.testing.assert_array_equal(out.data, [[3.0]])

    def test_weight_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 3))
        w = rng.normal(size=(3, 2))
        r = rng.normal(size=(2, 2))

        def f(xv, wv):
            return F.sum(F.mul(F.dense(xv, wv), Tensor(r)))

        with float64_mode():
            _, gw = grad_of(f, x, w)
            numeric = numerical_gradient(lambda a, b: float(f(Tensor(a), Tensor(b)).data), [x, w], 1)
        np.testing.assert_allclose(gw, x.T @ r, rtol=1e-12)
        assert relative_error(gw, numeric) < 1e-7

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            F.dense(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 2))))


class TestLosses:
    def test_mse_self_is_zero(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        assert F.mse(x, x).item() == 0.0

    def test_mse_unit(self):
        assert F.mse(Tensor([0.0, 0.0]), Tensor([1.0, 1.0])).item() == 1.0

    def test_cross_entropy_uniform(self):
        loss = F.softmax_cross_entropy(Tensor(np.zeros((4, 10))), np.array([0, 3, 5, 9]))
        assert loss.item() == pytest.approx(math.log(10), abs=1e-6)

    def test_cross_entropy_accepts_one_hot(self):
        logits = Tensor(np.random.default_rng(2).normal(size=(3, 4)))
        idx = np.array([1, 0, 3])
        a = F.softmax_cross_entropy(logits, idx).item()
        b = F.softmax_cross_entropy(logits, np.eye(4)[idx]).item()
        assert a == pytest.approx(b, rel=1e-6)

    def test_cross_entropy_large_logits_stable(self):
        loss = F.softmax_cross_entropy(Tensor([[1000.0, 0.0]]), np.array([0]))
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_empty_batch(self):
        empty = Tensor._wrap(np.zeros((0, 3), np.float32), "empty")
        with pytest.raises(ShapeError, match="empty"):
            F.softmax_cross_entropy(empty, np.zeros(0, dtype=np.int64))


class TestBackward:
    def test_sum_gives_ones(self):
        (g,) = grad_of(F.sum, np.zeros((2, 3, 4)))
        np.testing.assert_array_equal(g, np.ones((2, 3, 4)))

    def test_conv_mse_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 1, 3, 3))
        w = rng.normal(size=(2, 1, 3, 3))
        b = rng.normal(size=2)
        target = rng.normal(size=(1, 2, 3, 3))

        def f(xv, wv, bv):
            return F.mse(F.conv2d(xv, wv, bv), Tensor(target))

        oracle = [numerical_gradient(lambda *a: float(f(*[Tensor(v, dtype=np.float64) for v in a]).data),
                                     [x, w, b], i) for i in range(3)]
        grads32 = grad_of(f, x, w, b)
        assert max(relative_error(g, o, floor=1e-3) for g, o in zip(grads32, oracle)) < 1e-2
        assert gradcheck(f, [x, w, b]) < 1e-5

    def test_disconnected_parameter(self):
        used = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            loss = F.sum(used)
        tape.backward(loss)
        assert unused.grad is None or not unused.grad.any()
        np.testing.assert_array_equal(used.grad, [1.0, 1.0])

    def test_second_backward_is_an_error(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            loss = F.sum(x)
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)

    def test_reset_allows_reuse(self):
        x = Tensor([1.0], requires_grad=True)
        tape = Tape()
        for _ in range(2):
            tape.reset()
            with tape:
                loss = F.sum(x)
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = F.relu(x)
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_no_tape_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        y = F.relu(x)
        assert not y.requires_grad and y.is_leaf

    def test_shared_subexpression_accumulates(self):
        (g,) = grad_of(lambda x: F.sum(F.add(F.mul(x, x), x)), np.array([2.0, -1.0]))
        np.testing.assert_allclose(g, [5.0, -1.0])


class TestOptimizer:
    def test_sgd_weight_decay_only(self):
        w = [np.array([1.0])]
        optimizer_step(w, [np.array([0.0])], OptimizerState("sgd", 0.1, 1e-4))
        assert w[0][0] == pytest.approx(0.99999, abs=1e-12)

    def test_sgd_plain(self):
        w = [np.array([2.5])]
        optimizer_step(w, [np.array([1.0])], OptimizerState("sgd", 0.1, 0.0))
        assert w[0][0] == pytest.approx(2.4, abs=1e-12)

    def test_adam_first_step(self):
        # m_hat = v_hat = 1 after bias correction, so the step is lr / (1 + eps).
        w = [np.array([0.0])]
        state = OptimizerState("adam", 1e-3)
        optimizer_step(w, [np.array([1.0])], state)
        assert w[0][0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)
        assert state.step == 1

    def test_step_counter_increments(self):
        state = OptimizerState("adam", 1e-3)
        w = [np.zeros(2)]
        for expected in range(1, 4):
            optimizer_step(w, [np.ones(2)], state)
            assert state.step == expected

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            optimizer_step([np.zeros(2)], [np.zeros(3)], OptimizerState("sgd", 0.1))

    @pytest.mark.parametrize("make", [lambda p: SGD(p, 0.0, 1e-4), lambda p: Adam(p, 0.0, 1e-4)])
    def test_zero_lr_is_bit_identical(self, make):
        rng = np.random.default_rng(0)
        p = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        before = p.data.tobytes()
        p.grad = rng.normal(size=(3, 3)).astype(np.float32)
        opt = make([p])
        for _ in range(3):
            opt.step()
        assert p.data.tobytes() == before


# Values on a 0.01 grid keep squared differences clear of float underflow.
_grid = st.integers(-1000, 1000).map(lambda i: i / 100)


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
                  elements=st.floats(-50, 50, allow_nan=False)))
    def test_softmax_rows(self, logits):
        p = F.softmax(Tensor(logits)).data
        assert np.all((p >= 0) & (p <= 1))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, 6, elements=_grid), arrays(np.float64, 6, elements=_grid))
    def test_mse_nonnegative_and_zero_iff_equal(self, a, b):
        with float64_mode():
            value = F.mse(Tensor(a), Tensor(b)).item()
        assert value >= 0
        assert (value == 0) == np.array_equal(a, b)

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(11)
            x = rng.normal(size=(2, 3, 6, 6))
            w = rng.normal(size=(4, 3, 3, 3))
            leaves = [Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)]
            with Tape() as tape:
                y = F.relu(F.conv2d(leaves[0], leaves[1], stride=2))
                loss = F.mean(F.mul(y, y))
            tape.backward(loss)
            return loss.data.tobytes(), leaves[0].grad.tobytes(), leaves[1].grad.tobytes()

        assert run() == run()


def test_gradcheck_suite_small():
    from encodenet.autodiff.gradcheck import GRADCHECK_OPS, gradcheck_suite

    worst = gradcheck_suite(cases=3, seed=1)
    assert set(worst) == set(GRADCHECK_OPS)
    assert max(worst.values()) < 1e-5
