"""Autodiff engine tests: analytic cases, finite-difference oracles, tapes."""

import numpy as np
import pytest

import florashot.tensor as T
from florashot.tensor import (
    AutodiffError,
    Tape,
    Tensor,
    grad,
    tensor,
)


def finite_difference(f, arrays, index, h=1e-5):
    """Central-difference gradient of scalar f w.r.t. arrays[index]."""
    base = [a.copy() for a in arrays]
    out = np.zeros_like(base[index])
    it = np.nditer(base[index], flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        plus[index][idx] += h
        minus[index][idx] -= h
        out[idx] = (f(*plus) - f(*minus)) / (2 * h)
        it.iternext()
    return out


def max_rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / (np.maximum(np.abs(a), np.abs(b)) + floor)))


class TestGradBasics:
    def test_square_derivative(self):
        with Tape():
            x = tensor(3.0, requires_grad=True)
            (g,) = grad(x * x, [x])
        assert g.data == pytest.approx(6.0)

    def test_second_derivative_of_cube(self):
        with Tape():
            x = tensor(2.0, requires_grad=True)
            y = x * x * x
            (g,) = grad(y, [x], create_graph=True)
            (g2,) = grad(g, [x])
        assert g2.data == pytest.approx(12.0, abs=1e-12)

    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_power_second_derivative_exact(self, n):
        x0 = 1.7
        with Tape():
            x = tensor(x0, requires_grad=True)
            y = x**n
            (g,) = grad(y, [x], create_graph=True)
            (g2,) = grad(g, [x])
        assert abs(float(g2.data) - n * (n - 1) * x0 ** (n - 2)) < 1e-10

    def test_non_scalar_loss_rejected(self):
        with Tape():
            x = tensor([1.0, 2.0], requires_grad=True)
            y = x * x
            with pytest.raises(ValueError, match="scalar"):
                grad(y, [x])

    def test_wrt_not_on_tape_rejected(self):
        with Tape():
            x = tensor(1.0, requires_grad=True)
            z = tensor(1.0, requires_grad=True)  # never used
            y = x * x
            with pytest.raises(AutodiffError, match="not on the active tape"):
                grad(y, [z])

    def test_grad_requires_active_tape(self):
        x = tensor(1.0, requires_grad=True)
        with pytest.raises(AutodiffError, match="active Tape"):
            grad(x, [x])

    def test_wrt_without_requires_grad_rejected(self):
        with Tape():
            x = tensor(1.0, requires_grad=True)
            c = tensor(2.0)
            y = x * c
            with pytest.raises(ValueError, match="requires_grad"):
                grad(y, [c])

    def test_disconnected_but_watched_gets_zero(self):
        with Tape():
            x = tensor(1.0, requires_grad=True)
            z = tensor(1.0, requires_grad=True)
            _ = z * z  # z participates on the tape
            y = x * x
            (gz,) = grad(y, [z])
        assert gz.data == 0.0

    def test_shared_input_accumulates(self):
        with Tape():
            x = tensor(3.0, requires_grad=True)
            y = x * x + x * x
            (g,) = grad(y, [x])
        assert g.data == pytest.approx(12.0)


class TestMatmul:
    def test_identity(self):
        b = np.arange(12.0).reshape(3, 4)
        out = T.matmul(tensor(np.eye(3)), tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_hand_product(self):
        out = T.matmul(tensor([[1.0, 2.0], [3.0, 4.0]]), tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="inner dimensions"):
            T.matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(11)
        A = rng.normal(size=(5, 4))
        B = rng.normal(size=(4, 2))

        def f(a, b):
            return float(((a @ b) ** 2).sum())

        with Tape():
            a, b = tensor(A, requires_grad=True), tensor(B, requires_grad=True)
            prod = T.matmul(a, b)
            ga, gb = grad(T.reduce_sum(prod * prod), [a, b])
        assert max_rel_err(ga.data, finite_difference(f, [A, B], 0)) < 1e-4
        assert max_rel_err(gb.data, finite_difference(f, [A, B], 1)) < 1e-4


class TestConv2d:
    def test_one_by_one_kernel_scales(self):
        x = np.arange(9.0).reshape(1, 3, 3)
        k = np.full((1, 1, 1, 1), 2.0)
        out = T.conv2d(tensor(x), tensor(k))
        np.testing.assert_array_equal(out.data, 2.0 * x)

    def test_all_ones_full_kernel(self):
        out = T.conv2d(tensor(np.ones((1, 3, 3))), tensor(np.ones((1, 1, 3, 3))))
        assert out.data.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == pytest.approx(9.0)

    def test_output_geometry(self):
        out = T.conv2d(tensor(np.ones((2, 7, 7))), tensor(np.ones((4, 2, 3, 3))), stride=2, padding=1)
        assert out.data.shape == (4, 4, 4)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel"):
            T.conv2d(tensor(np.ones((3, 5, 5))), tensor(np.ones((1, 2, 3, 3))))

    def test_kernel_too_large(self):
        with pytest.raises(ValueError, match="larger than"):
            T.conv2d(tensor(np.ones((1, 3, 3))), tensor(np.ones((1, 1, 5, 5))))

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(2, 5, 5))
        K = rng.normal(size=(3, 2, 3, 3))

        def f(x, k):
            out = T.conv2d(tensor(x), tensor(k), stride=1, padding=1)
            return float((out.data**2).sum())

        with Tape():
            x, k = tensor(X, requires_grad=True), tensor(K, requires_grad=True)
            out = T.conv2d(x, k, stride=1, padding=1)
            gx, gk = grad(T.reduce_sum(out * out), [x, k])
        assert max_rel_err(gx.data, finite_difference(f, [X, K], 0)) < 1e-4
        assert max_rel_err(gk.data, finite_difference(f, [X, K], 1)) < 1e-4


class TestPoolingAndLosses:
    def test_global_avg_pool_constant_plane(self):
        x = np.full((4, 3, 5), 2.5)
        np.testing.assert_allclose(T.global_avg_pool2d(tensor(x)).data, 2.5)

    def test_global_avg_pool_hand_value(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        assert T.global_avg_pool2d(tensor(x)).data[0] == pytest.approx(2.5)

    def test_global_avg_pool_gradient_uniform(self):
        with Tape():
            x = tensor(np.random.default_rng(0).normal(size=(2, 4, 4)), requires_grad=True)
            (g,) = grad(T.reduce_sum(T.global_avg_pool2d(x)), [x])
        np.testing.assert_allclose(g.data, 1.0 / 16.0)

    def test_relu_values(self):
        out = T.relu(tensor([-1.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 2.0])

    def test_softmax_uniform_logits(self):
        out = T.softmax(tensor(np.zeros((1, 5))))
        np.testing.assert_allclose(out.data, 0.2)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        out = T.softmax(tensor(rng.normal(scale=50.0, size=(10, 7))))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-9)

    def test_cross_entropy_of_certain_correct_prediction_is_zero(self):
        logits = np.array([[1000.0, 0.0, 0.0]])
        loss = T.softmax_cross_entropy(tensor(logits), np.array([0]))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_cross_entropy_gradient_is_probs_minus_onehot(self):
        rng = np.random.default_rng(8)
        Z = rng.normal(size=(6, 4))
        labels = np.array([0, 1, 2, 3, 1, 0])
        with Tape():
            z = tensor(Z, requires_grad=True)
            (g,) = grad(T.softmax_cross_entropy(z, labels), [z])
        expected = T.softmax(tensor(Z)).data - T.one_hot(labels, 4)
        np.testing.assert_allclose(g.data, expected / 6, atol=1e-12)

    def test_cross_entropy_label_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            T.softmax_cross_entropy(tensor(np.zeros((1, 3))), np.array([3]))

    def test_mse_loss(self):
        loss = T.mse_loss(tensor([1.0, 2.0]), tensor([0.0, 0.0]))
        assert loss.item() == pytest.approx(2.5)


class TestRandomCompositions:
    """Seeded random op compositions, each checked against finite differences."""

    def _composite(self, x, k, w):
        h = T.relu(T.conv2d(x, k, stride=2, padding=1))
        feat = T.global_avg_pool2d(h)
        logits = T.matmul(feat, w)
        labels = np.arange(feat.data.shape[0]) % logits.data.shape[1]
        ce = T.softmax_cross_entropy(logits, labels)
        ms = T.mse_loss(feat, T.zeros_like(feat))
        return ce + ms

    @pytest.mark.parametrize("seed", range(10))
    def test_composite_gradients(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(3, 2, 6, 6))
        K = rng.normal(size=(4, 2, 3, 3)) * 0.5
        W = rng.normal(size=(4, 3)) * 0.5

        def f(xv, kv, wv):
            return self._composite(tensor(xv), tensor(kv), tensor(wv)).item()

        with Tape():
            x = tensor(X, requires_grad=True)
            k = tensor(K, requires_grad=True)
            w = tensor(W, requires_grad=True)
            gx, gk, gw = grad(self._composite(x, k, w), [x, k, w])
        assert max_rel_err(gk.data, finite_difference(f, [X, K, W], 1)) < 1e-4
        assert max_rel_err(gw.data, finite_difference(f, [X, K, W], 2)) < 1e-4


class TestTapeSemantics:
    def test_replay_is_deterministic(self):
        rng = np.random.default_rng(21)
        A = rng.normal(size=(6, 6))

        def run():
            with Tape():
                a = tensor(A, requires_grad=True)
                loss = T.reduce_sum(T.relu(T.matmul(a, a)) * a)
                (g,) = grad(loss, [a])
            return g.data

        first, second = run(), run()
        assert first.tobytes() == second.tobytes()

    def test_no_recording_without_tape(self):
        a = tensor(np.ones((2, 2)), requires_grad=True)
        out = T.matmul(a, a)
        assert out.node is None and not out.requires_grad

    def test_no_grad_blocks_recording(self):
        with Tape() as tape:
            a = tensor(np.ones((2, 2)), requires_grad=True)
            with T.no_grad():
                _ = T.matmul(a, a)
            assert len(tape) == 0

    def test_nested_tapes_record_innermost(self):
        with Tape() as outer:
            a = tensor(2.0, requires_grad=True)
            with Tape() as inner:
                _ = a * a
            assert len(inner) == 1 and len(outer) == 0

    def test_gradients_flow_across_broadcast(self):
        with Tape():
            b = tensor(np.ones(3), requires_grad=True)
            x = tensor(np.ones((4, 3)))
            (g,) = grad(T.reduce_sum(x + b), [b])
        np.testing.assert_allclose(g.data, 4.0)
