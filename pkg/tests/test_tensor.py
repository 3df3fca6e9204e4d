import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scalearn_lab import tensor as T
from scalearn_lab.tensor import NonFiniteError, Tape, Tensor, grad_check, precision


def backward_of(loss_fn, *leaves):
    for leaf in leaves:
        leaf.grad = None
        leaf.requires_grad = True
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [leaf.grad for leaf in leaves]


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False, width=32)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1, 2], [3, 4]])
        np.testing.assert_array_equal((Tensor(np.eye(2)) @ a).data, a.data)

    def test_zero_annihilates(self, rng):
        out = T.zeros((2, 3)) @ Tensor(rng.normal(size=(3, 4)))
        assert out.shape == (2, 4)
        assert not out.data.any()

    def test_against_triple_loop(self):
        a, b = [[1, 2], [3, 4]], [[5, 6], [7, 8]]
        loop = [[sum(a[i][k] * b[k][j] for k in range(2)) for j in range(2)] for i in range(2)]
        assert loop == [[19, 22], [43, 50]]
        np.testing.assert_array_equal((Tensor(a) @ Tensor(b)).data, loop)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            T.zeros((2, 3)) @ T.zeros((2, 3))

    def test_gradients(self, rng):
        a = Tensor(rng.normal(size=(3, 4)))
        b = Tensor(rng.normal(size=(4, 2)))
        ga, gb = backward_of(lambda: (a @ b).sum(), a, b)
        np.testing.assert_allclose(ga, np.ones((3, 2)) @ b.data.T, rtol=1e-6)
        np.testing.assert_allclose(gb, a.data.T @ np.ones((3, 2)), rtol=1e-6)


class TestElementwise:
    def test_relu_values(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_relu_all_negative(self):
        assert not T.relu(Tensor([-3.0, -0.5])).data.any()

    def test_relu_gradient_matches_finite_difference(self):
        x = Tensor([-1.0, 2.0])
        (g,) = backward_of(lambda: T.relu(x).sum(), x)
        np.testing.assert_array_equal(g, [0.0, 1.0])
        assert grad_check(lambda: T.relu(x).sum(), {"x": x}) < 1e-9

    @given(arrays(np.float32, 6, elements=finite), st.floats(-4, 4, width=32))
    def test_hadamard_is_bilinear(self, x, alpha):
        y = np.linspace(-1, 1, 6, dtype=np.float32)
        lhs = T.mul(Tensor(alpha * x), Tensor(y)).data
        rhs = alpha * T.mul(Tensor(x), Tensor(y)).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-6 * max(1.0, float(np.abs(rhs).max())), rtol=1e-6)

    def test_broadcast_gradient_reduces(self, rng):
        x = Tensor(rng.normal(size=(4, 3)))
        b = Tensor(rng.normal(size=(3,)))
        (gb,) = backward_of(lambda: (x + b).sum(), b)
        np.testing.assert_allclose(gb, [4.0, 4.0, 4.0])


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(T.zeros(3)).data, [1 / 3] * 3, rtol=1e-6)

    def test_large_gap_saturates(self):
        out = T.softmax(Tensor([5.0, 5.0 + 200.0])).data
        np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-7)

    def test_direct_evaluation(self):
        e1, e2 = np.exp(1.0), np.exp(2.0)
        expected = [e1 / (e1 + e2), e2 / (e1 + e2)]
        np.testing.assert_allclose(expected, [0.26894142, 0.73105858], rtol=1e-7)
        np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0])).data, expected, rtol=1e-6)

    @given(arrays(np.float32, (3, 5), elements=st.floats(-1e4, 1e4, width=32)), st.sampled_from([0, 1, -1]))
    def test_is_a_distribution(self, x, axis):
        out = T.softmax(Tensor(x), axis=axis).data
        assert (out >= 0).all()
        np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-6)

    def test_log_softmax_consistent(self, rng):
        x = Tensor(rng.normal(size=(2, 4)))
        np.testing.assert_allclose(np.exp(T.log_softmax(x).data), T.softmax(x).data, rtol=1e-5)


class TestBackward:
    @pytest.mark.parametrize("shape", [(3,), (2, 3), (2, 1, 4)])
    def test_sum_gives_ones(self, shape):
        x = T.zeros(shape)
        (g,) = backward_of(lambda: x.sum(), x)
        np.testing.assert_array_equal(g, np.ones(shape))

    def test_square(self):
        x = Tensor([1.0, 2.0])
        (g,) = backward_of(lambda: (x * x).sum(), x)
        np.testing.assert_array_equal(g, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = x * x
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(y)

    def test_detached_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = (x * x).sum()  # computed outside any tape
        with Tape() as tape, pytest.raises(RuntimeError, match="detached"):
            tape.backward(loss)

    def test_tape_replays_once(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            loss = (x * x).sum()
        tape.backward(loss)
        with pytest.raises(RuntimeError):
            tape.backward(loss)

    def test_deterministic(self, rng):
        w = Tensor(rng.normal(size=(5, 3)))
        x = Tensor(rng.normal(size=(4, 5)))

        def loss():
            return T.cross_entropy_loss(x @ w, np.array([0, 1, 2, 0]))

        g1 = backward_of(loss, w)[0].copy()
        g2 = backward_of(loss, w)[0]
        assert g1.tobytes() == g2.tobytes()

    def test_non_finite_loss_raises(self):
        x = Tensor([np.inf], requires_grad=True)
        with Tape() as tape:
            loss = (x * 1.0).sum()
        with pytest.raises(NonFiniteError):
            tape.backward(loss)

    def test_untracked_outside_tape(self):
        x = Tensor([1.0], requires_grad=True)
        assert (x * x)._tape is None


class TestGradCheck:
    def test_quadratic_is_exact(self, rng):
        # central differences are exact on quadratics for any step, so a wide
        # step keeps float64 cancellation out of the comparison
        theta = Tensor(rng.normal(size=(4, 3)))
        assert grad_check(lambda: (theta * theta).sum(), {"theta": theta}, eps=1e-3) < 1e-9

    def test_restores_parameters(self, rng):
        theta = Tensor(rng.normal(size=(3,)))
        before = theta.data.copy()
        grad_check(lambda: (theta * theta).sum(), {"theta": theta})
        assert theta.data.dtype == np.float32
        assert theta.data.tobytes() == before.tobytes()
        assert not theta.requires_grad

    def test_adapter_with_mse_head(self, rng):
        from scalearn_lab.adapter import adapter_forward, init_adapter

        a = init_adapter(8, 1, 2, seed=3)
        for part in a.layers[0].values():
            part.data = rng.normal(0, 0.5, size=part.shape).astype(np.float32)
        head = Tensor(rng.normal(size=(8, 1)))
        x = Tensor(rng.normal(size=(5, 8)))
        target = rng.normal(size=(5, 1))
        named = {**a.named_tensors(), "head": head}
        err = grad_check(lambda: T.mse_loss(adapter_forward(x, a, 0) @ head, target), named)
        assert err < 1e-4

    def test_scaling_combine_with_cross_entropy(self, rng):
        from scalearn_lab.composition import combine_scalearn, init_scaling

        params = init_scaling("scalearn", 6, 1, ["a", "b", "c"], seed=0)
        outs = Tensor(rng.normal(size=(3, 4, 6)))
        head = Tensor(rng.normal(size=(6, 3)))
        labels = np.array([0, 1, 2, 1])
        named = {"omega": params.omega[0], "outs": outs, "head": head}
        err = grad_check(lambda: T.cross_entropy_loss(combine_scalearn(outs, params, 0) @ head, labels), named)
        assert err < 1e-4

    @pytest.mark.filterwarnings("ignore:divide by zero")
    def test_non_finite_loss_names_parameter(self):
        theta = Tensor([1.0])
        with pytest.raises(NonFiniteError, match="theta"):
            grad_check(lambda: T.div(T.ones(1), theta - 1.5).sum(), {"theta": theta}, eps=0.5)

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            grad_check(lambda: T.zeros(1).sum(), {}, eps=0.0)


class TestPrecision:
    def test_context_switches_default(self):
        assert T.get_default_dtype() == np.float32
        with precision(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_thread_local(self):
        import threading

        seen = []
        with precision(np.float64):
            t = threading.Thread(target=lambda: seen.append(T.get_default_dtype()))
            t.start()
            t.join()
        assert seen == [np.float32]


class TestLayers:
    def test_layer_norm_gradcheck(self, rng):
        x = Tensor(rng.normal(size=(3, 5)))
        g = Tensor(rng.normal(1, 0.1, size=5))
        b = Tensor(rng.normal(size=5))
        w = Tensor(rng.normal(size=(5,)))
        err = grad_check(lambda: (T.layer_norm(x, g, b) * w).sum(), {"x": x, "g": g, "b": b})
        assert err < 1e-4

    def test_dropout_eval_is_identity(self, rng):
        x = Tensor(rng.normal(size=(4, 4)))
        assert T.dropout(x, 0.5, None, train=False) is x

    def test_dropout_scales_kept_units(self):
        x = T.ones((2000,))
        out = T.dropout(x, 0.3, np.random.default_rng(0), train=True).data
        kept = out[out > 0]
        np.testing.assert_allclose(kept, 1 / 0.7, rtol=1e-6)
        assert abs(kept.size / 2000 - 0.7) < 0.05

    def test_dropout_needs_rng_in_train(self):
        with pytest.raises(ValueError):
            T.dropout(T.ones(3), 0.1, None, train=True)

    def test_embedding_out_of_range(self):
        with pytest.raises(IndexError, match="7"):
            T.embedding(np.array([1, 7]), T.zeros((5, 2)))

    def test_cross_entropy_uniform_logits(self):
        loss = T.cross_entropy_loss(T.zeros((4, 3)), np.array([0, 1, 2, 0]))
        assert loss.item() == pytest.approx(np.log(3), rel=1e-6)

    def test_stack_concat_gradients(self, rng):
        a = Tensor(rng.normal(size=(2, 3)))
        b = Tensor(rng.normal(size=(2, 3)))
        w = Tensor(rng.normal(size=(2, 2, 3)))
        v = Tensor(rng.normal(size=(4, 3)))
        err = grad_check(lambda: (T.stack([a, b]) * w).sum() + (T.concat([a, b]) * v).sum(), {"a": a, "b": b})
        assert err < 1e-6

    def test_getitem_gradient(self, rng):
        x = Tensor(rng.normal(size=(3, 4)))
        (g,) = backward_of(lambda: x[1:, 0].sum(), x)
        expected = np.zeros((3, 4))
        expected[1:, 0] = 1
        np.testing.assert_array_equal(g, expected)
