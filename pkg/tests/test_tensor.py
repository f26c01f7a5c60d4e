import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pixelgen import tensor as T
from pixelgen.diagnostics import OP_PROBES, op_gradient_error
from pixelgen.errors import ContractError, DimensionError, StateError
from pixelgen.tensor import Tape, Tensor, precision


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


def grad_of(fn, *arrays):
    """Tape gradients of scalar ``fn(*tensors)`` w.r.t. each array."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        tape.backward(fn(*ts))
    return [t.grad for t in ts]


class TestBackwardBasics:
    def test_sum_of_squares(self, f64):
        (g,) = grad_of(lambda x: T.sum(T.square(x)), np.array([1.0, -2.0, 3.0]))
        np.testing.assert_array_equal(g, [2.0, -4.0, 6.0])

    def test_mean(self, f64):
        (g,) = grad_of(T.mean, np.arange(4.0))
        np.testing.assert_array_equal(g, [0.25] * 4)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, 2.0)
            with pytest.raises(ContractError):
                tape.backward(y)

    def test_empty_tape_rejected(self):
        with Tape() as tape:
            with pytest.raises(ContractError):
                tape.backward(Tensor(1.0))

    def test_double_backward_needs_reset(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = T.sum(T.square(x))
            tape.backward(loss)
            with pytest.raises(StateError):
                tape.backward(loss)
            tape.reset()
            x.grad = None
            tape.backward(T.sum(T.square(x)))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])

    def test_reverse_visit_order(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            y = T.exp(x)
            z = T.mul(y, 3.0)
            loss = T.sum(z)
            seen = []
            tape.backward(loss, visit=seen.append)
        assert seen == ["sum", "mul", "exp"]

    def test_frozen_tensor_never_gets_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        w = Tensor(np.full(3, 2.0))
        with Tape() as tape:
            tape.backward(T.sum(T.mul(x, w)))
        assert w.grad is None
        np.testing.assert_array_equal(x.grad, w.data)

    def test_grad_shape_matches_data(self, f64):
        a, b = grad_of(lambda a, b: T.sum(T.matmul(a, b)), np.ones((2, 3)), np.ones((3, 4)))
        assert a.shape == (2, 3) and b.shape == (3, 4)

    def test_no_tape_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            with T.no_tape():
                y = T.mul(x, 2.0)
            assert len(tape) == 0
        assert not y.requires_grad

    def test_leaf_grads_accumulate_across_uses(self, f64):
        (g,) = grad_of(lambda x: T.sum(T.add(T.mul(x, 2.0), T.mul(x, 3.0))), np.ones(3))
        np.testing.assert_array_equal(g, [5.0, 5.0, 5.0])


class TestForwardValues:
    def test_matmul_identity(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)

    def test_matmul_hand_product(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])

    def test_matmul_zero(self):
        out = T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.random.default_rng(0).standard_normal((3, 4))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_matmul_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_conv_identity_kernel(self):
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(k)).data, x)

    def test_conv_window_counts(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3)))).data[0, 0]
        assert out[1, 1] == 9 and out[2, 2] == 9
        assert out[0, 0] == 4 and out[3, 3] == 4 and out[0, 3] == 4
        assert out[0, 1] == 6

    def test_conv_stride_shape(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 8, 8))), Tensor(np.ones((1, 1, 3, 3))), stride=2)
        assert out.shape == (1, 1, 4, 4)

    def test_conv_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_elementwise_points(self):
        assert T.sigmoid(Tensor(0.0)).item() == 0.5
        assert T.silu(Tensor(0.0)).item() == 0.0
        assert T.clamp_min(Tensor(0.01), 0.05).item() == pytest.approx(0.05)

    def test_reductions(self):
        np.testing.assert_allclose(T.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3)
        assert T.mean(Tensor([1.0, 2.0, 3.0])).item() == pytest.approx(2.0)
        assert T.sum(Tensor(np.zeros(5))).item() == 0.0

    def test_axis_out_of_range(self):
        with pytest.raises(DimensionError):
            T.sum(Tensor(np.ones((2, 2))), axis=2)
        with pytest.raises(DimensionError):
            T.softmax(Tensor(np.ones((2, 2))), axis=3)

    def test_non_broadcastable(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                  elements=st.floats(-30, 30)))
    @settings(max_examples=50, deadline=None)
    def test_softmax_rows_sum_to_one(self, x):
        with precision(np.float64):
            s = T.softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-6)


class TestPrecision:
    def test_default_is_32_bit(self):
        assert Tensor([1.0]).data.dtype == np.float32

    def test_context_switches_and_restores(self):
        with precision(np.float64):
            assert Tensor([1.0]).data.dtype == np.float64
        assert Tensor([1.0]).data.dtype == np.float32

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
        out1 = T.gelu_tanh(T.matmul(Tensor(a), Tensor(b))).data
        out2 = T.gelu_tanh(T.matmul(Tensor(a), Tensor(b))).data
        assert out1.tobytes() == out2.tobytes()


class TestFiniteDifferences:
    @pytest.mark.parametrize("name", sorted(OP_PROBES))
    def test_every_op(self, name):
        assert op_gradient_error(name) < 1e-5

    def test_every_registered_op_has_a_probe(self):
        assert set(T.BACKWARD_RULES) <= set(OP_PROBES)

    def test_exact_quadratic(self):
        assert T.finite_diff_check(lambda x: T.sum(T.square(x)), Tensor([1.0])) < 1e-9

    def test_constant_function(self):
        assert T.finite_diff_check(lambda x: T.sum(T.mul(x, 0.0)), Tensor([1.0, 2.0])) < 1e-6

    def test_two_layer_net(self, f64):
        rng = np.random.default_rng(0)
        w1, w2 = Tensor(rng.standard_normal((4, 6))), Tensor(rng.standard_normal((6, 1)))

        def f(x):
            return T.sum(T.matmul(T.gelu_tanh(T.matmul(x, w1)), w2))

        assert T.finite_diff_check(f, Tensor(rng.standard_normal((3, 4)))) < 1e-5

    def test_detects_corrupted_rule(self, monkeypatch):
        good = T.BACKWARD_RULES["exp"]
        monkeypatch.setitem(T.BACKWARD_RULES, "exp", lambda ctx, g: tuple(1.01 * x for x in good(ctx, g)))
        assert op_gradient_error("exp") > 1e-3


shapes = st.sampled_from([((3, 4), (4,)), ((3, 4), (3, 1)), ((2, 3, 4), (1, 3, 1)), ((5,), ())])


@given(shapes, st.integers(0, 2**16))
@settings(max_examples=30, deadline=None)
def test_broadcast_grad_matches_explicit_tiling(pair, seed):
    big, small = pair
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(big), rng.standard_normal(small)
    w = rng.standard_normal(big)
    with precision(np.float64):
        _, gb = grad_of(lambda x, y: T.sum(T.mul(T.mul(x, y), Tensor(w))), a, b)
        tiled = np.broadcast_to(b, big).copy()
        _, g_tiled = grad_of(lambda x, y: T.sum(T.mul(T.mul(x, y), Tensor(w))), a, tiled)
    expected = g_tiled.sum(axis=tuple(range(len(big) - len(small)))) if len(small) < len(big) else g_tiled
    if len(small):
        expected = expected.sum(axis=tuple(i for i, s in enumerate(small) if s == 1), keepdims=True)
    np.testing.assert_allclose(gb, np.reshape(expected, small), rtol=1e-12, atol=1e-12)
