import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factorvid import numerics as nx
from conftest import t64


def grad_of(fn, *params):
    return nx.analytic_grads(fn, params)


def fd_check(fn, params):
    return nx.check_gradients(fn, params)


# ---------------------------------------------------------------- linear

def test_linear_identity():
    out = nx.linear(nx.Tensor([[1.0, 2.0]]), nx.Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2]])


def test_linear_basis_rows_select_weight_rows():
    out = nx.linear(nx.Tensor(np.eye(2)), nx.Tensor([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_linear_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        nx.linear(nx.Tensor(np.ones((2, 3))), nx.Tensor(np.ones((2, 2))))


def test_linear_gradient_fd(rng, f64):
    u, w = t64(rng.standard_normal((2, 3))), t64(rng.standard_normal((3, 4)))
    assert fd_check(lambda: nx.reduce(nx.linear(u, w), "sum"), [u, w]) < 1e-5


# ---------------------------------------------------------------- activations

def test_mish_values():
    assert nx.mish(nx.Tensor([0.0])).data[0] == 0.0
    ref = float(mpmath.mpf(1) * mpmath.tanh(mpmath.log(1 + mpmath.e)))
    with nx.precision(np.float64):
        assert nx.mish(nx.Tensor([1.0])).data[0] == pytest.approx(ref, abs=1e-12)
        assert abs(nx.mish(nx.Tensor([-30.0])).data[0]) < 1e-9
    assert ref == pytest.approx(0.86509, abs=1e-5)


def test_mish_large_inputs_are_finite(f64):
    x = nx.Tensor([-1e3, -50.0, 25.0, 700.0, 1e4])
    y = nx.mish(x).data
    assert np.isfinite(y).all()
    np.testing.assert_allclose(y[2:], [25.0, 700.0, 1e4])


def test_sigmoid_symmetry(rng, f64):
    assert nx.sigmoid(nx.Tensor([0.0])).data[0] == 0.5
    x = rng.standard_normal(100) * 10
    s = nx.sigmoid(nx.Tensor(x)).data + nx.sigmoid(nx.Tensor(-x)).data
    np.testing.assert_allclose(s, 1.0, atol=1e-12)


def test_sigmoid_gradient_fd(rng, f64):
    x = t64(rng.standard_normal(7) * 3)
    g, = grad_of(lambda: nx.reduce(nx.sigmoid(x), "sum"), x)
    s = 1 / (1 + np.exp(-x.data))
    np.testing.assert_allclose(g, s * (1 - s), rtol=1e-12)
    assert fd_check(lambda: nx.reduce(nx.sigmoid(x), "sum"), [x]) < 1e-5


def test_sigmoid_extreme_inputs_finite():
    y = nx.sigmoid(nx.Tensor([-1e4, 1e4])).data
    assert np.isfinite(y).all()


# ---------------------------------------------------------------- hadamard

def test_hadamard_identities(rng):
    a = nx.Tensor(rng.standard_normal((2, 3)))
    np.testing.assert_array_equal(nx.hadamard(a, nx.Tensor(np.ones((2, 3)))).data, a.data)
    np.testing.assert_array_equal(nx.hadamard(a, nx.Tensor(np.zeros((2, 3)))).data, 0)


def test_hadamard_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        nx.hadamard(nx.Tensor(np.ones(3)), nx.Tensor(np.ones(4)))


def test_hadamard_gradient_fd(rng, f64):
    a, b = t64(rng.standard_normal((2, 3, 4))), t64(rng.standard_normal((2, 3, 4)))
    w = rng.standard_normal((2, 3, 4))
    fn = lambda: nx.reduce(nx.hadamard(nx.hadamard(a, b), nx.Tensor(w)), "sum")
    assert fd_check(fn, [a, b]) < 1e-5


# ---------------------------------------------------------------- layer norm

def test_layer_norm_constant_row_is_zero():
    out = nx.layer_norm(nx.Tensor(np.full((1, 4), 3.0)), nx.Tensor(np.ones(4)), nx.Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, 0)


def test_layer_norm_unit_row(f64):
    out = nx.layer_norm(nx.Tensor([[1.0, -1.0]]), nx.Tensor(np.ones(2)), nx.Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [[1, -1]], atol=1e-9)


def test_layer_norm_gradient_fd(rng, f64):
    u, g, o = t64(rng.standard_normal((3, 5))), t64(rng.standard_normal(5)), t64(rng.standard_normal(5))
    w = rng.standard_normal((3, 5))
    fn = lambda: nx.reduce(nx.hadamard(nx.layer_norm(u, g, o), nx.Tensor(w)), "sum")
    assert fd_check(fn, [u, g, o]) < 1e-4


# ---------------------------------------------------------------- layout ops

def test_time_shift_definition():
    e = nx.Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1))
    np.testing.assert_array_equal(nx.time_shift(e).data.ravel(), [0, 1, 2])
    np.testing.assert_array_equal(nx.time_shift(nx.time_shift(e)).data.ravel(), [0, 0, 1])
    np.testing.assert_array_equal(nx.time_shift(nx.Tensor(np.ones((2, 1, 3)))).data, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2 ** 31))
def test_time_shift_T_times_is_zero(B, T, F, seed):
    x = nx.Tensor(np.random.default_rng(seed).standard_normal((B, T, F)))
    for _ in range(T):
        x = nx.time_shift(x)
    assert not x.data.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_transpose_involution(B, T, F, seed):
    e = nx.Tensor(np.random.default_rng(seed).standard_normal((B, T, F)).astype(np.float32))
    tt = nx.transpose_axes(e)
    assert tt.shape == (B, F, T)
    assert np.array_equal(nx.transpose_axes(tt).data, e.data)
    b, t, f = B - 1, T - 1, F // 2
    assert tt.data[b, f, t] == e.data[b, t, f]


def test_transpose_shape():
    assert nx.transpose_axes(nx.Tensor(np.zeros((2, 10, 64)))).shape == (2, 64, 10)


# ---------------------------------------------------------------- conv2d

def test_conv2d_delta_kernel_is_identity(rng):
    x = nx.Tensor(rng.standard_normal((2, 3, 6, 5)))
    k = np.zeros((3, 3, 3, 3))
    for c in range(3):
        k[c, c, 1, 1] = 1.0
    np.testing.assert_array_equal(nx.conv2d(x, nx.Tensor(k)).data, x.data)


def test_conv2d_ones_receptive_fields():
    out = nx.conv2d(nx.Tensor(np.ones((1, 1, 4, 4))), nx.Tensor(np.ones((1, 1, 3, 3)))).data[0, 0]
    # hand count of in-bounds taps: corners 4, edges 6, interior 9
    expected = np.array([[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]])
    np.testing.assert_array_equal(out, expected)


@pytest.mark.parametrize("h,stride,expected", [(5, 1, 5), (5, 2, 3), (64, 2, 32), (3, 2, 2)])
def test_conv2d_output_size(h, stride, expected):
    out = nx.conv2d(nx.Tensor(np.zeros((1, 1, h, h))), nx.Tensor(np.zeros((1, 1, 3, 3))), stride=stride)
    assert out.shape[2:] == (expected, expected)


def test_conv2d_channel_mismatch():
    with pytest.raises(nx.ShapeError):
        nx.conv2d(nx.Tensor(np.zeros((1, 2, 5, 5))), nx.Tensor(np.zeros((1, 3, 3, 3))))


def test_conv2d_matches_loop_reference(rng, f64):
    x = rng.standard_normal((1, 2, 5, 4))
    k = rng.standard_normal((3, 2, 3, 3))
    for stride in (1, 2):
        out = nx.conv2d(nx.Tensor(x), nx.Tensor(k), stride=stride).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for o in range(3):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref = sum(xp[0, c, i * stride + a, j * stride + b] * k[o, c, a, b]
                              for c in range(2) for a in range(3) for b in range(3))
                    assert out[0, o, i, j] == pytest.approx(ref, abs=1e-12)


def test_conv2d_gradient_fd(rng, f64):
    x, k = t64(rng.standard_normal((1, 2, 5, 5))), t64(rng.standard_normal((3, 2, 3, 3)))
    w = rng.standard_normal((1, 3, 5, 5))
    fn = lambda: nx.reduce(nx.hadamard(nx.conv2d(x, k), nx.Tensor(w)), "sum")
    assert fd_check(fn, [x, k]) < 1e-4


# ---------------------------------------------------------------- upsample

def test_upsample_blocks():
    out = nx.nearest_upsample2x(nx.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data[0, 0]
    np.testing.assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


def test_upsample_then_average_pool_recovers_input(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    up = nx.nearest_upsample2x(nx.Tensor(x)).data
    pooled = up.reshape(2, 3, 4, 2, 5, 2).mean(axis=(3, 5))
    np.testing.assert_array_equal(pooled, x)


def test_upsample_gradient_fd(rng, f64):
    x = t64(rng.standard_normal((1, 2, 3, 3)))
    w = rng.standard_normal((1, 2, 6, 6))
    fn = lambda: nx.reduce(nx.hadamard(nx.nearest_upsample2x(x), nx.Tensor(w)), "sum")
    assert fd_check(fn, [x]) < 1e-6


# ---------------------------------------------------------------- reductions

def test_reduce_values():
    assert nx.reduce(nx.Tensor(np.zeros(5)), "abs_mean").item() == 0
    assert nx.reduce(nx.Tensor([1.0, 2.0, 3.0, 4.0]), "mean").item() == 2.5
    with pytest.raises(nx.ShapeError):
        nx.reduce(nx.Tensor(np.zeros(0)), "sum")


def test_abs_mean_gradient():
    x = nx.Tensor([1.0, -2.0])
    g, = grad_of(lambda: nx.reduce(x, "abs_mean"), x)
    np.testing.assert_array_equal(g, [0.5, -0.5])


# ---------------------------------------------------------------- backward machinery

def test_backward_linear_chain_adjoint(rng, f64):
    W = rng.standard_normal((3, 4))
    x = t64(rng.standard_normal((1, 3)))
    g, = grad_of(lambda: nx.reduce(nx.linear(x, nx.Tensor(W)), "sum"), x)
    np.testing.assert_allclose(g[0], W @ np.ones(4))


def test_backward_accumulates_reuse():
    y = nx.Tensor([3.0])
    g, = grad_of(lambda: nx.add(y, y), y)
    assert g[0] == 2.0


def test_gradient_accumulation_is_additive(rng, f64):
    x = t64(rng.standard_normal(6))
    l1 = lambda: nx.reduce(nx.mish(x), "sum")
    l2 = lambda: nx.reduce(nx.hadamard(x, x), "mean")
    g1, = grad_of(l1, x)
    g2, = grad_of(l2, x)
    g12, = grad_of(lambda: nx.add(l1(), l2()), x)
    np.testing.assert_allclose(g12, g1 + g2, rtol=1e-12)


def test_backward_errors():
    x = nx.Tensor([1.0, 2.0], requires_grad=True)
    with nx.GradTape() as tape:
        y = nx.mish(x)
    with pytest.raises(nx.GradError, match="scalar"):
        nx.backward(y, tape)
    with nx.GradTape() as tape:
        loss = nx.reduce(nx.mish(x), "sum")
    nx.backward(loss, tape)
    with pytest.raises(nx.GradError):
        nx.backward(loss, tape)
    detached = nx.reduce(nx.Tensor([1.0]), "sum")
    with nx.GradTape() as tape:
        nx.reduce(nx.mish(x), "sum")
    with pytest.raises(nx.GradError, match="detached"):
        nx.backward(detached, tape)


def test_backward_visits_each_node_once_in_reverse(monkeypatch):
    x = nx.Tensor([0.3, -0.2], requires_grad=True)
    with nx.GradTape() as tape:
        a = nx.mish(x)
        b = nx.sigmoid(a)
        loss = nx.reduce(nx.add(a, b), "sum")
    order = []
    for node in tape.nodes:
        orig = node.backward
        node.backward = (lambda o, n: (lambda g: (order.append(n), o(g))[1]))(orig, node.op)
    nx.backward(loss, tape)
    assert order == [n.op for n in reversed(tape.nodes)]


def test_no_recording_without_tape():
    x = nx.Tensor([1.0], requires_grad=True)
    y = nx.mish(x)
    assert not y.requires_grad


def test_forward_non_finite_is_error():
    with pytest.raises(nx.NonFiniteError):
        nx.linear(nx.Tensor([[np.inf]]), nx.Tensor([[1.0]]))


def test_forward_deterministic(rng):
    x = nx.Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
    k = nx.Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
    a = nx.mish(nx.conv2d(x, k, stride=2)).data
    b = nx.mish(nx.conv2d(x, k, stride=2)).data
    assert a.tobytes() == b.tobytes()


def test_precision_modes():
    assert nx.Tensor([1.0]).dtype == np.float32
    with nx.precision(np.float64):
        assert nx.Tensor([1.0]).dtype == np.float64
