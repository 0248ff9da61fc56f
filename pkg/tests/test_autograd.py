import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from asr_engine.nn import Tape, Tensor
from asr_engine.nn import autograd as ag
from asr_engine.nn.gradcheck import numeric_grad, relative_error


def check_unary(op, x, eps=1e-5, tol=1e-6):
    t = Tensor(x.copy(), requires_grad=True)
    weights = np.random.default_rng(0).standard_normal(op(Tensor(x)).shape)
    with Tape() as tape:
        loss = ag.tsum(op(t) * weights)
        tape.backward(loss)
    num = numeric_grad(lambda: float(ag.tsum(op(Tensor(x)) * weights).data), x, eps)
    assert relative_error(t.grad, num) < tol


def test_half_squared_norm_gradient_by_hand():
    w = Tensor(np.array([[3.0]]), requires_grad=True)
    x = np.array([[2.0]])
    with Tape() as tape:
        y = x @ w
        loss = ag.tsum(y * y) * 0.5
        tape.backward(loss)
    # d/dW 0.5 (Wx)^2 = W x^2
    assert w.grad[0, 0] == pytest.approx(3.0 * 4.0)


def test_backward_without_forward_raises():
    with Tape() as tape:
        with pytest.raises(RuntimeError):
            tape.backward(Tensor(np.array(1.0)))


def test_no_recording_outside_tape():
    a = Tensor(np.ones(3), requires_grad=True)
    b = a * 2.0
    assert b.requires_grad is False or b.grad is None


def test_unreachable_parameter_gets_no_gradient():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        loss = ag.tsum(a * 3.0)
        b * 2.0
        tape.backward(loss)
    assert np.allclose(a.grad, 3.0)
    assert b.grad is None or np.all(b.grad == 0)


def test_gradient_accumulates_over_fan_out():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = ag.tsum(a * a) + ag.tsum(a * 3.0)
        tape.backward(loss)
    assert np.allclose(a.grad, 2 * a.data + 3.0)


finite = arrays(np.float64, (3, 4), elements=st.floats(-2, 2))


@pytest.mark.parametrize("op", [ag.exp, ag.tanh, ag.sigmoid, ag.sin, ag.neg,
                                lambda t: ag.log_softmax(t, axis=-1),
                                lambda t: ag.transpose(t, (1, 0)),
                                lambda t: ag.reshape(t, (4, 3)),
                                lambda t: t[1:, ::2],
                                lambda t: ag.mean(t, axis=0),
                                lambda t: ag.concat([t, t * 2.0], axis=0),
                                lambda t: ag.stack(ag.unstack(t, axis=1), axis=0)])
@settings(max_examples=15, deadline=None)
@given(x=finite)
def test_smooth_primitive_gradients(op, x):
    check_unary(op, x)


@settings(max_examples=15, deadline=None)
@given(x=arrays(np.float64, (3, 4), elements=st.floats(0.5, 3)))
def test_log_sqrt_div_gradients(x):
    check_unary(ag.log, x)
    check_unary(ag.sqrt, x)
    check_unary(lambda t: 1.0 / t, x)


@settings(max_examples=15, deadline=None)
@given(x=arrays(np.float64, (3, 4), elements=st.floats(0.05, 2) | st.floats(-2, -0.05)))
def test_piecewise_gradients_away_from_kinks(x):
    check_unary(ag.relu, x)
    check_unary(ag.leaky_relu, x)
    check_unary(ag.tabs, x)


def test_matmul_and_broadcast_add_gradients():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((2, 3, 4))
    w = rng.standard_normal((4, 5))
    b = rng.standard_normal(5)
    check = rng.standard_normal((2, 3, 5))
    ta, tw, tb = (Tensor(v.copy(), requires_grad=True) for v in (a, w, b))
    with Tape() as tape:
        tape.backward(ag.tsum((ta @ tw + tb) * check))
    f = lambda: float(ag.tsum((Tensor(a) @ Tensor(w) + Tensor(b)) * check).data)
    for t, arr in ((ta, a), (tw, w), (tb, b)):
        assert relative_error(t.grad, numeric_grad(f, arr, 1e-5)) < 1e-7


def test_pick_gathers_last_axis_and_routes_gradient():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        picked = ag.pick(x, np.array([2, 0]))
        tape.backward(ag.tsum(picked))
    assert np.array_equal(picked.data, [2.0, 3.0])
    assert np.array_equal(x.grad, [[0, 0, 1], [1, 0, 0]])


def test_fancy_index_gradient_accumulates_repeats():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        tape.backward(ag.tsum(x[np.array([0, 0, 2])]))
    assert np.array_equal(x.grad, [2.0, 0.0, 1.0])


def test_permute_time_gradient_is_inverse_permutation():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 2, 3))
    perm = np.array([[3, 1], [2, 0], [1, 2], [0, 3]])
    check = rng.standard_normal(x.shape)
    t = Tensor(x.copy(), requires_grad=True)
    with Tape() as tape:
        tape.backward(ag.tsum(ag.permute_time(t, perm) * check))
    num = numeric_grad(lambda: float(ag.tsum(ag.permute_time(Tensor(x), perm) * check).data), x, 1e-5)
    assert relative_error(t.grad, num) < 1e-8


def test_conv1d_matches_direct_sum():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 7))
    w = rng.standard_normal((4, 3, 3))
    out = ag.conv1d(Tensor(x), Tensor(w)).data
    ref = np.zeros((2, 4, 5))
    for n in range(2):
        for f in range(4):
            for t in range(5):
                ref[n, f, t] = (x[n, :, t:t + 3] * w[f]).sum()
    assert np.allclose(out, ref)


def test_conv1d_and_maxpool_gradients():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 2, 8))
    w = rng.standard_normal((3, 2, 3))
    check = rng.standard_normal((2, 3, 3))
    f = lambda: float(ag.tsum(ag.maxpool1d(ag.conv1d(Tensor(x), Tensor(w)), 2) * check).data)
    tx, tw = Tensor(x.copy(), requires_grad=True), Tensor(w.copy(), requires_grad=True)
    with Tape() as tape:
        tape.backward(ag.tsum(ag.maxpool1d(ag.conv1d(tx, tw), 2) * check))
    assert relative_error(tx.grad, numeric_grad(f, x, 1e-6)) < 1e-6
    assert relative_error(tw.grad, numeric_grad(f, w, 1e-6)) < 1e-6


@settings(max_examples=25, deadline=None)
@given(x=arrays(np.float64, (5, 7), elements=st.floats(-50, 50)))
def test_log_softmax_rows_normalize(x):
    out = ag.log_softmax(Tensor(x), axis=-1).data
    lse = np.log(np.exp(out).sum(axis=-1))
    assert np.all(np.abs(lse) < 1e-5)


def test_unstack_gradient_when_some_slices_unused():
    x = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        parts = ag.unstack(x)
        tape.backward(ag.tsum(parts[2] * 5.0))
    assert np.array_equal(x.grad, [[0, 0], [0, 0], [5, 5]])
