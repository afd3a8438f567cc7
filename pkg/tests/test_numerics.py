import math

import numpy as np
import pytest

from grid_grpo import numerics as nx
from grid_grpo.numerics import NumericalError, Rng, Tape, Tensor, backward, finite_diff_check, softmax


def _make_net(seed: int = 0):
    rng = Rng(seed)
    w1 = rng.normal((4, 5))
    w2 = rng.normal((5, 3))
    x = rng.normal((2, 4))
    return x, w1, w2


def test_softmax_equal_logits_is_uniform():
    out = softmax(np.zeros(4))
    assert np.allclose(out.data, 0.25, atol=1e-15)


@pytest.mark.parametrize("temperature", [0.3, 1.0, 7.0])
def test_softmax_shift_invariance(temperature):
    out = softmax(np.full(4, 123.0), temperature=temperature)
    assert np.allclose(out.data, 0.25, atol=1e-15)


def test_softmax_closed_form():
    out = softmax(np.log([1.0, 3.0]))
    assert out.data == pytest.approx([0.25, 0.75], abs=1e-15)


def test_softmax_is_a_distribution_for_large_logits():
    logits = Rng(3).normal((50, 16)) * 200.0
    out = softmax(logits, axis=-1)
    assert np.all(out.data >= 0)
    assert np.max(np.abs(out.data.sum(axis=-1) - 1.0)) <= 1e-12


@pytest.mark.parametrize("temperature", [0.0, -1.0])
def test_softmax_rejects_non_positive_temperature(temperature):
    with pytest.raises(ValueError, match="temperature must be positive"):
        softmax(np.zeros(3), temperature=temperature)


def test_backward_quadratic():
    x = Tensor(3.0, requires_grad=True)
    with Tape():
        loss = x * x
    grads = backward(loss)
    assert grads[x] == pytest.approx(6.0)
    assert x.grad == pytest.approx(6.0)


def test_backward_constant_function_has_zero_gradient():
    logits = Tensor(Rng(1).normal(6), requires_grad=True)
    with Tape() as tape:
        loss = nx.sum(softmax(logits))
        grads = tape.backward(loss)
    assert np.max(np.abs(grads[logits])) < 1e-12


def test_backward_accumulates_reused_leaf():
    x = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        loss = x * x + x
        grads = tape.backward(loss)
    assert grads[x] == pytest.approx(5.0)


def test_backward_twice_without_reset_fails():
    x = Tensor(1.5, requires_grad=True)
    with Tape() as tape:
        loss = nx.exp(x)
        tape.backward(loss)
        with pytest.raises(RuntimeError, match="twice"):
            tape.backward(loss)


def test_backward_after_reset_records_again():
    x = Tensor(1.5, requires_grad=True)
    with Tape() as tape:
        tape.backward(x * x)
        tape.reset()
        grads = tape.backward(x * 4.0)
    assert grads[x] == pytest.approx(4.0)


def test_backward_rejects_non_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        loss = x * 2.0
    with pytest.raises(ValueError, match="scalar"):
        backward(loss)


def test_backward_rejects_unrecorded_loss():
    with pytest.raises(ValueError, match="recorded"):
        backward(Tensor(1.0))


def test_tape_visits_ops_in_recording_order():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        nx.sum(nx.exp(nx.mul(x, 2.0)))
    assert tape.op_names == ["mul", "exp", "sum"]


def test_no_grad_suspends_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        with nx.no_grad():
            y = nx.exp(x)
    assert len(tape) == 0
    assert not y.requires_grad


def test_non_finite_result_raises():
    with pytest.raises(NumericalError):
        nx.log(Tensor([-1.0]))


def test_batching_beyond_leading_dimension_is_rejected():
    with pytest.raises(ValueError, match="leading-dimension"):
        nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_two_layer_net_matches_finite_differences():
    x, w1, w2 = _make_net()

    def loss_of_w1(w):
        hidden = nx.tanh(nx.matmul(Tensor(x), w))
        return nx.sum(nx.log_softmax(nx.matmul(hidden, Tensor(w2))))

    def loss_of_x(inputs):
        hidden = nx.sigmoid(nx.matmul(inputs, Tensor(w1)))
        return nx.mean(nx.square(nx.matmul(hidden, Tensor(w2))))

    assert finite_diff_check(loss_of_w1, w1, h=1e-5) <= 1e-4
    assert finite_diff_check(loss_of_x, x, h=1e-5) <= 1e-4


def test_gather_take_clip_minimum_match_finite_differences():
    rng = Rng(11)
    table = rng.normal((5, 4))
    index = np.array([0, 3, 3, 1])
    other = rng.normal((4, 4))

    def f(t):
        rows = nx.take(t, index)
        picked = nx.gather(rows, np.array([1, 0, 2, 3]))
        bounded = nx.clip(picked, -0.5, 0.5)
        return nx.sum(nx.minimum(rows, Tensor(other))) + nx.sum(bounded)

    assert finite_diff_check(f, table, h=1e-6) <= 1e-4


def test_finite_diff_check_linear():
    assert finite_diff_check(lambda x: nx.sum(x), Rng(2).normal(7)) <= 1e-10


def test_finite_diff_check_logsumexp():
    assert finite_diff_check(lambda x: nx.logsumexp(x), Rng(4).normal(9)) <= 1e-6


def test_finite_diff_check_reports_nan():
    with pytest.raises(NumericalError):
        finite_diff_check(lambda x: nx.sum(nx.log(x)), np.array([-1.0, 2.0]))


def test_finite_diff_check_step_range():
    with pytest.raises(ValueError, match="finite difference step"):
        finite_diff_check(lambda x: nx.sum(x), np.ones(2), h=1e-2)


def test_rng_reproduces_streams():
    a, b = Rng(42), Rng(42)
    assert np.array_equal(a.normal(10), b.normal(10))
    assert np.array_equal(a.integers(0, 100, size=5), b.integers(0, 100, size=5))
    assert a.counter == b.counter == 2


def test_rng_children_are_independent():
    root = Rng(42)
    first = root.child(1).uniform(8)
    second = root.child(2).uniform(8)
    assert not np.array_equal(first, second)
    assert np.array_equal(first, Rng(42, (1,)).uniform(8))


def test_rng_categorical_follows_point_masses():
    probs = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    assert Rng(0).categorical(probs).tolist() == [1, 0]


def test_rng_rejects_negative_seed():
    with pytest.raises(ValueError, match="seed"):
        Rng(-1)


def test_log_softmax_stays_finite_for_extreme_logits():
    out = nx.log_softmax(np.array([0.0, -1e4, 1e4]))
    assert np.all(np.isfinite(out.data))
    assert out.data[2] == pytest.approx(0.0)
    assert math.isclose(float(np.exp(out.data).sum()), 1.0, abs_tol=1e-12)
