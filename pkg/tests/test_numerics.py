import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fcil_sim.errors import ContractViolation, InputError, OracleError
from fcil_sim.numerics import (
    AdamState,
    RngStream,
    SgdState,
    adam_step,
    grad_check,
    scheduled_lr,
    sgd_step,
    softmax,
    softmax_ce,
)


def central_diff(f, x, eps=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        p, m = x.copy(), x.copy()
        p[idx] += eps
        m[idx] -= eps
        g[idx] = (f(p) - f(m)) / (2 * eps)
    return g


def test_softmax_ce_symmetric_two_class():
    loss, grad = softmax_ce([[0.0, 0.0]], np.array([0]))
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    np.testing.assert_allclose(grad, [[-0.5, 0.5]], atol=1e-15)


def test_softmax_ce_large_logits_stay_finite():
    loss, grad = softmax_ce([[1000.0, 0.0]], np.array([0]))
    assert loss == pytest.approx(0.0, abs=1e-300)
    assert np.all(np.isfinite(grad))


def test_softmax_ce_matches_finite_differences_4x5():
    g = np.random.default_rng(7)
    logits = g.normal(size=(4, 5))
    labels = g.integers(0, 5, size=4)
    _, grad = softmax_ce(logits, labels)
    numeric = central_diff(lambda z: softmax_ce(z, labels)[0], logits)
    rel = np.abs(grad - numeric) / np.maximum(np.abs(grad) + np.abs(numeric), 1e-12)
    assert rel.max() < 1e-6


def test_softmax_ce_errors():
    with pytest.raises(ContractViolation):
        softmax_ce(np.zeros((2, 3)), np.array([0]))
    with pytest.raises(InputError):
        softmax_ce(np.zeros((1, 3)), np.array([3]))
    with pytest.raises(InputError):
        softmax_ce(np.zeros((1, 3)), np.array([-1]))


@given(st.integers(0, 2**32 - 1))
def test_softmax_rows_normalized_and_shift_invariant(seed):
    g = np.random.default_rng(seed)
    z = g.normal(scale=5, size=(6, 7))
    p = softmax(z)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    shift = g.normal(scale=50, size=(6, 1))
    np.testing.assert_allclose(softmax(z + shift), p, atol=1e-9)


# -- SGD ---------------------------------------------------------------------


def test_sgd_plain_descent():
    p = np.array([[1.0, 2.0]])
    g = np.array([[0.25, -0.5]])
    out = sgd_step(p, g, SgdState(1.0, 0.0), 0)
    np.testing.assert_array_equal(out, p - g)


def test_sgd_momentum_two_steps():
    p0 = np.zeros((1, 3))
    g = np.array([[1.0, -2.0, 0.5]])
    st_ = SgdState(1.0, 0.9)
    p1 = sgd_step(p0, g, st_, 0)
    p2 = sgd_step(p1, g, st_, 1)
    # second step moves by the accumulated velocity 0.9g + g
    np.testing.assert_allclose(p2 - p1, -1.9 * g, rtol=0, atol=1e-15)
    np.testing.assert_allclose(st_.velocity, -1.9 * g, rtol=0, atol=1e-15)
    np.testing.assert_allclose(p2 - p0, -2.9 * g, rtol=0, atol=1e-15)


def test_cosine_schedule_endpoints():
    assert scheduled_lr(0.01, "cosine", 50, 0) == 0.01
    assert scheduled_lr(0.01, "cosine", 50, 50) <= 0.01
    assert scheduled_lr(0.01, "cosine", 50, 50) == pytest.approx(0.0, abs=1e-18)
    assert all(scheduled_lr(0.01, "cosine", 50, s) >= 0 for s in range(60))


def test_sgd_shape_mismatch():
    with pytest.raises(ContractViolation):
        sgd_step(np.zeros((2, 2)), np.zeros((2, 3)), SgdState(0.1), 0)


@given(st.integers(0, 2**32 - 1), st.floats(1e-4, 1.0))
def test_sgd_zero_momentum_is_vanilla_gd_bitwise(seed, lr):
    g = np.random.default_rng(seed)
    p = g.normal(size=(3, 4))
    state = SgdState(lr, 0.0)
    ref = p.copy()
    for step in range(5):
        grad = g.normal(size=(3, 4))
        p = sgd_step(p, grad, state, step)
        ref = ref - lr * grad
        assert np.array_equal(p, ref)


def test_adam_first_step_moves_by_lr():
    p = np.zeros(3)
    out = adam_step(p, np.array([2.0, -3.0, 0.0]), AdamState(0.003), 0)
    np.testing.assert_allclose(out, [-0.003, 0.003, 0.0], rtol=1e-6)


# -- RNG -----------------------------------------------------------------------


def test_rng_replay_is_identical():
    a = RngStream(42, (1, 2, 3)).random_bytes(4096)
    b = RngStream(42, (1, 2, 3)).random_bytes(4096)
    assert a == b


def test_rng_distinct_ids_are_uncorrelated():
    x = RngStream(42, (1,)).generator.standard_normal(100_000)
    y = RngStream(42, (2,)).generator.standard_normal(100_000)
    assert not np.array_equal(x, y)
    # |corr| of independent streams ~ N(0, 1/n)
    assert abs(np.corrcoef(x, y)[0, 1]) < 4 / math.sqrt(x.size)


def test_rng_child_does_not_consume_parent():
    parent = RngStream(5, (1,))
    parent.child(9).random_bytes(100)
    assert parent.random_bytes(16) == RngStream(5, (1,)).random_bytes(16)


# -- grad_check ----------------------------------------------------------------


def _linear_head_loss(x, y, n_classes):
    d = x.shape[1]

    def f(flat):
        W = flat.reshape(n_classes, d)
        loss, g = softmax_ce(x @ W.T, y)
        return loss, g.T @ x

    return f


def test_grad_check_linear_head():
    g = np.random.default_rng(3)
    x = g.normal(size=(8, 4))
    y = g.integers(0, 3, size=8)
    report = grad_check(_linear_head_loss(x, y, 3), g.normal(size=(3, 4)), tol=1e-4)
    assert report.passed and report.max_rel_error < 1e-4


def test_grad_check_empty_params_passes():
    report = grad_check(lambda p: (0.0, p), np.zeros((0, 0)))
    assert report.passed and report.n_coords == 0


def test_grad_check_catches_corrupted_gradient():
    g = np.random.default_rng(4)
    x = g.normal(size=(8, 4))
    y = g.integers(0, 3, size=8)
    f = _linear_head_loss(x, y, 3)

    def corrupted(p):
        loss, grad = f(p)
        return loss, grad + 0.1

    assert not grad_check(corrupted, g.normal(size=(3, 4)), tol=1e-4).passed


def test_grad_check_non_finite_loss():
    with pytest.raises(OracleError):
        grad_check(lambda p: (float("nan"), p), np.ones(2))
