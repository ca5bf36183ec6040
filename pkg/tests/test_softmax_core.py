import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfsoftmax.softmax_core import (
    LabelNotSelectedError,
    backward_selective,
    batch_loss_and_grads,
    forward_full,
    forward_selective,
    softmax,
)


def naive_softmax(y):
    e = [np.exp(v) for v in y]
    total = sum(e)
    return np.array([v / total for v in e])


def selective_loss(x, W, S, label):
    """-log of the restricted softmax probability, straight from the definition.

    Evaluated in extended precision so the finite-difference quotient is not
    dominated by rounding noise on small gradient components.
    """
    S = sorted(int(i) for i in S)
    x = np.asarray(x, dtype=np.longdouble)
    W = np.asarray(W, dtype=np.longdouble)
    logits = np.array([W[i] @ x for i in S], dtype=np.longdouble)
    return -(logits[S.index(label)] - np.log(np.sum(np.exp(logits))))


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


# -- softmax -----------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)


def test_softmax_ln2():
    np.testing.assert_allclose(softmax([np.log(2), 0.0, 0.0]), [0.5, 0.25, 0.25], atol=1e-15)


def test_softmax_matches_naive_reference():
    y = np.random.default_rng(0).normal(size=1000) * 3
    p = softmax(y)
    np.testing.assert_allclose(p, naive_softmax(y), rtol=0, atol=1e-12)
    assert abs(p.sum() - 1) < 1e-12


def test_softmax_is_overflow_safe():
    p = softmax([1000.0, 1000.0, -1000.0])
    np.testing.assert_allclose(p, [0.5, 0.5, 0.0], atol=1e-15)


def test_softmax_empty_rejected():
    with pytest.raises(ValueError):
        softmax([])


# -- forward -------------------------------------------------------------------

def test_forward_full_examples():
    np.testing.assert_allclose(forward_full(np.zeros(3), np.eye(3)), [1 / 3] * 3, atol=1e-15)
    W = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(forward_full(np.array([np.log(3), 0.0]), W), [0.75, 0.25], atol=1e-15)


def test_forward_full_matches_oracle():
    rng = np.random.default_rng(1)
    W, x = rng.normal(size=(500, 16)), rng.normal(size=16)
    y = np.array([sum(W[i, j] * x[j] for j in range(16)) for i in range(500)])
    np.testing.assert_allclose(forward_full(x, W), naive_softmax(y), rtol=0, atol=1e-12)


def test_forward_full_dimension_mismatch():
    with pytest.raises(ValueError):
        forward_full(np.zeros(4), np.eye(3))


def test_forward_selective_full_set_equals_full():
    rng = np.random.default_rng(2)
    W, x = rng.normal(size=(40, 5)), rng.normal(size=5)
    np.testing.assert_allclose(forward_selective(x, W, np.arange(40)), forward_full(x, W), atol=1e-12)


def test_forward_selective_singleton():
    rng = np.random.default_rng(3)
    W, x = rng.normal(size=(10, 4)), rng.normal(size=4)
    p = forward_selective(x, W, [7])
    assert p[7] == 1.0
    assert np.count_nonzero(p) == 1


def test_forward_selective_matches_restricted_oracle():
    rng = np.random.default_rng(4)
    W, x = rng.normal(size=(100, 8)), rng.normal(size=8)
    S = rng.choice(100, size=10, replace=False)
    expected = np.zeros(100)
    e = {int(i): np.exp(W[i] @ x) for i in S}
    total = sum(e.values())
    for i, v in e.items():
        expected[i] = v / total
    p = forward_selective(x, W, S)
    np.testing.assert_allclose(p, expected, rtol=0, atol=1e-12)
    # order of S must not matter
    np.testing.assert_array_equal(p, forward_selective(x, W, S[::-1]))


@pytest.mark.parametrize("S", [[], [0, 10], [-1], [1, 1]])
def test_forward_selective_rejects_bad_sets(S):
    W = np.eye(10)
    with pytest.raises(ValueError):
        forward_selective(np.zeros(10), W, np.asarray(S, dtype=np.int64))


# -- backward ------------------------------------------------------------------

def test_backward_singleton_is_perfect():
    rng = np.random.default_rng(5)
    W, x = rng.normal(size=(6, 3)), rng.normal(size=3)
    g = backward_selective(x, W, [2], 2)
    assert g.loss == 0.0
    np.testing.assert_array_equal(g.rows, np.zeros((1, 3)))
    np.testing.assert_array_equal(g.dx, np.zeros(3))


def test_backward_two_classes_tied():
    x = np.array([0.3, -1.2, 2.0])
    W = np.zeros((2, 3))
    g = backward_selective(x, W, [0, 1], 0).as_dict()
    np.testing.assert_allclose(g[0], -0.5 * x, atol=1e-15)
    np.testing.assert_allclose(g[1], 0.5 * x, atol=1e-15)


def test_backward_label_must_be_selected():
    with pytest.raises(LabelNotSelectedError):
        backward_selective(np.ones(2), np.eye(2), [1], 0)


def _finite_difference_check(rng, N=50, D=8, size=10, h=1e-5):
    W, x = rng.normal(size=(N, D)), rng.normal(size=D)
    Wl, xl = W.astype(np.longdouble), x.astype(np.longdouble)
    S = np.sort(rng.choice(N, size=size, replace=False))
    label = int(rng.choice(S))
    g = backward_selective(x, W, S, label)
    assert abs(g.loss - selective_loss(x, W, S, label)) < 1e-12
    worst = 0.0
    for k, i in enumerate(S):
        for j in range(D):
            Wp, Wm = Wl.copy(), Wl.copy()
            Wp[i, j] += h
            Wm[i, j] -= h
            fd = (selective_loss(xl, Wp, S, label) - selective_loss(xl, Wm, S, label)) / (2 * h)
            worst = max(worst, rel_err(g.rows[k, j], float(fd)))
    for j in range(D):
        xp, xm = xl.copy(), xl.copy()
        xp[j] += h
        xm[j] -= h
        fd = (selective_loss(xp, Wl, S, label) - selective_loss(xm, Wl, S, label)) / (2 * h)
        worst = max(worst, rel_err(g.dx[j], float(fd)))
    return worst


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    assert _finite_difference_check(np.random.default_rng(seed)) <= 1e-5


def test_batch_grads_equal_sum_of_per_sample_grads():
    rng = np.random.default_rng(7)
    W = rng.normal(size=(30, 6))
    S = np.sort(rng.choice(30, size=12, replace=False))
    X = rng.normal(size=(5, 6))
    labels = rng.choice(S, size=5)
    losses, probs, rows, dX = batch_loss_and_grads(X, W[S], np.searchsorted(S, labels))
    expected_rows = np.zeros((12, 6))
    for r in range(5):
        g = backward_selective(X[r], W, S, labels[r])
        expected_rows += g.rows
        np.testing.assert_allclose(dX[r], g.dx, atol=1e-13)
        assert abs(losses[r] - g.loss) < 1e-13
        np.testing.assert_allclose(probs[r], forward_selective(X[r], W, S)[S], atol=1e-15)
    np.testing.assert_allclose(rows, expected_rows, atol=1e-13)


# -- properties ------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 60), d=st.integers(1, 10))
def test_selective_output_is_a_valid_expansion(seed, n, d):
    rng = np.random.default_rng(seed)
    W, x = rng.normal(size=(n, d)) * 3, rng.normal(size=d)
    S = rng.choice(n, size=rng.integers(1, n + 1), replace=False)
    p = forward_selective(x, W, S)
    assert abs(p.sum() - 1) < 1e-9
    outside = np.setdiff1d(np.arange(n), S)
    assert np.all(p[outside] == 0.0)
    assert np.all(p >= 0)
    np.testing.assert_allclose(forward_selective(x, W, np.arange(n)), forward_full(x, W), rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_tv_distance_shrinks_along_nested_sets(seed):
    rng = np.random.default_rng(seed)
    n = 80
    W, x = rng.normal(size=(n, 6)), rng.normal(size=6)
    full = forward_full(x, W)
    order = np.argsort(-(W @ x), kind="stable")
    tv = [0.5 * np.abs(forward_selective(x, W, order[:m]) - full).sum() for m in range(1, n + 1)]
    assert np.all(np.diff(tv) <= 1e-12)
    assert tv[-1] < 1e-12


def _step_time(W, x, S, repeats=7):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        forward_selective(x, W, S)
        backward_selective(x, W, S, int(S[0]))
        best = min(best, time.perf_counter() - t0)
    return best


def test_selective_cost_is_linear_in_set_size():
    rng = np.random.default_rng(8)
    W, x = rng.normal(size=(200_000, 64)), rng.normal(size=64)
    S = rng.choice(200_000, size=160_000, replace=False)
    # both sizes keep their row blocks above glibc's 32 MB mmap threshold, so
    # neither run is favoured by pages the heap already has mapped
    ratio = _step_time(W, x, S[:160_000]) / _step_time(W, x, S[:80_000])
    assert 1.6 <= ratio <= 2.4, ratio
