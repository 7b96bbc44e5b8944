import math
import random

import numpy as np
import pytest

from peftmux.semantics import (DenseMatrix, IsolationError, ShapeError, _split_and_check,
                               batched_backward, batched_forward, matmul, vstack)


def rand_matrix(r, rows, cols, lo=-2.0, hi=2.0):
    return DenseMatrix.from_rows([[r.uniform(lo, hi) for _ in range(cols)] for _ in range(rows)])


def loops(a, b):
    """Plain nested-list product."""
    A = [list(a.row(i)) for i in range(a.rows)]
    B = [list(b.row(i)) for i in range(b.rows)]
    return [[sum(A[i][k] * B[k][j] for k in range(a.cols)) for j in range(b.cols)]
            for i in range(a.rows)]


def as_rows(m):
    return [list(m.row(i)) for i in range(m.rows)]


def test_identity_batch_returns_weight():
    W = DenseMatrix.from_rows([[1.5, -2.0], [0.25, 3.0]])
    _, (s1, s2) = batched_forward([DenseMatrix.identity(2), DenseMatrix.from_rows([[1, 1]])], W)
    assert s1 == W
    assert as_rows(s2) == [[1.75, 1.0]]


def test_single_batch_is_plain_matmul():
    r = random.Random(0)
    B, W = rand_matrix(r, 3, 4), rand_matrix(r, 4, 2)
    stacked, (s,) = batched_forward([B], W)
    assert stacked == s == matmul(B, W)


def test_three_tasks_against_loop_oracle():
    r = random.Random(1)
    for _ in range(200):
        k, n = r.randint(1, 8), r.randint(1, 8)
        W = rand_matrix(r, k, n)
        batches = [rand_matrix(r, r.randint(1, 8), k) for _ in range(3)]
        _, slices = batched_forward(batches, W)
        for b, s in zip(batches, slices):
            ref = loops(b, W)
            assert np.max(np.abs(np.array(as_rows(s)) - np.array(ref))) <= 1e-12
            assert np.allclose(as_rows(s), np.array(as_rows(b)) @ np.array(as_rows(W)),
                               atol=1e-12, rtol=0)


def test_backward_against_loop_oracle():
    r = random.Random(2)
    for _ in range(200):
        k, n = r.randint(1, 8), r.randint(1, 8)
        W = rand_matrix(r, k, n)
        grads = [rand_matrix(r, r.randint(1, 8), n) for _ in range(r.randint(1, 4))]
        slices = batched_backward(grads, W)
        for g, s in zip(grads, slices):
            assert (s.rows, s.cols) == (g.rows, k)
            ref = loops(g, W.transpose())
            assert np.max(np.abs(np.array(as_rows(s)) - np.array(ref))) <= 1e-12


def test_single_task_backward_is_g_wt():
    r = random.Random(3)
    G, W = rand_matrix(r, 2, 3), rand_matrix(r, 4, 3)
    (s,) = batched_backward([G], W)
    assert s == matmul(G, W.transpose())


def test_zero_gradient_isolated():
    r = random.Random(4)
    W = rand_matrix(r, 3, 3)
    _, z = batched_backward([rand_matrix(r, 2, 3, 1e6, 1e9), DenseMatrix.zeros(2, 3)], W)
    assert all(v == 0.0 for v in z.values)


@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_non_finite_does_not_leak(bad):
    r = random.Random(5)
    for _ in range(100):
        k, n = r.randint(1, 6), r.randint(1, 6)
        W = rand_matrix(r, k, n)
        g1 = rand_matrix(r, r.randint(1, 5), n)
        vals = list(g1.values)
        vals[r.randrange(len(vals))] = bad
        g1 = DenseMatrix(g1.rows, g1.cols, tuple(vals))
        others = [rand_matrix(r, r.randint(1, 5), n) for _ in range(2)]
        s1, *rest = batched_backward([g1, *others], W)
        assert not s1.is_finite()
        assert all(s.is_finite() for s in rest)
        b1 = DenseMatrix(g1.rows, n, g1.values)
        Wf = rand_matrix(r, n, k)
        _, (f1, *frest) = batched_forward([b1, *others], Wf)
        assert all(s.is_finite() for s in frest)


def test_shape_errors():
    W = DenseMatrix.zeros(2, 3)
    with pytest.raises(ShapeError):
        batched_forward([DenseMatrix.zeros(1, 3)], W)
    with pytest.raises(ShapeError):
        batched_backward([DenseMatrix.zeros(1, 2)], W)
    with pytest.raises(ShapeError):
        DenseMatrix(2, 2, (1.0,))
    with pytest.raises(ShapeError):
        DenseMatrix.from_rows([[1.0], [1.0, 2.0]])
    with pytest.raises(ShapeError):
        vstack([])


def test_mismatched_slices_detected():
    r = random.Random(6)
    W = rand_matrix(r, 2, 2)
    a, b = rand_matrix(r, 1, 2), rand_matrix(r, 1, 2)
    stacked = matmul(vstack([a, b]), W)
    with pytest.raises(IsolationError):
        _split_and_check(stacked, [b, a], W)
