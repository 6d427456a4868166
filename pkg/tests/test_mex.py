import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simnet.mex import (
    MexUnit,
    PoolSpec,
    mex,
    mex_beta_grad,
    mex_grad,
    mex_pool,
    mex_pool_backward,
    mex_pool_batch,
    mex_reduce,
    mex_with_offsets,
)

vectors = st.lists(st.floats(-50, 50), min_size=1, max_size=12)
betas = st.floats(-100, 100)


def test_examples():
    assert mex([3.25], 7.0) == 3.25
    assert mex([5, 5, 5], 3.7) == 5.0
    assert abs(mex([0.0, math.log(3.0)], 1.0) - math.log(2.0)) < 1e-15
    assert abs(mex([1, 2, 3], 1e-12) - 2.0) < 1e-15


def test_offsets():
    assert mex_with_offsets([1, 2], MexUnit(1.0, [0, 0])) == mex([1, 2], 1.0)
    assert abs(mex_with_offsets([0, 0], MexUnit(1.0, [0, math.log(3)])) - math.log(2)) < 1e-15
    b = np.array([0.7, -2.5, 4.0])
    for beta in (-3.0, 0.0, 0.4, 20.0):
        assert abs(mex_with_offsets(-b, MexUnit(beta, b))) < 1e-15
    with pytest.raises(ValueError):
        mex_with_offsets([1, 2], MexUnit(1.0, [0, 0, 0]))


def test_gradient_examples():
    np.testing.assert_allclose(mex_grad([2.0, 2.0, 2.0, 2.0], 5.0), 0.25, atol=1e-15)
    np.testing.assert_allclose(mex_grad([1.0, -4.0, 9.0], 1e-12), 1 / 3, atol=1e-15)
    np.testing.assert_allclose(mex_grad([0.0, math.log(3.0)], 1.0), [0.25, 0.75], atol=1e-15)


def test_errors():
    with pytest.raises(ValueError):
        mex([], 1.0)
    with pytest.raises(ValueError):
        mex([1.0, np.inf], 1.0)
    with pytest.raises(ValueError):
        mex([1.0], np.nan)


@settings(max_examples=300, deadline=None)
@given(vectors, betas)
def test_bounds(v, beta):
    m = mex(v, beta)
    assert min(v) - 1e-9 <= m <= max(v) + 1e-9


@settings(max_examples=300, deadline=None)
@given(vectors, betas, betas)
def test_monotone_in_beta(v, b1, b2):
    lo, hi = sorted((b1, b2))
    assert mex(v, lo) <= mex(v, hi) + 1e-9


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.floats(1e-3, 30), st.booleans(), st.integers(0, 2**31 - 1))
def test_collapsing(n, m, beta, negative, seed):
    beta = -beta if negative else beta
    grid = np.random.default_rng(seed).normal(scale=3, size=(n, m))
    nested = mex([mex(row, beta) for row in grid], beta)
    assert abs(nested - mex(grid.ravel(), beta)) <= 1e-9


@settings(max_examples=300, deadline=None)
@given(vectors, st.floats(1e-3, 100))
def test_max_bound(v, beta):
    assert abs(mex(v, beta) - max(v)) <= math.log(len(v)) / beta + 1e-9


@settings(max_examples=200, deadline=None)
@given(vectors)
def test_small_beta_mean(v):
    spread = max(v) - min(v)
    assert abs(mex(v, 1e-6) - np.mean(v)) <= 1e-4 * spread + 1e-12


@settings(max_examples=200, deadline=None)
@given(vectors, betas, st.floats(-100, 100))
def test_translation(v, beta, t):
    assert abs(mex(np.add(v, t), beta) - mex(v, beta) - t) <= 1e-9


@settings(max_examples=150, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.floats(-10, 10))
def test_grad_matches_finite_differences(v, beta):
    v = np.array(v)
    g = mex_grad(v, beta)
    assert abs(g.sum() - 1.0) <= 1e-12
    h = 1e-6
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = h
        fd = (mex(v + e, beta) - mex(v - e, beta)) / (2 * h)
        assert abs(g[i] - fd) <= 1e-5 * max(abs(g[i]), abs(fd), 1e-3)


def test_beta_gradient_matches_fd():
    rng = np.random.default_rng(3)
    for beta in (-4.0, -0.3, 1e-9, 0.2, 2.5):
        c = rng.normal(size=7)
        value, w = mex_reduce(c, beta, return_weights=True)
        g = float(mex_beta_grad(c, beta, value, w))
        h = 1e-5
        fd = (mex(c, beta + h) - mex(c, beta - h)) / (2 * h)
        assert abs(g - fd) <= 1e-5 * max(abs(g), 1e-3)


def test_overflow_safety():
    v = [1e6, -1e6, 3.0]
    for beta in (50.0, -50.0):
        assert np.isfinite(mex(v, beta))
        assert np.all(np.isfinite(mex_grad(v, beta)))
    assert mex(v, 50.0) <= 1e6


def test_pool_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
    glob = PoolSpec(beta=1e-12, global_pool=True)
    assert abs(mex_pool(x, glob)[0, 0, 0] - 2.5) < 1e-15
    out = mex_pool(x, PoolSpec(beta=100.0, global_pool=True))[0, 0, 0]
    assert 4.0 - math.log(4) / 100 <= out <= 4.0 and abs(out - 4.0) < 0.05
    np.testing.assert_array_equal(mex_pool(np.zeros((4, 4, 1)), PoolSpec(2, 2, 2, 2, 3.0)), np.zeros((2, 2, 1)))


def test_pool_matches_scalar_mex():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 7, 3))
    spec = PoolSpec(3, 2, 2, 2, beta=2.5)
    out = mex_pool(x, spec)
    assert out.shape == (2, 3, 3)
    for i in range(2):
        for j in range(3):
            for c in range(3):
                win = x[2 * i:2 * i + 3, 2 * j:2 * j + 2, c]
                assert abs(out[i, j, c] - mex(win.ravel(), 2.5)) < 1e-12


def test_pool_backward_matches_fd():
    rng = np.random.default_rng(5)
    for spec in (PoolSpec(2, 2, 1, 1, beta=1.7), PoolSpec(3, 3, 2, 2, beta=-0.8), PoolSpec(beta=0.6, global_pool=True)):
        x = rng.normal(size=(2, 5, 5, 2))
        g = rng.normal(size=mex_pool_batch(x, spec)[0].shape)
        _, cache = mex_pool_batch(x, spec)
        dx, dbeta = mex_pool_backward(g, cache)
        h = 1e-6
        for idx in [(0, 0, 0, 0), (1, 2, 3, 1), (0, 4, 4, 1), (1, 1, 2, 0)]:
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            fd = (np.sum(g * mex_pool_batch(xp, spec)[0]) - np.sum(g * mex_pool_batch(xm, spec)[0])) / (2 * h)
            assert abs(dx[idx] - fd) < 1e-7
        sp = PoolSpec(spec.window_h, spec.window_w, spec.stride_h, spec.stride_w, spec.beta + h, spec.global_pool)
        sm = PoolSpec(spec.window_h, spec.window_w, spec.stride_h, spec.stride_w, spec.beta - h, spec.global_pool)
        fd = (np.sum(g * mex_pool_batch(x, sp)[0]) - np.sum(g * mex_pool_batch(x, sm)[0])) / (2 * h)
        assert abs(dbeta - fd) < 1e-6
