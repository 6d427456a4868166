"""The MEX (log-mean-exp) operator, its derivatives and MEX pooling.

``MEX_beta{c_i} = (1/beta) log(mean_i exp(beta * c_i))``

Large positive ``beta`` approaches the maximum, ``beta -> 0`` the mean and
large negative ``beta`` the minimum.  Every evaluation is shifted by the
extreme element and uses ``log1p``/``expm1``, so it stays accurate both for
huge ``|beta * c|`` and for tiny ``beta``.  Below ``BETA_SWITCH`` the exact
limit (the arithmetic mean) is returned.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import PatchGeometry, as_tensor3

BETA_SWITCH = 1e-8


def _reference(c: np.ndarray, beta: float, axis: int) -> np.ndarray:
    # the element that dominates the sum: max for beta > 0, min for beta < 0
    return c.max(axis=axis, keepdims=True) if beta > 0 else c.min(axis=axis, keepdims=True)


def mex_reduce(c, beta: float, axis=-1, return_weights: bool = False):
    """MEX along ``axis`` (an int or tuple of ints).

    With ``return_weights`` the softmax weights ``dMEX/dc`` are returned as
    well, shaped like ``c``.
    """
    c = np.asarray(c, dtype=np.float64)
    beta = float(beta)
    axes = axis if isinstance(axis, tuple) else (axis,)
    count = int(np.prod([c.shape[a] for a in axes]))
    if abs(beta) < BETA_SWITCH:
        value = c.mean(axis=axis)
        if return_weights:
            return value, np.full_like(c, 1.0 / count)
        return value
    ref = _reference(c, beta, axis)
    e = np.expm1(beta * (c - ref))  # in (-1, 0]
    value = np.squeeze(ref, axis=axis) + np.log1p(e.mean(axis=axis)) / beta
    # the exact value lies in [min, max]; only roundoff can push it outside
    value = np.clip(value, c.min(axis=axis), c.max(axis=axis))
    if not return_weights:
        return value
    w = e + 1.0
    w /= w.sum(axis=axis, keepdims=True)
    return value, w


def mex_beta_grad(c, beta: float, value, weights, axis=-1):
    """dMEX/dbeta = (sum_i s_i c_i - MEX) / beta, or var(c)/2 at beta ~ 0."""
    c = np.asarray(c, dtype=np.float64)
    beta = float(beta)
    if abs(beta) < BETA_SWITCH:
        return 0.5 * c.var(axis=axis)
    ref = _reference(c, beta, axis)
    centred = c - ref
    first = (weights * centred).sum(axis=axis)
    return (first - (value - np.squeeze(ref, axis=axis))) / beta


def _check_values(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("MEX of an empty sequence")
    if not np.all(np.isfinite(v)):
        raise ValueError("MEX input contains non-finite values")
    return v


def _check_beta(beta) -> float:
    beta = float(beta)
    if not np.isfinite(beta):
        raise ValueError(f"beta must be finite, got {beta}")
    return beta


def mex(values, beta: float) -> float:
    """Scalar MEX of a 1-D sequence.

    >>> round(mex([0.0, np.log(3.0)], 1.0), 6)
    0.693147
    """
    return float(mex_reduce(_check_values(values), _check_beta(beta)))


def mex_grad(values, beta: float) -> np.ndarray:
    """Gradient of :func:`mex` w.r.t. the values (softmax weights at ``beta``)."""
    _, w = mex_reduce(_check_values(values), _check_beta(beta), return_weights=True)
    return w


@dataclass
class MexUnit:
    """A MEX parameter with an optional per-input offset vector."""

    beta: float
    offsets: np.ndarray | None = None

    def __post_init__(self):
        self.beta = _check_beta(self.beta)
        if self.offsets is not None:
            self.offsets = np.asarray(self.offsets, dtype=np.float64)
            if not np.all(np.isfinite(self.offsets)):
                raise ValueError("MEX offsets must be finite")


def mex_with_offsets(x, unit: MexUnit) -> float:
    x = _check_values(x)
    if unit.offsets is None:
        return mex(x, unit.beta)
    b = np.asarray(unit.offsets, dtype=np.float64).reshape(-1)
    if b.shape != x.shape:
        raise ValueError(f"offset length {b.size} does not match input length {x.size}")
    return mex(x + b, unit.beta)


@dataclass
class PoolSpec:
    window_h: int = 2
    window_w: int = 2
    stride_h: int = 2
    stride_w: int = 2
    beta: float = 60.0
    global_pool: bool = False
    learned: bool = False  # whether beta is updated by the optimizer

    def __post_init__(self):
        self.beta = _check_beta(self.beta)
        if min(self.window_h, self.window_w, self.stride_h, self.stride_w) < 1:
            raise ValueError("pooling window and stride must be >= 1")

    @property
    def geometry(self) -> PatchGeometry:
        return PatchGeometry(self.window_h, self.window_w, self.stride_h, self.stride_w, 0)

    def output_shape(self, height: int, width: int) -> tuple[int, int]:
        if self.global_pool:
            return 1, 1
        return self.geometry.output_shape(height, width)


def _pool_windows(x: np.ndarray, spec: PoolSpec) -> np.ndarray:
    # (N, H, W, C) -> (N, oh, ow, C, wh*ww)
    n, h, w, c = x.shape
    if spec.global_pool:
        return x.reshape(n, 1, 1, h * w, c).transpose(0, 1, 2, 4, 3)
    oh, ow = spec.output_shape(h, w)
    win = sliding_window_view(x, (spec.window_h, spec.window_w), axis=(1, 2))
    win = win[:, : (oh - 1) * spec.stride_h + 1 : spec.stride_h,
              : (ow - 1) * spec.stride_w + 1 : spec.stride_w]
    return win.reshape(n, oh, ow, c, spec.window_h * spec.window_w)


@dataclass
class PoolCache:
    input_shape: tuple
    windows: np.ndarray
    value: np.ndarray
    weights: np.ndarray
    spec: PoolSpec = field(repr=False)


def mex_pool_batch(x: np.ndarray, spec: PoolSpec):
    """Pool a batch ``(N, H, W, C)``; returns the pooled batch and a backward cache."""
    win = _pool_windows(x, spec)
    value, weights = mex_reduce(win, spec.beta, axis=-1, return_weights=True)
    return value, PoolCache(x.shape, win, value, weights, spec)


def mex_pool_backward(dout: np.ndarray, cache: PoolCache):
    """Gradients w.r.t. the pooled input and the pooling beta."""
    spec = cache.spec
    dwin = dout[..., None] * cache.weights
    dbeta = float(np.sum(dout * mex_beta_grad(cache.windows, spec.beta, cache.value, cache.weights)))
    n, h, w, c = cache.input_shape
    if spec.global_pool:
        dx = dwin.reshape(n, c, h * w).transpose(0, 2, 1).reshape(n, h, w, c)
        return dx, dbeta
    oh, ow = dout.shape[1:3]
    dwin = dwin.reshape(n, oh, ow, c, spec.window_h, spec.window_w)
    dx = np.zeros(cache.input_shape)
    sh, sw = spec.stride_h, spec.stride_w
    for a in range(spec.window_h):
        for b in range(spec.window_w):
            dx[:, a : a + sh * (oh - 1) + 1 : sh, b : b + sw * (ow - 1) + 1 : sw, :] += dwin[..., a, b]
    return dx, dbeta


def mex_pool(x, spec: PoolSpec) -> np.ndarray:
    """MEX-pool each channel of an ``(H, W, C)`` map over its windows."""
    x = as_tensor3(x)
    out, _ = mex_pool_batch(x[None], spec)
    return out[0]
