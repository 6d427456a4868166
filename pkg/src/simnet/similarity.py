"""Weighted similarity operators and the conv -> lp-sim composite.

``linear``: ``sum_i u_i x_i z_i``
``lp``:     ``-sum_i u_i |x_i - z_i|^p``

Unweighted layers use ``u = 1``.  The lp subgradient at ``x_i == z_i`` is
taken as 0, and the ``log|x_i - z_i|`` factor of the order gradient is
dropped below ``DELTA_LOG``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import PatchGeometry, ShapeError, as_tensor3, extract_patches_batch, fold_patches_batch

P_MIN = 0.1
U_MIN = 1e-8
DELTA_LOG = 1e-12
KINDS = ("linear", "lp")

# rows per chunk are chosen so a chunk's (rows, n, d) scratch stays near this size
_CHUNK_ELEMS = 1 << 21


@dataclass
class SimilarityLayer:
    kind: str
    templates: np.ndarray
    weights: np.ndarray | None = None
    weighted: bool = True
    order_p: float = 2.0
    geom: PatchGeometry = field(default_factory=lambda: PatchGeometry(1, 1))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown similarity kind {self.kind!r}; expected one of {KINDS}")
        self.templates = np.array(self.templates, dtype=np.float64, ndmin=2)
        if self.weighted:
            if self.weights is None:
                self.weights = np.ones_like(self.templates)
            self.weights = np.array(self.weights, dtype=np.float64, ndmin=2)
            if self.weights.shape != self.templates.shape:
                raise ShapeError(
                    f"weights shape {self.weights.shape} != templates shape {self.templates.shape}"
                )
            if np.any(self.weights <= 0):
                raise ValueError("similarity weights must be strictly positive")
        else:
            self.weights = None
        self.order_p = float(self.order_p)
        if self.kind == "lp" and not (np.isfinite(self.order_p) and self.order_p >= P_MIN):
            raise ValueError(f"order p must be finite and >= {P_MIN}, got {self.order_p}")

    @property
    def n_templates(self) -> int:
        return self.templates.shape[0]

    @property
    def dim(self) -> int:
        return self.templates.shape[1]

    def effective_weights(self) -> np.ndarray:
        return self.weights if self.weighted else np.ones_like(self.templates)


def _chunks(rows: int, n: int, d: int):
    step = max(1, _CHUNK_ELEMS // max(1, n * d))
    for start in range(0, rows, step):
        yield slice(start, min(rows, start + step))


def sim_forward(y: np.ndarray, layer: SimilarityLayer) -> np.ndarray:
    """Similarities of every row of ``y`` (shape ``(..., d)``) to every template."""
    lead = y.shape[:-1]
    y2 = y.reshape(-1, y.shape[-1])
    if y2.shape[1] != layer.dim:
        raise ShapeError(f"input dim {y2.shape[1]} != template dim {layer.dim}")
    u = layer.effective_weights()
    z = layer.templates
    if layer.kind == "linear":
        out = y2 @ (u * z).T
    else:
        out = np.empty((y2.shape[0], layer.n_templates))
        p = layer.order_p
        for sl in _chunks(y2.shape[0], *z.shape):
            ap = np.abs(y2[sl, None, :] - z[None]) ** p
            out[sl] = -np.einsum("mnd,nd->mn", ap, u)
    return out.reshape(*lead, layer.n_templates)


def sim_backward(dout: np.ndarray, y: np.ndarray, layer: SimilarityLayer):
    """Reverse pass of :func:`sim_forward`.

    Returns ``(dy, dz, du, dp)``; ``du`` is the gradient w.r.t. the weights
    as if they were present (``phi`` summed against ``dout``).
    """
    d = y.shape[-1]
    y2 = y.reshape(-1, d)
    g = dout.reshape(-1, layer.n_templates)
    u = layer.effective_weights()
    z = layer.templates
    if layer.kind == "linear":
        dy = g @ (u * z)
        gy = g.T @ y2
        return dy.reshape(y.shape), gy * u, gy * z, 0.0
    p = layer.order_p
    dy = np.empty_like(y2)
    dz = np.zeros_like(z)
    du = np.zeros_like(z)
    dp = 0.0
    for sl in _chunks(y2.shape[0], *z.shape):
        diff = y2[sl, None, :] - z[None]
        a = np.abs(diff)
        ap = a ** p
        gu = g[sl, :, None] * u  # d out / d(-u|.|^p) chain, per coordinate
        du -= np.einsum("mn,mnd->nd", g[sl], ap)
        apm1 = np.divide(ap, a, out=np.zeros_like(a), where=a > 0)
        dd = -gu * p * apm1 * np.sign(diff)
        dy[sl] = dd.sum(axis=1)
        dz -= dd.sum(axis=0)
        loga = np.log(a, out=np.zeros_like(a), where=a > DELTA_LOG)
        dp -= float(np.sum(gu * ap * loga))
    return dy.reshape(y.shape), dz, du, dp


def _check_vector(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != d:
        raise ShapeError(f"input dim {x.size} != template dim {d}")
    return x


def similarity(x, layer: SimilarityLayer, l: int) -> float:
    """``u_l^T phi(x, z_l)`` for one input vector and template ``l``."""
    x = _check_vector(x, layer.dim)
    u = layer.effective_weights()[l]
    z = layer.templates[l]
    if layer.kind == "linear":
        return float(np.dot(u, x * z))
    return float(-np.dot(u, np.abs(x - z) ** layer.order_p))


def similarity_grads(x, layer: SimilarityLayer, l: int, upstream: float = 1.0) -> dict:
    """Gradients of ``upstream * similarity(x, layer, l)``.

    Keys: ``x``, ``z``, ``u`` (vectors for template ``l``) and ``p`` (scalar,
    always 0 for the linear kind).
    """
    x = _check_vector(x, layer.dim)
    g = np.zeros((1, layer.n_templates))
    g[0, l] = float(upstream)
    dy, dz, du, dp = sim_backward(g, x[None], layer)
    return {"x": dy[0], "z": dz[l], "u": du[l], "p": dp}


def similarity_map(x, layer: SimilarityLayer) -> np.ndarray:
    """Similarity of every patch of an ``(H, W, C)`` map to every template."""
    x = as_tensor3(x)
    cols = extract_patches_batch(x[None], layer.geom)
    return sim_forward(cols, layer)[0]


@dataclass
class ConvLpSim:
    """Whitening convolution followed by a 1x1 similarity layer.

    ``filters`` holds one filter per row (``d_out x d_in``); ``geom`` is the
    receptive field of the convolution.  ``sim`` always has 1x1 geometry.
    """

    filters: np.ndarray
    sim: SimilarityLayer
    geom: PatchGeometry = field(default_factory=lambda: PatchGeometry(1, 1))
    trainable_filters: bool = True

    def __post_init__(self):
        self.filters = np.array(self.filters, dtype=np.float64, ndmin=2)
        if self.sim.geom != PatchGeometry(1, 1):
            raise ValueError("the similarity stage of a conv->lp-sim block must be 1x1, stride 1, pad 0")
        if self.filters.shape[0] != self.sim.dim:
            raise ShapeError(
                f"{self.filters.shape[0]} filters but templates have dim {self.sim.dim}"
            )

    @property
    def in_channels(self) -> int:
        return self.filters.shape[1] // (self.geom.field_h * self.geom.field_w)

    @property
    def out_channels(self) -> int:
        return self.sim.n_templates


def conv_forward_batch(x: np.ndarray, block: ConvLpSim):
    """Returns similarity maps plus ``(patches, whitened)`` for the backward pass."""
    cols = extract_patches_batch(x, block.geom)
    if cols.shape[-1] != block.filters.shape[1]:
        raise ShapeError(
            f"patch dim {cols.shape[-1]} does not match filter dim {block.filters.shape[1]}"
        )
    y = cols @ block.filters.T
    return sim_forward(y, block.sim), (cols, y)


def conv_backward_batch(dout: np.ndarray, x_shape, saved, block: ConvLpSim):
    cols, y = saved
    dy, dz, du, dp = sim_backward(dout, y, block.sim)
    dW = dy.reshape(-1, dy.shape[-1]).T @ cols.reshape(-1, cols.shape[-1])
    dx = fold_patches_batch(dy @ block.filters, x_shape, block.geom)
    return dx, {"W": dW, "z": dz, "u": du, "p": dp}


def conv_lp_sim(x, block: ConvLpSim) -> np.ndarray:
    x = as_tensor3(x)
    out, _ = conv_forward_batch(x[None], block)
    return out[0]
