"""SimNet MLP, MLPConv and the deep L-layer SimNet.

The deep network is a list of conv -> lp-sim layers, each optionally
followed by MEX pooling, then a per-location classification MEX (offsets
``b[r, l]`` shared across locations) and a global MEX pooling to one score
per class.  Every evaluation works on batches ``(N, H, W, C)``; single maps
``(H, W, C)`` are accepted and return a single score vector.

Parameters are exposed as a flat, ordered ``{name: array}`` dict::

    layer{i}.W  layer{i}.z  layer{i}.u  layer{i}.p  pool{i}.beta
    class.beta  class.b  global.beta
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mex import PoolSpec, mex_beta_grad, mex_pool_backward, mex_pool_batch, mex_reduce
from .similarity import (
    ConvLpSim,
    SimilarityLayer,
    conv_backward_batch,
    conv_forward_batch,
    sim_forward,
)
from .tensor import PatchGeometry, ShapeError, extract_patches_batch


class NonFiniteError(FloatingPointError):
    """Raised when a forward pass produces NaN/Inf; names the offending stage."""


def _argmax(scores: np.ndarray):
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(scores, axis=-1)


# --------------------------------------------------------------------------
# SimNet MLP
# --------------------------------------------------------------------------


@dataclass
class SimNetMlp:
    sim: SimilarityLayer
    beta: float
    offsets: np.ndarray  # (k, n)

    def __post_init__(self):
        self.offsets = np.array(self.offsets, dtype=np.float64, ndmin=2)
        if self.offsets.shape[1] != self.sim.n_templates:
            raise ShapeError(
                f"offsets have {self.offsets.shape[1]} columns, expected {self.sim.n_templates}"
            )
        if not self.beta > 0:
            raise ValueError(f"classification MEX requires beta > 0, got {self.beta}")

    @property
    def n_classes(self) -> int:
        return self.offsets.shape[0]

    def to_network(self, global_beta: float = 0.0) -> "NetworkSpec":
        """The same classifier as a one-layer network over a 1x1xd input."""
        d = self.sim.dim
        sim = SimilarityLayer(self.sim.kind, self.sim.templates.copy(),
                              None if self.sim.weights is None else self.sim.weights.copy(),
                              self.sim.weighted, self.sim.order_p)
        layer = ConvLpSim(np.eye(d), sim, PatchGeometry(1, 1), trainable_filters=False)
        return NetworkSpec([layer], [None], self.beta, self.offsets.copy(), global_beta)


def mlp_forward(x, net: SimNetMlp) -> np.ndarray:
    """``h_r(x) = MEX_beta{u_l^T phi(x, z_l) + b_rl}_l`` for every class ``r``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    s = sim_forward(x[None], net.sim)[0]
    return mex_reduce(s[None, :] + net.offsets, net.beta, axis=-1)


def mlp_predict(x, net: SimNetMlp) -> int:
    return int(_argmax(mlp_forward(x, net)))


# --------------------------------------------------------------------------
# SimNet MLPConv
# --------------------------------------------------------------------------


@dataclass
class MlpConvBlock:
    sim: SimilarityLayer | ConvLpSim
    beta1: float
    offsets: np.ndarray  # (k, n)
    beta2: float

    def __post_init__(self):
        self.offsets = np.array(self.offsets, dtype=np.float64, ndmin=2)
        n = self.sim.out_channels if isinstance(self.sim, ConvLpSim) else self.sim.n_templates
        if self.offsets.shape[1] != n:
            raise ShapeError(f"offsets have {self.offsets.shape[1]} columns, expected {n}")
        if not (np.isfinite(self.beta1) and np.isfinite(self.beta2)):
            raise ValueError("MEX parameters must be finite")
        if not self.beta1 > 0:
            raise ValueError(f"classification MEX requires beta1 > 0, got {self.beta1}")

    def similarity_maps(self, x: np.ndarray) -> np.ndarray:
        """``(N, oh, ow, n)`` similarity maps for a batch."""
        if isinstance(self.sim, ConvLpSim):
            return conv_forward_batch(x, self.sim)[0]
        return sim_forward(extract_patches_batch(x, self.sim.geom), self.sim)

    def to_network(self) -> "NetworkSpec":
        if isinstance(self.sim, ConvLpSim):
            layer = ConvLpSim(self.sim.filters.copy(), self.sim.sim, self.sim.geom,
                              self.sim.trainable_filters)
        else:
            s = self.sim
            sim = SimilarityLayer(s.kind, s.templates.copy(),
                                  None if s.weights is None else s.weights.copy(),
                                  s.weighted, s.order_p)
            layer = ConvLpSim(np.eye(s.dim), sim, s.geom, trainable_filters=False)
        return NetworkSpec([layer], [None], self.beta1, self.offsets.copy(), self.beta2)


def mlpconv_forward(x, block: MlpConvBlock) -> np.ndarray:
    """Class scores: MEX_beta1 over templates per location, then MEX_beta2 over locations."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    xb = x[None] if single else x
    s = block.similarity_maps(xb)
    h = mex_reduce(s[..., None, :] + block.offsets, block.beta1, axis=-1)
    scores = mex_reduce(h, block.beta2, axis=(1, 2))
    return scores[0] if single else scores


# --------------------------------------------------------------------------
# Deep SimNet
# --------------------------------------------------------------------------

GROUPS = ("W", "z", "u", "p", "beta_pool", "beta_class", "beta_global", "b")


def param_group(name: str) -> str:
    """Map a parameter name onto its reporting group."""
    if name.startswith("pool"):
        return "beta_pool"
    if name == "class.beta":
        return "beta_class"
    if name == "global.beta":
        return "beta_global"
    if name == "class.b":
        return "b"
    return name.rsplit(".", 1)[1]


@dataclass
class NetworkSpec:
    layers: list[ConvLpSim]
    pools: list[PoolSpec | None]
    class_beta: float
    offsets: np.ndarray | None  # (k, n_last); None drops the classification offsets
    global_beta: float
    n_classes: int | None = None
    learn_p: bool = True
    learn_class_beta: bool = True
    learn_global_beta: bool = True
    frozen: set = field(default_factory=set)
    input_mean: np.ndarray | None = None  # per-channel mean subtracted from inputs

    def __post_init__(self):
        if len(self.pools) != len(self.layers):
            raise ValueError("pools must list one entry (or None) per layer")
        if self.offsets is not None:
            self.offsets = np.array(self.offsets, dtype=np.float64, ndmin=2)
            self.n_classes = self.offsets.shape[0]
        if self.n_classes is None or self.n_classes < 2:
            raise ValueError("a network needs at least 2 classes")
        if not self.class_beta > 0:
            raise ValueError(f"classification MEX requires beta > 0, got {self.class_beta}")
        for i in range(1, len(self.layers)):
            prev, cur = self.layers[i - 1], self.layers[i]
            if cur.filters.shape[1] != cur.geom.patch_dim(prev.out_channels):
                raise ShapeError(
                    f"layer {i}: filters expect patches of dim {cur.filters.shape[1]}, "
                    f"previous layer yields {prev.out_channels} channels"
                )
        if self.offsets is not None and self.layers and self.offsets.shape[1] != self.layers[-1].out_channels:
            raise ShapeError(
                f"offsets have {self.offsets.shape[1]} columns, last layer has "
                f"{self.layers[-1].out_channels} channels"
            )

    # -- parameters --------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        """All parameters (copies), in declaration order."""
        out: dict[str, np.ndarray] = {}
        for i, (layer, pool) in enumerate(zip(self.layers, self.pools)):
            out[f"layer{i}.W"] = layer.filters.copy()
            out[f"layer{i}.z"] = layer.sim.templates.copy()
            if layer.sim.weighted:
                out[f"layer{i}.u"] = layer.sim.weights.copy()
            if layer.sim.kind == "lp":
                out[f"layer{i}.p"] = np.array(layer.sim.order_p)
            if pool is not None:
                out[f"pool{i}.beta"] = np.array(pool.beta)
        out["class.beta"] = np.array(self.class_beta)
        if self.offsets is not None:
            out["class.b"] = self.offsets.copy()
        out["global.beta"] = np.array(self.global_beta)
        return out

    def set_parameters(self, params: dict) -> None:
        for name, value in params.items():
            value = np.asarray(value, dtype=np.float64)
            if name == "class.beta":
                self.class_beta = float(value)
            elif name == "global.beta":
                self.global_beta = float(value)
            elif name == "class.b":
                self.offsets = value.copy()
            elif name.startswith("pool"):
                self.pools[int(name[4:].split(".")[0])].beta = float(value)
            else:
                idx, key = name[5:].split(".")
                layer = self.layers[int(idx)]
                if key == "W":
                    layer.filters = value.copy()
                elif key == "z":
                    layer.sim.templates = value.copy()
                elif key == "u":
                    layer.sim.weights = value.copy()
                elif key == "p":
                    layer.sim.order_p = float(value)
                else:
                    raise KeyError(name)

    def trainable(self, name: str) -> bool:
        if name in self.frozen:
            return False
        if name.startswith("pool"):
            return self.pools[int(name[4:].split(".")[0])].learned
        if name == "class.beta":
            return self.learn_class_beta
        if name == "global.beta":
            return self.learn_global_beta
        if name.endswith(".W"):
            return self.layers[int(name[5:].split(".")[0])].trainable_filters
        if name.endswith(".p"):
            return self.learn_p
        return True

    def parameter_count(self) -> int:
        """Learned array entries: W, z, u, p and the classification offsets.

        MEX parameters (pooling, classification and global beta) are stored
        alongside but not counted.
        """
        total = 0
        for layer in self.layers:
            total += layer.filters.size + layer.sim.templates.size
            if layer.sim.weighted:
                total += layer.sim.weights.size
            if layer.sim.kind == "lp":
                total += 1
        if self.offsets is not None:
            total += self.offsets.size
        return total

    def output_shapes(self, input_shape) -> list[tuple[int, int, int]]:
        """Spatial/channel shape after each layer (and its pooling)."""
        h, w, c = input_shape
        shapes = []
        for i, (layer, pool) in enumerate(zip(self.layers, self.pools)):
            if layer.filters.shape[1] != layer.geom.patch_dim(c):
                raise ShapeError(
                    f"layer {i}: filters expect patch dim {layer.filters.shape[1]}, "
                    f"input gives {layer.geom.patch_dim(c)}"
                )
            h, w = layer.geom.output_shape(h, w)
            c = layer.out_channels
            if pool is not None:
                h, w = pool.output_shape(h, w)
            shapes.append((h, w, c))
        return shapes

    def copy(self) -> "NetworkSpec":
        import copy

        return copy.deepcopy(self)


@dataclass
class ForwardCache:
    spec: NetworkSpec
    x_shapes: list
    conv_saved: list
    pool_caches: list
    noise: list | None
    final: np.ndarray
    class_in: np.ndarray
    class_out: np.ndarray
    class_w: np.ndarray
    global_w: np.ndarray
    scores: np.ndarray


def _ensure_finite(arr: np.ndarray, where: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite activations at {where}")


def forward_batch(spec: NetworkSpec, x: np.ndarray, noise: list | None = None, keep: bool = False):
    """Scores ``(N, k)`` for a batch; with ``keep`` also a :class:`ForwardCache`.

    ``noise`` optionally gives one multiplicative factor array per layer,
    shaped like that layer's input.
    """
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 4:
        raise ShapeError(f"expected a batch (N, H, W, C), got shape {h.shape}")
    if spec.input_mean is not None:
        h = h - spec.input_mean
    x_shapes, conv_saved, pool_caches = [], [], []
    for i, (layer, pool) in enumerate(zip(spec.layers, spec.pools)):
        if noise is not None:
            h = h * noise[i]
        x_shapes.append(h.shape)
        try:
            h, saved = conv_forward_batch(h, layer)
        except ShapeError as err:
            raise ShapeError(f"layer {i}: {err}") from err
        _ensure_finite(h, f"layer {i} (conv->sim)")
        conv_saved.append(saved if keep else None)
        if pool is not None:
            try:
                h, pc = mex_pool_batch(h, pool)
            except ShapeError as err:
                raise ShapeError(f"layer {i} pooling: {err}") from err
            _ensure_finite(h, f"layer {i} (pooling)")
            pool_caches.append(pc if keep else None)
        else:
            pool_caches.append(None)
    if spec.offsets is not None:
        if h.shape[-1] != spec.offsets.shape[1]:
            raise ShapeError(
                f"classifier: {h.shape[-1]} input channels, offsets expect {spec.offsets.shape[1]}"
            )
        v = h[..., None, :] + spec.offsets
    else:
        v = np.broadcast_to(h[..., None, :], h.shape[:-1] + (spec.n_classes, h.shape[-1]))
    hc, wc = mex_reduce(v, spec.class_beta, axis=-1, return_weights=True)
    _ensure_finite(hc, "classification MEX")
    scores, wg = mex_reduce(hc, spec.global_beta, axis=(1, 2), return_weights=True)
    _ensure_finite(scores, "global pooling")
    if not keep:
        return scores
    return scores, ForwardCache(spec, x_shapes, conv_saved, pool_caches, noise, h, v, hc, wc, wg, scores)


def network_forward(x, spec: NetworkSpec) -> np.ndarray:
    """Class scores for one ``(H, W, C)`` map, or ``(N, k)`` for a batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return forward_batch(spec, x[None])[0]
    return forward_batch(spec, x)


def network_predict(x, spec: NetworkSpec):
    return _argmax(network_forward(x, spec))


def network_backward(cache: ForwardCache | None, upstream) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of ``sum(upstream * scores)``.

    Returns a dict keyed like :meth:`NetworkSpec.parameters` plus ``"input"``.
    """
    if cache is None or not isinstance(cache, ForwardCache) or cache.conv_saved and cache.conv_saved[0] is None:
        raise RuntimeError("network_backward needs the cache from forward_batch(..., keep=True)")
    spec = cache.spec
    g = np.asarray(upstream, dtype=np.float64).reshape(cache.scores.shape)
    grads: dict[str, np.ndarray] = {}

    dhc = g[:, None, None, :] * cache.global_w
    dbeta_global = float(np.sum(g * mex_beta_grad(cache.class_out, spec.global_beta, cache.scores,
                                                  cache.global_w, axis=(1, 2))))
    dv = dhc[..., None] * cache.class_w
    dbeta_class = float(np.sum(dhc * mex_beta_grad(cache.class_in, spec.class_beta, cache.class_out,
                                                   cache.class_w, axis=-1)))
    db = dv.sum(axis=(0, 1, 2))
    dh = dv.sum(axis=-2)

    per_layer = []
    for i in reversed(range(len(spec.layers))):
        layer, pool = spec.layers[i], spec.pools[i]
        dpool = None
        if pool is not None:
            dh, dpool = mex_pool_backward(dh, cache.pool_caches[i])
        dh, lg = conv_backward_batch(dh, cache.x_shapes[i], cache.conv_saved[i], layer)
        if cache.noise is not None:
            dh = dh * cache.noise[i]
        per_layer.append((i, lg, dpool))

    for i, lg, dpool in sorted(per_layer, key=lambda t: t[0]):
        layer = spec.layers[i]
        grads[f"layer{i}.W"] = lg["W"]
        grads[f"layer{i}.z"] = lg["z"]
        if layer.sim.weighted:
            grads[f"layer{i}.u"] = lg["u"]
        if layer.sim.kind == "lp":
            grads[f"layer{i}.p"] = np.array(lg["p"])
        if spec.pools[i] is not None:
            grads[f"pool{i}.beta"] = np.array(dpool)
    grads["class.beta"] = np.array(dbeta_class)
    if spec.offsets is not None:
        grads["class.b"] = db
    grads["global.beta"] = np.array(dbeta_global)
    grads["input"] = dh
    return grads


# --------------------------------------------------------------------------
# construction
# --------------------------------------------------------------------------


@dataclass
class LayerConfig:
    field: int = 5
    channels: int = 8
    whiten_dim: int | None = None  # None keeps the full patch dimension
    stride: int = 1
    pad: int = 0
    kind: str = "lp"
    weighted: bool = True
    p: float = 2.0
    trainable_filters: bool = True
    pool: PoolSpec | None = None


def build_network(input_shape, layers: list[LayerConfig], n_classes: int, *,
                  class_beta: float = 1.0, global_beta: float = 0.0,
                  offsets: bool = True, seed: int = 0) -> NetworkSpec:
    """A randomly initialised network (use pre-training for a data-driven start).

    Filters get orthonormal rows, templates are drawn from N(0, 1) and
    weights start at ``1/d`` so that similarities are O(1).
    """
    rng = np.random.default_rng(seed)
    h, w, c = input_shape
    built, pools = [], []
    for cfg in layers:
        geom = PatchGeometry(cfg.field, cfg.field, cfg.stride, cfg.stride, cfg.pad)
        d_in = geom.patch_dim(c)
        d_out = cfg.whiten_dim or d_in
        if d_out > d_in:
            raise ValueError(f"whiten_dim {d_out} exceeds patch dim {d_in}")
        q, _ = np.linalg.qr(rng.standard_normal((d_in, d_out)))
        z = rng.standard_normal((cfg.channels, d_out))
        u = np.full((cfg.channels, d_out), 1.0 / d_out) if cfg.weighted else None
        sim = SimilarityLayer(cfg.kind, z, u, cfg.weighted, cfg.p)
        built.append(ConvLpSim(q.T.copy(), sim, geom, cfg.trainable_filters))
        pools.append(cfg.pool)
        h, w = geom.output_shape(h, w)
        if cfg.pool is not None:
            h, w = cfg.pool.output_shape(h, w)
        c = cfg.channels
    b = np.zeros((n_classes, c)) if offsets else None
    return NetworkSpec(built, pools, class_beta, b, global_beta, n_classes=n_classes)


def micro_network(seed: int = 0):
    """The small fixed network used for gradient checks.

    6x6x2 input, two conv -> lp-sim layers with 3 and 4 channels, 2x2
    max-like MEX pooling (beta = 60) after the first, 3 classes.  Returns
    ``(spec, input, label)``.  Scales keep every similarity O(1) so that no
    gradient entry is so small that finite differences drown in roundoff.
    """
    rng = np.random.default_rng(seed)
    spec = build_network(
        (6, 6, 2),
        [LayerConfig(field=3, pad=1, channels=3, whiten_dim=5, p=1.5, pool=PoolSpec(2, 2, 2, 2, beta=60.0)),
         LayerConfig(field=2, channels=4, whiten_dim=6, p=2.5)],
        3, class_beta=1.5, global_beta=0.8, seed=seed,
    )
    params = spec.parameters()
    for name, value in params.items():
        if name.endswith(".z"):
            params[name] = 0.5 * rng.standard_normal(value.shape)
        elif name.endswith(".u"):
            params[name] = rng.uniform(0.1, 0.4, value.shape)
        elif name == "class.b":
            params[name] = 0.5 * rng.standard_normal(value.shape)
    spec.set_parameters(params)
    x = rng.uniform(-1.0, 1.0, size=(6, 6, 2))
    return spec, x, int(rng.integers(3))
