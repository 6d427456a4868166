"""Unsupervised initialisation of conv -> lp-sim layers.

Per layer: estimate a whitening matrix from input patches (PCA, optionally
rotated by fixed-point ICA), fit a mixture of Generalized Gaussians with a
shared shape to the whitened patches by EM, then install

    z = mu,   u = alpha ** -shape,   p = shape,   b = c_l

so that each similarity channel (plus bias) equals the log joint density of
its mixture component.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mex import mex_pool_batch
from .similarity import conv_forward_batch
from .tensor import ShapeError, extract_patches_batch

EPS_EIG = 1e-10
ALPHA_FLOOR = 1e-6
SHAPE_RANGE = (0.3, 4.0)
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class DegenerateMixtureError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# whitening
# --------------------------------------------------------------------------


@dataclass
class WhiteningModel:
    mean: np.ndarray
    W: np.ndarray  # (d_out, d_in)
    eigenvalues: np.ndarray  # full covariance spectrum, descending

    @property
    def retained_dims(self) -> int:
        return self.W.shape[0]

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.W.T


def _fastica_rotation(y: np.ndarray, rng, max_iter: int = 200, tol: float = 1e-6) -> np.ndarray:
    """Deflationary fixed-point ICA (log-cosh contrast) on whitened rows ``y``."""
    d = y.shape[1]
    rot = np.zeros((d, d))
    for c in range(d):
        w = rng.standard_normal(d)
        w /= np.linalg.norm(w)
        for _ in range(max_iter):
            g = np.tanh(y @ w)
            w_new = (y * g[:, None]).mean(axis=0) - (1.0 - g**2).mean() * w
            w_new -= rot[:c].T @ (rot[:c] @ w_new)
            w_new /= np.linalg.norm(w_new)
            done = abs(abs(w_new @ w) - 1.0) < tol
            w = w_new
            if done:
                break
        rot[c] = w
    # re-orthonormalise so the rotation keeps the covariance at identity
    u, _, vt = np.linalg.svd(rot)
    return u @ vt


def fit_whitening(patches, d_out: int | None = None, mode: str = "pca", seed: int = 0) -> WhiteningModel:
    """Whitening matrix for the rows of ``patches``.

    Covariances use the 1/N normalisation.  ``pca`` keeps the ``d_out``
    leading principal directions scaled to unit variance; ``ica`` further
    rotates them towards independent coordinates.
    """
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("patches must be a 2-D (rows, dim) matrix")
    n, d = x.shape
    d_out = d if d_out is None else int(d_out)
    if not 1 <= d_out <= d:
        raise ValueError(f"d_out must be in [1, {d}], got {d_out}")
    if n < d + 1:
        raise ValueError(f"need at least {d + 1} patches to whiten dim {d}, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("patches contain non-finite values")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    top = np.maximum(evals[:d_out], EPS_EIG)
    W = (evecs[:, :d_out] / np.sqrt(top)).T
    if mode == "ica":
        W = _fastica_rotation(xc @ W.T, np.random.default_rng(seed)) @ W
    elif mode != "pca":
        raise ValueError(f"unknown whitening mode {mode!r}")
    return WhiteningModel(mean, W, evals)


# --------------------------------------------------------------------------
# Generalized Gaussian mixture
# --------------------------------------------------------------------------


@dataclass
class GGMixture:
    priors: np.ndarray  # (n,)
    means: np.ndarray  # (n, d)
    scales: np.ndarray  # (n, d)
    shape: float
    trace: list = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self):
        self.priors = np.asarray(self.priors, dtype=np.float64).reshape(-1)
        self.means = np.array(self.means, dtype=np.float64, ndmin=2)
        self.scales = np.array(self.scales, dtype=np.float64, ndmin=2)
        if self.means.shape != self.scales.shape or self.means.shape[0] != self.priors.size:
            raise ShapeError("priors, means and scales disagree on component count or dim")
        if np.any(self.priors < 0) or abs(self.priors.sum() - 1.0) > 1e-12:
            raise ValueError("priors must lie on the simplex")
        if np.any(self.scales <= 0):
            raise ValueError("scales must be positive")
        if not self.shape > 0:
            raise ValueError("shape must be positive")

    @property
    def n_components(self) -> int:
        return self.priors.size

    def log_constants(self) -> np.ndarray:
        """``c_l = log(lambda_l prod_t shape / (2 alpha_lt Gamma(1/shape)))``."""
        b = self.shape
        per_coord = math.log(b) - math.log(2.0) - math.lgamma(1.0 / b)
        with np.errstate(divide="ignore"):
            logp = np.log(self.priors)
        return logp + self.means.shape[1] * per_coord - np.log(self.scales).sum(axis=1)


def component_log_joint(y: np.ndarray, mix: GGMixture) -> np.ndarray:
    """``log P(y and comp. l)`` for rows ``y`` ``(N, d)`` -> ``(N, n)``."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != mix.means.shape[1]:
        raise ShapeError(f"dim {y.shape[-1]} != mixture dim {mix.means.shape[1]}")
    out = np.empty((y.shape[0], mix.n_components))
    for l in range(mix.n_components):
        dev = (np.abs(y - mix.means[l]) / mix.scales[l]) ** mix.shape
        out[:, l] = -dev.sum(axis=1)
    return out + mix.log_constants()


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return m[:, 0] + np.log(np.exp(a - m).sum(axis=1))


def ggm_log_density(y, mix: GGMixture):
    """Total log-density of one vector and the per-component joint log-densities."""
    y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    joint = component_log_joint(y, mix)
    return float(_logsumexp_rows(joint)[0]), joint[0]


def responsibilities(y, mix: GGMixture):
    joint = component_log_joint(y, mix)
    total = _logsumexp_rows(joint)
    return np.exp(joint - total[:, None]), total


def _seed_means(y: np.ndarray, n: int, rng) -> np.ndarray:
    # k-means++ style: spread initial means over distinct data points
    idx = [int(rng.integers(y.shape[0]))]
    d2 = ((y - y[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, n):
        total = d2.sum()
        j = int(rng.choice(y.shape[0], p=d2 / total)) if total > 0 else int(rng.integers(y.shape[0]))
        idx.append(j)
        d2 = np.minimum(d2, ((y - y[j]) ** 2).sum(axis=1))
    return y[idx].copy()


def _weighted_median(y: np.ndarray, r: np.ndarray) -> np.ndarray:
    order = np.argsort(y, axis=0, kind="stable")  # (N, d)
    ys = np.take_along_axis(y, order, axis=0)
    out = np.empty((r.shape[1], y.shape[1]))
    for l in range(r.shape[1]):
        rs = r[:, l][order]  # (N, d)
        cum = np.cumsum(rs, axis=0)
        pos = np.argmax(cum >= 0.5 * cum[-1], axis=0)
        out[l] = ys[pos, np.arange(y.shape[1])]
    return out


def _golden_means(y, r, shape, lo, hi, iters: int = 60) -> np.ndarray:
    """Coordinate-wise minimiser of sum_i r_il |y_it - mu|^shape on [lo, hi]."""
    n = r.shape[1]
    a = np.broadcast_to(lo, (n, y.shape[1])).copy()
    b = np.broadcast_to(hi, (n, y.shape[1])).copy()

    def cost(mu):
        out = np.empty_like(mu)
        for l in range(n):
            out[l] = r[:, l] @ (np.abs(y - mu[l]) ** shape)
        return out

    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = cost(c), cost(d)
    for _ in range(iters):
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        c_new = b - _GOLDEN * (b - a)
        d_new = a + _GOLDEN * (b - a)
        c, d = c_new, d_new
        fc, fd = cost(c), cost(d)
    return 0.5 * (a + b)


def _mean_cost(y, r, mu, shape):
    return np.stack([r[:, l] @ (np.abs(y - mu[l]) ** shape) for l in range(mu.shape[0])])


def _update_means(y, r, shape, current):
    if shape == 2.0:
        return (r.T @ y) / r.sum(axis=0)[:, None]
    if shape == 1.0:
        return _weighted_median(y, r)
    # below shape 1 the cost is not unimodal, so keep any coordinate the search made worse
    new = _golden_means(y, r, shape, y.min(axis=0), y.max(axis=0))
    worse = _mean_cost(y, r, new, shape) > _mean_cost(y, r, current, shape)
    return np.where(worse, current, new)


def _update_scales(y, r, means, shape, nk):
    out = np.empty_like(means)
    for l in range(means.shape[0]):
        out[l] = shape * (r[:, l] @ (np.abs(y - means[l]) ** shape)) / nk[l]
    return np.maximum(out ** (1.0 / shape), ALPHA_FLOOR)


def _log_likelihood(y, mix) -> float:
    return float(_logsumexp_rows(component_log_joint(y, mix)).sum())


def _best_shape(y, r, means, priors, nk, iters: int = 40) -> float:
    """Golden-section search of the profile log-likelihood over the shape."""

    def ll(b):
        scales = _update_scales(y, r, means, b, nk)
        return _log_likelihood(y, GGMixture(priors, means, scales, b))

    a, b = SHAPE_RANGE
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = ll(c), ll(d)
    for _ in range(iters):
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = ll(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = ll(d)
    return float(0.5 * (a + b))


def ggm_fit_em(patches, n_components: int, shape: float | str = 2.0, *, max_iter: int = 300,
               tol: float = 1e-7, seed: int = 0, max_reseeds: int = 3) -> GGMixture:
    """Fit a shared-shape Generalized Gaussian mixture by EM.

    ``shape`` is either a fixed positive value or ``"learned"`` (searched in
    [0.3, 4] once per iteration).  Iterates until the log-likelihood gains
    less than ``tol * |LL|`` or ``max_iter`` iterations; ``tol=0`` runs all
    iterations.  The per-iteration log-likelihoods end up in ``.trace``.

    >>> y = np.array([[-1.0], [1.0], [-1.0], [1.0]])
    >>> mix = ggm_fit_em(y, 1, 2.0)
    >>> float(mix.means[0, 0]), round(float(mix.scales[0, 0]) ** 2, 12)
    (0.0, 2.0)
    """
    y = np.asarray(patches, dtype=np.float64)
    if y.ndim != 2:
        raise ShapeError("patches must be a 2-D (rows, dim) matrix")
    if not np.all(np.isfinite(y)):
        raise ValueError("patches contain non-finite values")
    learned = shape == "learned"
    b = 2.0 if learned else float(shape)
    if not b > 0:
        raise ValueError("shape must be positive")
    if np.unique(y, axis=0).shape[0] < n_components:
        raise ValueError(f"need at least {n_components} distinct patches")
    rng = np.random.default_rng(seed)
    n, d = y.shape

    means = _seed_means(y, n_components, rng)
    base_scale = np.maximum((b * np.mean(np.abs(y - y.mean(axis=0)) ** b, axis=0)) ** (1.0 / b), ALPHA_FLOOR)
    scales = np.tile(base_scale, (n_components, 1))
    priors = np.full(n_components, 1.0 / n_components)
    reseeds = np.zeros(n_components, dtype=int)
    trace: list[float] = []

    mix = GGMixture(priors, means, scales, b)
    for _ in range(max_iter):
        r, total = responsibilities(y, mix)
        ll = float(total.sum())
        if tol > 0 and trace and ll - trace[-1] < tol * abs(ll):
            trace.append(ll)
            break
        trace.append(ll)
        nk = r.sum(axis=0)
        for l in np.flatnonzero(nk < 1e-8):
            reseeds[l] += 1
            if reseeds[l] > max_reseeds:
                raise DegenerateMixtureError(f"component {l} stayed empty after {max_reseeds} re-seeds")
            mix.means[l] = y[int(rng.integers(n))]
            mix.scales[l] = base_scale
            r[:, l] = 1.0 / n_components
            r /= r.sum(axis=1, keepdims=True)
            nk = r.sum(axis=0)
        priors = nk / n
        priors /= priors.sum()
        means = _update_means(y, r, b, mix.means)
        if learned:
            b = _best_shape(y, r, means, priors, nk)
        scales = _update_scales(y, r, means, b, nk)
        mix = GGMixture(priors, means, scales, b)
    mix.trace = trace
    return mix


@dataclass
class InitBundle:
    templates: np.ndarray
    weights: np.ndarray
    p: float
    biases: np.ndarray


def mixture_to_init(mix: GGMixture) -> InitBundle:
    return InitBundle(
        templates=mix.means.copy(),
        weights=mix.scales ** (-mix.shape),
        p=float(mix.shape),
        biases=mix.log_constants(),
    )


def sample_gg_mixture(n: int, priors, means, scales, shape: float, seed: int = 0) -> np.ndarray:
    """Draw ``n`` rows from a Generalized Gaussian mixture (used by tests and demos)."""
    rng = np.random.default_rng(seed)
    priors = np.asarray(priors, dtype=np.float64)
    means = np.array(means, dtype=np.float64, ndmin=2)
    scales = np.array(scales, dtype=np.float64, ndmin=2)
    comp = rng.choice(priors.size, size=n, p=priors)
    mag = rng.gamma(1.0 / shape, 1.0, size=(n, means.shape[1])) ** (1.0 / shape)
    sign = rng.choice([-1.0, 1.0], size=(n, means.shape[1]))
    return means[comp] + scales[comp] * sign * mag


# --------------------------------------------------------------------------
# layer-by-layer sweep
# --------------------------------------------------------------------------


@dataclass
class PretrainOptions:
    n_patches: int = 100_000
    subsample: int | None = None  # images used for patch sampling; None = all
    shape: float | str = 2.0
    whitening: str = "pca"
    max_iter: int = 300
    tol: float = 1e-7
    seed: int = 0


@dataclass
class LayerReport:
    index: int
    n_patches: int
    spectrum: np.ndarray
    trace: list
    shape: float


def _sample_patches(reps: np.ndarray, layer, cap: int, rng) -> np.ndarray:
    cols = extract_patches_batch(reps, layer.geom)
    flat = cols.reshape(-1, cols.shape[-1])
    if flat.shape[0] > cap:
        flat = flat[np.sort(rng.choice(flat.shape[0], size=cap, replace=False))]
    return np.ascontiguousarray(flat)


def pretrain_network(images, spec, options: PretrainOptions | None = None):
    """Initialise every layer of ``spec`` (a copy) from unlabeled ``images``.

    Returns ``(initialised_spec, reports)``.  The biases ``c_l`` of the last
    layer become the classification offsets (identical for every class);
    biases of interior layers are dropped.
    """
    options = options or PretrainOptions()
    spec = spec.copy()
    rng = np.random.default_rng(options.seed)
    reps = np.asarray(images, dtype=np.float64)
    if spec.input_mean is not None:
        reps = reps - spec.input_mean
    if options.subsample is not None and reps.shape[0] > options.subsample:
        reps = reps[np.sort(rng.choice(reps.shape[0], size=options.subsample, replace=False))]
    reports = []
    for i, (layer, pool) in enumerate(zip(spec.layers, spec.pools)):
        try:
            patches = _sample_patches(reps, layer, options.n_patches, rng)
            wm = fit_whitening(patches, layer.filters.shape[0], options.whitening, seed=options.seed + i)
            mix = ggm_fit_em(wm.transform(patches), layer.out_channels, options.shape,
                             max_iter=options.max_iter, tol=options.tol, seed=options.seed + i)
        except (ValueError, RuntimeError) as err:
            raise type(err)(f"layer {i}: {err}") from err
        bundle = mixture_to_init(mix)
        layer.filters = wm.W.copy()
        # the layer sees W x, whitened data is W (x - mean): shift templates to match
        layer.sim.templates = bundle.templates + wm.W @ wm.mean
        if layer.sim.weighted:
            layer.sim.weights = bundle.weights
        if layer.sim.kind == "lp":
            layer.sim.order_p = bundle.p
        if i == len(spec.layers) - 1 and spec.offsets is not None:
            spec.offsets = np.tile(bundle.biases, (spec.n_classes, 1))
        reports.append(LayerReport(i, patches.shape[0], wm.eigenvalues, list(mix.trace), mix.shape))
        reps, _ = conv_forward_batch(reps, layer)
        if pool is not None:
            reps, _ = mex_pool_batch(reps, pool)
    return spec, reports


def format_report(reports: list[LayerReport]) -> str:
    lines = []
    for rep in reports:
        spec_txt = " ".join(f"{v:.4g}" for v in rep.spectrum)
        trace_txt = " ".join(f"{v:.6f}" for v in rep.trace)
        lines += [
            f"[layer {rep.index}]",
            f"patches = {rep.n_patches}",
            f"shape_p = {rep.shape:.6f}",
            f"em_iterations = {len(rep.trace)}",
            f"log_likelihood = {trace_txt}",
            f"whitening_spectrum = {spec_txt}",
            "",
        ]
    return "\n".join(lines)
