"""Kernel-machine view of SimNet MLP / MLPConv.

A SimNet MLP output can be rewritten as

    h_r(x) = sigma(sum_l alpha_rl K(x, z_l)),   alpha_rl = exp(beta b_rl),
    sigma(t) = (1/beta) ln(t / n)

with ``K`` the (weighted) Exponential kernel for linear similarity or the
weighted Generalized Gaussian kernel for lp similarity.  The functions here
evaluate that form directly, in log space, and serve as an independent check
of the network code: nothing in this module calls the MEX or similarity
implementations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, as_tensor3, extract_patches_batch

KERNEL_KINDS = ("exponential", "generalized_gaussian_weighted")


@dataclass
class KernelSpec:
    kind: str
    beta: float
    weights: np.ndarray | None = None  # (n, d) per-template weights; None means u = 1
    p: float = 2.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not self.beta > 0:
            raise ValueError(f"kernel beta must be positive, got {self.beta}")
        if self.weights is not None:
            self.weights = np.array(self.weights, dtype=np.float64, ndmin=2)
            if np.any(self.weights <= 0):
                raise ValueError("kernel weights must be positive")

    @classmethod
    def for_similarity(cls, layer, beta: float) -> "KernelSpec":
        """The kernel matching a :class:`~simnet.similarity.SimilarityLayer`."""
        kind = "exponential" if layer.kind == "linear" else "generalized_gaussian_weighted"
        return cls(kind, beta, layer.weights if layer.weighted else None, layer.order_p)


@dataclass
class KernelMachine:
    templates: np.ndarray  # (n, d)
    coefficients: np.ndarray  # (k, n), alpha_rl > 0
    beta: float

    def __post_init__(self):
        self.templates = np.array(self.templates, dtype=np.float64, ndmin=2)
        self.coefficients = np.array(self.coefficients, dtype=np.float64, ndmin=2)
        if np.any(self.coefficients <= 0):
            raise ValueError("kernel machine coefficients must be positive")
        if self.coefficients.shape[1] != self.templates.shape[0]:
            raise ShapeError("coefficients must have one column per template")

    @property
    def n(self) -> int:
        return self.templates.shape[0]

    @classmethod
    def from_offsets(cls, templates, offsets, beta: float) -> "KernelMachine":
        return cls(templates, np.exp(beta * np.asarray(offsets, dtype=np.float64)), beta)


def _log_kernel(x: np.ndarray, z: np.ndarray, spec: KernelSpec, u: np.ndarray | None) -> np.ndarray:
    # x: (m, d), z: (n, d) -> (m, n) exponents of K
    if u is None:
        u = np.ones_like(z)
    if spec.kind == "exponential":
        return spec.beta * np.einsum("md,nd->mn", x, u * z)
    dist = np.abs(x[:, None, :] - z[None, :, :]) ** spec.p
    return -spec.beta * np.einsum("mnd,nd->mn", dist, u)


def kernel_eval(x, z, spec: KernelSpec, template_index: int = 0) -> float:
    """``K(x, z)``; ``template_index`` picks the weight row when weights are set."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if x.shape != z.shape:
        raise ShapeError(f"kernel arguments differ in dim: {x.size} vs {z.size}")
    u = None if spec.weights is None else spec.weights[template_index][None]
    return float(np.exp(_log_kernel(x[None], z[None], spec, u)[0, 0]))


def _log_sum_exp(a: np.ndarray, axis) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def machine_output(x, machine: KernelMachine, spec: KernelSpec) -> np.ndarray:
    """``h_r = (1/beta) ln((1/n) sum_l alpha_rl K(x, z_l))`` for all classes."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != machine.templates.shape[1]:
        raise ShapeError("input and template dims differ")
    if abs(spec.beta - machine.beta) > 0:
        raise ValueError("kernel and machine must share beta")
    logk = _log_kernel(x, machine.templates, spec, spec.weights)[0]  # (n,)
    terms = np.log(machine.coefficients) + logk[None, :]
    return (_log_sum_exp(terms, axis=1) - np.log(machine.n)) / machine.beta


def _patch_kernel_scores(patches: np.ndarray, templates, log_alpha, spec: KernelSpec) -> np.ndarray:
    logk = _log_kernel(patches, templates, spec, spec.weights)  # (m, n)
    terms = log_alpha[:, None, :] + logk[None, :, :]  # (k, m, n)
    count = patches.shape[0] * templates.shape[0]
    return (_log_sum_exp(terms, axis=(1, 2)) - np.log(count)) / spec.beta


def mlpconv_kernel_equiv(x, block) -> np.ndarray:
    """Class scores of a collapsed (``beta1 == beta2``) MLPConv via patch kernels.

    The MEX over ``n`` templates and ``L`` locations collapses into a single
    MEX over ``n * L`` terms, i.e. a kernel machine whose ``sigma`` uses the
    effective count ``n * L``.
    """
    if block.beta1 != block.beta2:
        raise ValueError("the patch-kernel form requires beta1 == beta2")
    x = as_tensor3(x)
    sim = block.sim
    if hasattr(sim, "filters"):  # ConvLpSim: whiten patches first
        patches = extract_patches_batch(x[None], sim.geom).reshape(-1, sim.filters.shape[1])
        patches = patches @ sim.filters.T
        sim = sim.sim
    else:
        patches = extract_patches_batch(x[None], sim.geom).reshape(-1, sim.dim)
    spec = KernelSpec.for_similarity(sim, block.beta1)
    log_alpha = block.beta1 * np.asarray(block.offsets, dtype=np.float64)
    return _patch_kernel_scores(patches, sim.templates, log_alpha, spec)
