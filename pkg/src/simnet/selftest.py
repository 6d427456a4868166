"""Quick built-in property checks run by ``simnet selftest``."""
from __future__ import annotations

import io

import numpy as np

from .checkpoint import from_bytes, to_bytes
from .kernels import KernelMachine, KernelSpec, machine_output
from .mex import mex
from .network import MlpConvBlock, SimNetMlp, micro_network, mlp_forward, mlpconv_forward
from .pretrain import GGMixture, component_log_joint, mixture_to_init
from .similarity import SimilarityLayer, sim_forward
from .tensor import PatchGeometry, extract_patches
from .training import grad_check


def _mex_algebra(rng) -> bool:
    for _ in range(200):
        v = rng.normal(size=rng.integers(1, 10)) * 5
        beta = rng.uniform(-20, 20)
        m = mex(v, beta)
        if not v.min() - 1e-9 <= m <= v.max() + 1e-9:
            return False
        if abs(mex(v + 3.0, beta) - m - 3.0) > 1e-9:
            return False
        grid = rng.normal(size=(3, 4))
        if abs(beta) >= 1e-3:
            nested = mex([mex(row, beta) for row in grid], beta)
            if abs(nested - mex(grid.ravel(), beta)) > 1e-9:
                return False
    return True


def _kernel_identity(rng) -> bool:
    for kind in ("linear", "lp"):
        for _ in range(50):
            n, d, k = rng.integers(1, 6), rng.integers(1, 8), rng.integers(2, 4)
            layer = SimilarityLayer(kind, rng.normal(size=(n, d)), rng.uniform(0.2, 2, (n, d)), True,
                                    rng.uniform(0.5, 3))
            beta = rng.uniform(0.1, 3)
            b = rng.normal(size=(k, n))
            x = rng.normal(size=d)
            net = SimNetMlp(layer, beta, b)
            km = KernelMachine.from_offsets(layer.templates, b, beta)
            if np.max(np.abs(machine_output(x, km, KernelSpec.for_similarity(layer, beta)) - mlp_forward(x, net))) > 1e-9:
                return False
    return True


def _collapse(rng) -> bool:
    for _ in range(20):
        layer = SimilarityLayer("lp", rng.normal(size=(3, 4)), rng.uniform(0.2, 1, (3, 4)), True, 1.5,
                                PatchGeometry(2, 2))
        beta = rng.uniform(0.2, 3)
        block = MlpConvBlock(layer, beta, rng.normal(size=(2, 3)), beta)
        x = rng.normal(size=(4, 4, 1))
        s = sim_forward(extract_patches(x, layer.geom), layer)  # (L, n)
        flat = np.array([mex((s + block.offsets[r]).ravel(), beta) for r in range(2)])
        if np.max(np.abs(flat - mlpconv_forward(x, block))) > 1e-9:
            return False
    return True


def _heat_map(rng) -> bool:
    n, d = 3, 4
    pri = rng.uniform(0.2, 1, n)
    mix = GGMixture(pri / pri.sum(), rng.normal(size=(n, d)), rng.uniform(0.3, 2, (n, d)), rng.uniform(0.5, 3))
    init = mixture_to_init(mix)
    layer = SimilarityLayer("lp", init.templates, init.weights, True, init.p)
    y = rng.normal(size=(20, d))
    return np.max(np.abs(sim_forward(y, layer) + init.biases - component_log_joint(y, mix))) <= 1e-10


def _checkpoint(rng) -> bool:
    spec, _, _ = micro_network(int(rng.integers(1000)))
    return to_bytes(from_bytes(to_bytes(spec))) == to_bytes(spec)


def _gradcheck(rng) -> bool:
    spec, x, label = micro_network(0)
    return grad_check(spec, x, label).passed


CHECKS = [
    ("mex algebra", _mex_algebra),
    ("kernel identity", _kernel_identity),
    ("mlpconv collapse", _collapse),
    ("heat-map identity", _heat_map),
    ("checkpoint round trip", _checkpoint),
    ("gradient check", _gradcheck),
]


def run_selftest(seed: int = 0, out=None) -> bool:
    out = out or io.StringIO()
    ok = True
    for name, check in CHECKS:
        passed = bool(check(np.random.default_rng(seed)))
        ok &= passed
        out.write(f"{'PASS' if passed else 'FAIL'}  {name}\n")
    return ok
