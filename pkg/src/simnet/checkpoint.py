"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SIMN"  u8 version  u32 stage_count
    stage*:  u8 role  u32 body_length  body

Roles and bodies:

    1 layer       u8 kind(0 linear, 1 lp) u8 weighted u8 trainable_filters
                  u32 fh fw sh sw pad d_out d_in n
                  f64 W[d_out*d_in]  f64 z[n*d_out]  [f64 u[n*d_out]]  [f64 p]
    2 pool        u8 global u8 learned u32 wh ww sh sw  f64 beta
    3 classifier  u8 has_offsets u8 learn_p u8 learn_class_beta u8 learn_global_beta
                  u32 k u32 n  f64 class_beta f64 global_beta  [f64 b[k*n]]
    4 frozen      u32 count, then per name: u16 length + utf-8 bytes
    5 input_mean  u32 C  f64 mean[C]

A pool stage directly follows the layer it belongs to.  The ``f64`` blocks
of W, z, u, p and b are the learned parameters; every other byte (including
the MEX betas and the input mean) is header, so
``file size == header_size(spec) + 8 * spec.parameter_count()``.
"""
from __future__ import annotations

import struct

import numpy as np

from .mex import PoolSpec
from .network import NetworkSpec
from .similarity import ConvLpSim, SimilarityLayer
from .tensor import PatchGeometry

MAGIC = b"SIMN"
VERSION = 1
ROLE_LAYER, ROLE_POOL, ROLE_CLASSIFIER, ROLE_FROZEN, ROLE_MEAN = 1, 2, 3, 4, 5

_LAYER_HEAD = struct.Struct("<BBB8I")
_POOL_HEAD = struct.Struct("<BB4Id")
_CLASS_HEAD = struct.Struct("<BBBBIIdd")
_STAGE_HEAD = struct.Struct("<BI")
_FILE_HEAD = struct.Struct("<4sBI")


class CheckpointError(ValueError):
    pass


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _stages(spec: NetworkSpec) -> list[tuple[int, bytes]]:
    stages = []
    for layer, pool in zip(spec.layers, spec.pools):
        sim, g = layer.sim, layer.geom
        d_out, d_in = layer.filters.shape
        body = _LAYER_HEAD.pack(
            1 if sim.kind == "lp" else 0, int(sim.weighted), int(layer.trainable_filters),
            g.field_h, g.field_w, g.stride_h, g.stride_w, g.pad, d_out, d_in, sim.n_templates,
        )
        body += _f64(layer.filters) + _f64(sim.templates)
        if sim.weighted:
            body += _f64(sim.weights)
        if sim.kind == "lp":
            body += _f64([sim.order_p])
        stages.append((ROLE_LAYER, body))
        if pool is not None:
            stages.append((ROLE_POOL, _POOL_HEAD.pack(
                int(pool.global_pool), int(pool.learned), pool.window_h, pool.window_w,
                pool.stride_h, pool.stride_w, pool.beta)))
    has_b = spec.offsets is not None
    n = spec.offsets.shape[1] if has_b else 0
    body = _CLASS_HEAD.pack(int(has_b), int(spec.learn_p), int(spec.learn_class_beta),
                            int(spec.learn_global_beta), spec.n_classes, n,
                            spec.class_beta, spec.global_beta)
    if has_b:
        body += _f64(spec.offsets)
    stages.append((ROLE_CLASSIFIER, body))
    if spec.frozen:
        names = sorted(spec.frozen)
        body = struct.pack("<I", len(names))
        for name in names:
            raw = name.encode("utf-8")
            body += struct.pack("<H", len(raw)) + raw
        stages.append((ROLE_FROZEN, body))
    if spec.input_mean is not None:
        mean = np.asarray(spec.input_mean, dtype=np.float64).reshape(-1)
        stages.append((ROLE_MEAN, struct.pack("<I", mean.size) + _f64(mean)))
    return stages


def to_bytes(spec: NetworkSpec) -> bytes:
    stages = _stages(spec)
    out = [_FILE_HEAD.pack(MAGIC, VERSION, len(stages))]
    for role, body in stages:
        out.append(_STAGE_HEAD.pack(role, len(body)))
        out.append(body)
    return b"".join(out)


def header_size(spec: NetworkSpec) -> int:
    """Bytes of the checkpoint that are not learned-parameter payload."""
    return len(to_bytes(spec)) - 8 * spec.parameter_count()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint: need {n} bytes at offset {self.pos}, "
                f"only {len(self.data) - self.pos} left"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def floats(self, count: int, shape=None) -> np.ndarray:
        arr = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)
        return arr.reshape(shape) if shape is not None else arr


def from_bytes(data: bytes) -> NetworkSpec:
    r = _Reader(data)
    magic, version, count = r.unpack(_FILE_HEAD)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0 (expected {MAGIC!r})")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    layers, pools = [], []
    classifier = None
    frozen: set = set()
    mean = None
    for _ in range(count):
        start = r.pos
        role, length = r.unpack(_STAGE_HEAD)
        body_start = r.pos
        if role == ROLE_LAYER:
            kind, weighted, trainable, fh, fw, sh, sw, pad, d_out, d_in, n = r.unpack(_LAYER_HEAD)
            W = r.floats(d_out * d_in, (d_out, d_in))
            z = r.floats(n * d_out, (n, d_out))
            u = r.floats(n * d_out, (n, d_out)) if weighted else None
            p = float(r.floats(1)[0]) if kind == 1 else 2.0
            sim = SimilarityLayer("lp" if kind == 1 else "linear", z, u, bool(weighted), p)
            layers.append(ConvLpSim(W, sim, PatchGeometry(fh, fw, sh, sw, pad), bool(trainable)))
            pools.append(None)
        elif role == ROLE_POOL:
            if not layers or pools[-1] is not None:
                raise CheckpointError(f"pool stage at offset {start} does not follow a layer")
            glob, learned, wh, ww, psh, psw, beta = r.unpack(_POOL_HEAD)
            pools[-1] = PoolSpec(wh, ww, psh, psw, beta, bool(glob), bool(learned))
        elif role == ROLE_CLASSIFIER:
            has_b, learn_p, lcb, lgb, k, n, cbeta, gbeta = r.unpack(_CLASS_HEAD)
            b = r.floats(k * n, (k, n)) if has_b else None
            classifier = (b, k, bool(learn_p), bool(lcb), bool(lgb), cbeta, gbeta)
        elif role == ROLE_FROZEN:
            (nnames,) = struct.unpack("<I", r.take(4))
            for _ in range(nnames):
                (ln,) = struct.unpack("<H", r.take(2))
                frozen.add(r.take(ln).decode("utf-8"))
        elif role == ROLE_MEAN:
            (c,) = struct.unpack("<I", r.take(4))
            mean = r.floats(c)
        else:
            raise CheckpointError(f"unknown stage role {role} at offset {start}")
        if r.pos - body_start != length:
            raise CheckpointError(f"stage at offset {start} declares {length} bytes, parsed {r.pos - body_start}")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after offset {r.pos}")
    if classifier is None:
        raise CheckpointError("checkpoint has no classifier stage")
    b, k, learn_p, lcb, lgb, cbeta, gbeta = classifier
    return NetworkSpec(layers, pools, cbeta, b, gbeta, n_classes=k, learn_p=learn_p,
                       learn_class_beta=lcb, learn_global_beta=lgb, frozen=frozen, input_mean=mean)


def save_checkpoint(spec: NetworkSpec, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(spec))


def load_checkpoint(path) -> NetworkSpec:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
