"""Dataset readers and seeded synthetic tasks.

Images are returned as float64 arrays ``(N, H, W, C)`` scaled to [0, 1],
labels as int64 arrays.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CIFAR_SIDE = 32
CIFAR_PIXELS = 3 * CIFAR_SIDE * CIFAR_SIDE


class DatasetError(ValueError):
    pass


def read_cifar_binary(path, n_classes: int = 10, label_bytes: int = 1):
    """Parse a CIFAR binary batch file.

    Each record is ``label_bytes`` label bytes followed by 3072 pixel bytes
    (R, G, B planes, each row-major 32x32).  With ``label_bytes=2``
    (CIFAR-100) the second byte, the fine label, is used.
    """
    raw = Path(path).read_bytes()
    rec = label_bytes + CIFAR_PIXELS
    if len(raw) == 0:
        raise DatasetError(f"{path}: empty file")
    if len(raw) % rec:
        full = len(raw) // rec
        raise DatasetError(
            f"{path}: {len(raw)} bytes is not a whole number of {rec}-byte records; "
            f"trailing partial record starts at byte offset {full * rec}"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, label_bytes - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        i = int(bad[0])
        raise DatasetError(
            f"{path}: label {labels[i]} >= class count {n_classes} in record {i} "
            f"(byte offset {i * rec + label_bytes - 1})"
        )
    pixels = arr[:, label_bytes:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
    return pixels.astype(np.float64) / 255.0, labels


def write_cifar_binary(path, images_u8: np.ndarray, labels) -> None:
    """Inverse of :func:`read_cifar_binary` for 1-byte labels (fixtures, demos)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    planes = images_u8.transpose(0, 3, 1, 2).reshape(images_u8.shape[0], -1)
    recs = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], planes], axis=1)
    Path(path).write_bytes(recs.tobytes())


_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    """Read an IDX array (the MNIST container: magic, big-endian dims, data)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DatasetError(f"{path}: not an IDX file (bad magic at byte offset 0)")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise DatasetError(f"{path}: unknown IDX element type 0x{code:02x} at byte offset 2")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DatasetError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    dtype = np.dtype(_IDX_TYPES[code])
    need = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - head != need:
        raise DatasetError(
            f"{path}: expected {need} data bytes after the header, found {len(raw) - head} "
            f"(data starts at byte offset {head})"
        )
    return np.frombuffer(raw, dtype=dtype, offset=head).reshape(dims)


def read_idx_dataset(images_path, labels_path, n_classes: int):
    imgs = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64).reshape(-1)
    if imgs.ndim == 3:
        imgs = imgs[..., None]
    if imgs.ndim != 4 or imgs.shape[0] != labels.size:
        raise DatasetError(f"{images_path}: image/label count mismatch or bad rank {imgs.shape}")
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        raise DatasetError(f"{labels_path}: label {labels[bad[0]]} >= class count {n_classes} in record {bad[0]}")
    scale = 255.0 if imgs.dtype == np.uint8 else 1.0
    return imgs.astype(np.float64) / scale, labels


# --------------------------------------------------------------------------
# synthetic tasks
# --------------------------------------------------------------------------


def synthetic_separable(n: int = 200, seed: int = 0, margin: float = 0.2):
    """Two linearly separable 2-D classes as 1x1x2 'images'.

    Points are uniform on [-1, 1]^2 with a random separating line through
    the origin; points closer than ``margin`` to the line are resampled.
    """
    rng = np.random.default_rng(seed)
    angle = rng.uniform(0, np.pi)
    normal = np.array([np.cos(angle), np.sin(angle)])
    pts = []
    while len(pts) < n:
        cand = rng.uniform(-1, 1, size=(2 * n, 2))
        cand = cand[np.abs(cand @ normal) >= margin]
        pts.extend(cand[: n - len(pts)])
    x = np.asarray(pts)
    labels = (x @ normal > 0).astype(np.int64)
    return x.reshape(n, 1, 1, 2), labels


def synthetic_images(n: int = 400, seed: int = 0, size: int = 12, channels: int = 3, noise: float = 0.25):
    """Two-class textured images: class 0 has horizontal, class 1 vertical stripes.

    Stripe period, phase and colour vary per image; pixels are clipped to [0, 1].
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    yy, xx = np.mgrid[0:size, 0:size]
    images = np.empty((n, size, size, channels))
    for i in range(n):
        period = rng.uniform(3.0, 6.0)
        phase = rng.uniform(0, 2 * np.pi)
        coord = yy if labels[i] == 0 else xx
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * coord / period + phase)
        colour = rng.uniform(0.3, 1.0, size=channels)
        img = wave[..., None] * colour + noise * rng.standard_normal((size, size, channels))
        images[i] = np.clip(img, 0.0, 1.0)
    return images, labels.astype(np.int64)


# --------------------------------------------------------------------------
# on-disk description
# --------------------------------------------------------------------------


@dataclass
class DatasetOnDisk:
    format: str  # cifar_binary | idx_raster | synthetic
    paths: list = field(default_factory=list)
    label_paths: list = field(default_factory=list)  # idx_raster only
    n_classes: int = 10
    image_shape: tuple = (32, 32, 3)
    label_bytes: int = 1
    synthetic_task: str = "separable"
    synthetic_size: int = 200
    seed: int = 0


def load_dataset(desc: DatasetOnDisk):
    """Load ``(images, labels)`` for a dataset description."""
    if desc.format == "synthetic":
        if desc.synthetic_task == "separable":
            return synthetic_separable(desc.synthetic_size, desc.seed)
        if desc.synthetic_task == "images":
            h, _, c = desc.image_shape
            return synthetic_images(desc.synthetic_size, desc.seed, size=h, channels=c)
        raise DatasetError(f"unknown synthetic task {desc.synthetic_task!r}")
    if not desc.paths:
        raise DatasetError("no data files given")
    parts = []
    if desc.format == "cifar_binary":
        parts = [read_cifar_binary(p, desc.n_classes, desc.label_bytes) for p in desc.paths]
    elif desc.format == "idx_raster":
        if len(desc.label_paths) != len(desc.paths):
            raise DatasetError("idx_raster needs one label file per image file")
        parts = [read_idx_dataset(p, q, desc.n_classes) for p, q in zip(desc.paths, desc.label_paths)]
    else:
        raise DatasetError(f"unknown dataset format {desc.format!r}")
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    if tuple(images.shape[1:]) != tuple(desc.image_shape):
        raise DatasetError(f"images have shape {images.shape[1:]}, expected {tuple(desc.image_shape)}")
    return images, labels


def split_holdout(images, labels, holdout: int):
    """Hold out the last ``holdout`` records for validation."""
    if holdout <= 0:
        return (images, labels), None
    if holdout >= images.shape[0]:
        raise DatasetError(f"holdout {holdout} leaves no training data")
    return (images[:-holdout], labels[:-holdout]), (images[-holdout:], labels[-holdout:])


def select_classes(images, labels, classes, limit: int = 0):
    """Keep only ``classes`` (relabelled 0..k-1 in the given order), optionally the first ``limit``."""
    classes = list(classes)
    mask = np.isin(labels, classes)
    images, labels = images[mask], labels[mask]
    remap = {c: i for i, c in enumerate(classes)}
    labels = np.array([remap[int(v)] for v in labels], dtype=np.int64)
    if limit:
        images, labels = images[:limit], labels[:limit]
    return images, labels
