"""Dense feature-map helpers and patch extraction.

Feature maps are plain ``float64`` numpy arrays laid out ``(height, width,
channels)``; batches add a leading sample axis.  Patches are flattened in
``(row, col, channel)`` order, so a template of length ``fh * fw * C`` reads
as a small ``fh x fw x C`` image.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


def as_tensor3(x) -> np.ndarray:
    """Validate and convert ``x`` to a finite float64 ``(H, W, C)`` array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"expected an (H, W, C) array, got shape {arr.shape}")
    if arr.size == 0:
        raise ShapeError("empty feature map")
    if not np.all(np.isfinite(arr)):
        raise ValueError("feature map contains non-finite entries")
    return arr


@dataclass(frozen=True)
class PatchGeometry:
    field_h: int
    field_w: int
    stride_h: int = 1
    stride_w: int = 1
    pad: int = 0

    def __post_init__(self):
        for name in ("field_h", "field_w", "stride_h", "stride_w"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.pad < 0:
            raise ValueError(f"pad must be >= 0, got {self.pad}")

    @classmethod
    def square(cls, field: int, stride: int = 1, pad: int = 0) -> "PatchGeometry":
        return cls(field, field, stride, stride, pad)

    def output_shape(self, height: int, width: int) -> tuple[int, int]:
        span_h = height + 2 * self.pad - self.field_h
        span_w = width + 2 * self.pad - self.field_w
        if span_h < 0 or span_w < 0:
            raise ShapeError(
                f"{self.field_h}x{self.field_w} field (pad {self.pad}) does not fit "
                f"a {height}x{width} input"
            )
        return span_h // self.stride_h + 1, span_w // self.stride_w + 1

    def patch_dim(self, channels: int) -> int:
        return self.field_h * self.field_w * channels


def _pad_batch(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def extract_patches_batch(x: np.ndarray, geom: PatchGeometry) -> np.ndarray:
    """Patches of a batch ``(N, H, W, C)`` as an ``(N, oh, ow, fh*fw*C)`` array."""
    n, h, w, c = x.shape
    oh, ow = geom.output_shape(h, w)
    xp = _pad_batch(x, geom.pad)
    win = sliding_window_view(xp, (geom.field_h, geom.field_w), axis=(1, 2))
    # win: (N, H', W', C, fh, fw) -> stride, then reorder to (row, col, channel)
    win = win[:, : (oh - 1) * geom.stride_h + 1 : geom.stride_h,
              : (ow - 1) * geom.stride_w + 1 : geom.stride_w]
    win = win.transpose(0, 1, 2, 4, 5, 3)
    return win.reshape(n, oh, ow, geom.field_h * geom.field_w * c)


def fold_patches_batch(cols: np.ndarray, input_shape, geom: PatchGeometry) -> np.ndarray:
    """Adjoint of :func:`extract_patches_batch`: scatter-add patch gradients."""
    n, h, w, c = input_shape
    oh, ow = geom.output_shape(h, w)
    cols = cols.reshape(n, oh, ow, geom.field_h, geom.field_w, c)
    out = np.zeros((n, h + 2 * geom.pad, w + 2 * geom.pad, c))
    sh, sw = geom.stride_h, geom.stride_w
    for a in range(geom.field_h):
        for b in range(geom.field_w):
            out[:, a : a + sh * (oh - 1) + 1 : sh, b : b + sw * (ow - 1) + 1 : sw, :] += cols[:, :, :, a, b, :]
    if geom.pad:
        out = out[:, geom.pad : geom.pad + h, geom.pad : geom.pad + w, :]
    return out


def extract_patches(x, geom: PatchGeometry) -> np.ndarray:
    """One row per output location (raster order), each a flattened patch.

    >>> extract_patches(np.arange(3.0).reshape(1, 1, 3), PatchGeometry(1, 1)).tolist()
    [[0.0, 1.0, 2.0]]
    """
    x = as_tensor3(x)
    cols = extract_patches_batch(x[None], geom)
    return np.ascontiguousarray(cols.reshape(-1, cols.shape[-1]))


def _check_same(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def add(a, b):
    a, b = _check_same(a, b)
    return a + b


def sub(a, b):
    a, b = _check_same(a, b)
    return a - b


def hadamard(a, b):
    a, b = _check_same(a, b)
    return a * b


def scale(a, factor: float):
    return np.asarray(a, dtype=np.float64) * float(factor)
