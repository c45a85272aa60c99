"""Dense float32 array primitives.

Tensors are plain ``numpy.ndarray`` objects in row-major N x C x H x W
layout. The helpers here validate shapes and keep results in float32 unless
a float64 input is passed in, which is how gradient checks run in double
precision.
"""

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    pass


def _check_shape(shape):
    shape = tuple(int(s) for s in shape)
    if not shape or len(shape) > 4:
        raise ShapeError(f"rank must be 1..4, got shape {shape}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return shape


def zeros(shape, dtype=DTYPE):
    return np.zeros(_check_shape(shape), dtype=dtype)


def full(shape, value, dtype=DTYPE):
    return np.full(_check_shape(shape), value, dtype=dtype)


def rand_normal(shape, mean=0.0, stddev=1.0, seed=0, dtype=DTYPE):
    """Seeded normal samples; ``stddev == 0`` gives a constant tensor."""
    if stddev < 0:
        raise ValueError(f"stddev must be >= 0, got {stddev}")
    shape = _check_shape(shape)
    rng = np.random.default_rng(seed)
    return (mean + stddev * rng.standard_normal(shape)).astype(dtype)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a, b):
    a, b = np.asarray(a), np.asarray(b)
    _same_shape(a, b)
    return a + b


def mul(a, b):
    a, b = np.asarray(a), np.asarray(b)
    _same_shape(a, b)
    return a * b


def scale(a, s):
    a = np.asarray(a)
    return a * a.dtype.type(s)


def reduce_mean(a, axes=None):
    """Mean over ``axes`` with the reduced axes dropped.

    ``axes=None`` reduces everything; an empty sequence returns the input.
    """
    a = np.asarray(a)
    if axes is None:
        return a.mean(dtype=np.float64).astype(a.dtype)
    axes = tuple(ax % a.ndim for ax in axes)
    if len(set(axes)) != len(axes):
        raise ValueError(f"duplicate axis in {axes}")
    if not axes:
        return a
    # accumulate in float64 so integer-valued inputs average exactly
    return a.mean(axis=axes, dtype=np.float64).astype(a.dtype)


def minmax_normalize(a):
    """Affinely map ``a`` onto [0, 1]; a constant tensor maps to zeros."""
    a = np.asarray(a)
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros_like(a)
    out = (a - lo) / (hi - lo)
    return np.clip(out, 0, 1)
