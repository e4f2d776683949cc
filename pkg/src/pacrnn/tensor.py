"""Dense float64 array helpers and the seeded random source.

Tensors are plain ``numpy.ndarray`` objects of dtype float64; the helpers
here add the shape checks and error types the rest of the package relies
on.
"""

import numpy as np

from . import kernels
from .errors import DimensionError, ParameterError

DTYPE = np.float64


def as_tensor(values, shape=None):
    """Return ``values`` as a contiguous float64 array, optionally reshaped."""
    arr = np.ascontiguousarray(values, dtype=DTYPE)
    if shape is not None:
        if int(np.prod(shape)) != arr.size:
            raise DimensionError(f"cannot view {arr.size} values as shape {tuple(shape)}")
        arr = arr.reshape(shape)
    return arr


def zeros(shape):
    return np.zeros(shape, dtype=DTYPE)


def matmul(a, b):
    """Matrix product of a (m, k) and b (k, n) array."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax(logits):
    """Numerically stable softmax along the last axis."""
    logits = np.asarray(logits, dtype=DTYPE)
    if logits.size == 0 or logits.shape[-1] == 0:
        raise DimensionError("softmax of an empty tensor")
    return kernels.softmax_rows(logits)


def log_softmax(logits):
    logits = np.asarray(logits, dtype=DTYPE)
    if logits.size == 0 or logits.shape[-1] == 0:
        raise DimensionError("log_softmax of an empty tensor")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def concat(parts):
    """Concatenate rank-1 tensors in order."""
    if len(parts) == 0:
        raise DimensionError("concat of an empty list")
    arrays = [np.asarray(p, dtype=DTYPE) for p in parts]
    for k, arr in enumerate(arrays):
        if arr.ndim != 1:
            raise DimensionError(f"concat part {k} has shape {arr.shape}, expected rank 1")
    return np.concatenate(arrays)


class Rng:
    """Seeded random source.

    Wraps numpy's PCG64 bit generator (128-bit LCG state, XSL-RR output),
    whose stream for a given seed is fixed across platforms.  ``child``
    derives independent named sub-streams so that adding a consumer in one
    place does not shift the numbers drawn elsewhere.
    """

    def __init__(self, seed, _path=()):
        self.seed = int(seed)
        self._path = tuple(_path)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF] + [_stable_hash(p) for p in self._path]
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, *keys):
        return Rng(self.seed, self._path + tuple(str(k) for k in keys))

    def uniform(self, low, high, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, n, p=None):
        return int(self.generator.choice(n, p=p))

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self._path})"


def _stable_hash(text):
    # FNV-1a; Python's hash() is salted per process.
    value = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        value ^= byte
        value = (value * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return value


def uniform_init(rng, shape, scale):
    """I.i.d. uniform values in [-scale, +scale]."""
    if not scale > 0:
        raise ParameterError(f"uniform_init scale must be positive, got {scale}")
    return as_tensor(rng.uniform(-scale, scale, size=tuple(shape)))
