"""Dense array primitives and the seeded random number generator.

Tensors are plain C-contiguous numpy arrays (row-major, outermost
dimension first). Training and inference use 32-bit floats; gradient
checks build their tensors in 64-bit and every operation in the package
preserves the dtype it is given.

Reproducibility contract
------------------------
``Rng`` wraps numpy's PCG64 bit generator seeded through
``numpy.random.SeedSequence``. The algorithm is part of the external
contract: the same seed produces the same draw sequence on every
platform and in every process. Child streams created with
:meth:`Rng.spawn` are derived from the parent's seed and a spawn key,
so per-record and per-item streams stay deterministic no matter how
work is partitioned.

Matrix products delegate to the BLAS behind ``numpy.matmul``. The
summation order is fixed by that library, so results are bit-identical
across repeated runs in one environment (same numpy build, CPU and
thread count), which is the reproducibility level the tests pin down.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np

from .errors import ShapeError, ParameterError

DEFAULT_DTYPE = np.float32

Tensor = np.ndarray


class Rng:
    """Seeded PCG64 stream with deterministic child streams."""

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._spawn_key = _spawn_key
        self._seq = np.random.SeedSequence(self.seed, spawn_key=_spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def spawn(self, key: int) -> "Rng":
        """Independent child stream; (seed, spawn path) fully determine it."""
        return Rng(self.seed, self._spawn_key + (int(key),))

    def normal(self, mean: float, std: float, shape, dtype=DEFAULT_DTYPE) -> Tensor:
        """Gaussian draws filled in row-major order."""
        out = self._gen.normal(mean, std, size=tuple(shape))
        return out.astype(dtype)

    def random(self, shape=None):
        """Uniform [0, 1) floats, row-major."""
        return self._gen.random(size=shape)

    def integers(self, n: int) -> int:
        """One uniform integer in [0, n)."""
        return int(self._gen.integers(n))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, spawn_key={self._spawn_key})"


@dataclass(frozen=True)
class Gaussian:
    """Fill specification for :func:`tensor_new`."""

    mean: float
    std: float
    rng: Rng


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(e) for e in shape)
    if not shape or any(e < 1 for e in shape):
        raise ShapeError(f"extents must all be >= 1, got {shape}")
    return shape


def tensor_new(shape, fill=0.0, dtype=DEFAULT_DTYPE) -> Tensor:
    """Allocate a tensor filled with a constant or with Gaussian draws.

    ``fill`` is either a scalar or a :class:`Gaussian`; Gaussian values
    are drawn from the supplied stream in row-major order.
    """
    shape = _check_shape(shape)
    if isinstance(fill, Gaussian):
        if fill.std < 0:
            raise ParameterError(f"std must be >= 0, got {fill.std}")
        return fill.rng.normal(fill.mean, fill.std, shape, dtype)
    return np.full(shape, fill, dtype=dtype)


def reshape(t: Tensor, new_shape) -> Tensor:
    """Same buffer contents under a new shape; element count must match."""
    new_shape = _check_shape(new_shape)
    if prod(new_shape) != t.size:
        raise ShapeError(
            f"cannot reshape {t.size} elements into {new_shape} "
            f"({prod(new_shape)} elements)"
        )
    return t.reshape(new_shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with the documented fixed summation order."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b
