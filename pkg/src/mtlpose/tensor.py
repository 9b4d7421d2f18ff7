"""Dense array plumbing: shape-checked construction, precision switch, seeded RNG.

Tensors are plain C-ordered numpy arrays in NCHW order, so element
``(b, c, h, w)`` lives at flat offset ``((b*C + c)*H + h)*W + w``.

Randomness goes through :class:`Rng`, a thin wrapper over numpy's Philox
4x64-10 counter-based generator. Philox output depends only on the 128-bit
key and the 256-bit counter, so a fixed seed yields the same stream on every
platform. Derived streams (per sample, per batch) are keyed through
``numpy.random.SeedSequence`` so they never depend on worker count.
"""
from __future__ import annotations

import contextlib
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError, InvalidShapeError

_DTYPE = np.dtype(np.float32)

U64 = (1 << 64) - 1


def get_dtype() -> np.dtype:
    return _DTYPE


def set_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise InvalidArgumentError(f"unsupported precision {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the module-wide scalar type (float32 or float64)."""
    old = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


def check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not 1 <= len(shape) <= 4:
        raise InvalidShapeError(f"tensors have 1 to 4 axes, got {shape}")
    if any(s < 1 for s in shape):
        raise InvalidShapeError(f"all extents must be >= 1, got {shape}")
    return shape


def tensor_new(shape: Sequence[int], fill: float = 0.0, dtype=None) -> np.ndarray:
    shape = check_shape(shape)
    return np.full(shape, fill, dtype=dtype or _DTYPE)


# top-level stream ids, one per consumer of randomness
STREAM_INIT, STREAM_SHUFFLE, STREAM_DROPOUT, STREAM_SYNTH, STREAM_AUGMENT = 1, 2, 3, 4, 5


class Rng:
    """Seeded Philox stream. Same seed, same call sequence, same numbers."""

    def __init__(self, seed: int, *stream: int):
        if not 0 <= int(seed) <= U64:
            raise InvalidArgumentError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        if self.stream:
            seq = np.random.SeedSequence(self.seed, spawn_key=self.stream)
            self._gen = np.random.Generator(np.random.Philox(seq))
        else:
            self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def derive(self, *ids: int) -> "Rng":
        """Independent child stream keyed by (seed, stream..., ids...)."""
        return Rng(self.seed, *self.stream, *ids)

    @property
    def counter(self) -> int:
        st = self._gen.bit_generator.state["state"]["counter"]
        return int(st[0]) | int(st[1]) << 64

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape, mean=0.0, stddev=1.0, dtype=None) -> np.ndarray:
        draws = self._gen.standard_normal(shape)
        return (mean + stddev * draws).astype(dtype or _DTYPE, copy=False)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def seeded_normal(rng: Rng, shape: Sequence[int], mean: float = 0.0, stddev: float = 1.0) -> np.ndarray:
    if stddev < 0:
        raise InvalidArgumentError(f"stddev must be >= 0, got {stddev}")
    shape = check_shape(shape)
    return rng.normal(shape, mean, stddev)
