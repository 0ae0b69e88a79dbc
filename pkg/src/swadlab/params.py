"""Flat parameter vectors, seeded RNG streams, running means and vector geometry.

A parameter vector is a 1-D ``float64`` numpy array. Every model, optimizer
and averaging routine in the package works on that flat view.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np


class DimensionError(ValueError):
    """Raised when two parameter vectors disagree in length."""

    def __init__(self, expected: int, got: int, what: str = "vector"):
        super().__init__(f"{what} dimension mismatch: expected {expected}, got {got}")
        self.expected = expected
        self.got = got


def as_params(values) -> np.ndarray:
    """Copy ``values`` into a contiguous 1-D float64 parameter vector."""
    v = np.array(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("parameter vector must have dim >= 1")
    if not np.all(np.isfinite(v)):
        raise ValueError("parameter vector contains non-finite entries")
    return v


def check_dims(x: np.ndarray, y: np.ndarray, what: str = "vector") -> None:
    if x.shape != y.shape:
        raise DimensionError(x.size, y.size, what)


def dot(x: np.ndarray, y: np.ndarray) -> float:
    """Inner product, correctly rounded so the result is independent of BLAS."""
    check_dims(x, y)
    return math.fsum((x * y).tolist())


def l2_norm(v: np.ndarray) -> float:
    return math.sqrt(math.fsum((v * v).tolist()))


def axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Return ``a * x + y`` as a new vector."""
    check_dims(x, y)
    return a * x + y


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

def _stream_word(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream ids must be non-negative, got {part}")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Counter-based generator for the ``(seed, *stream)`` pair.

    Streams with different ids are statistically independent, so callers can
    fan out per-domain or per-cell randomness without coordinating. Philox
    output and ``SeedSequence`` hashing are platform independent.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    key = tuple(_stream_word(p) for p in stream)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def sample_unit_sphere(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Uniform direction on the unit sphere in ``dim`` dimensions."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    while True:
        g = rng.standard_normal(dim)
        n = l2_norm(g)
        if n > 0.0:
            return g / n


# ---------------------------------------------------------------------------
# Running means
# ---------------------------------------------------------------------------

@dataclass
class RunningMean:
    """Incremental arithmetic mean of equally weighted vectors."""

    mean: np.ndarray | None = None
    count: int = 0

    @property
    def dim(self) -> int | None:
        return None if self.mean is None else self.mean.size

    def update(self, v: np.ndarray) -> "RunningMean":
        v = np.asarray(v, dtype=np.float64)
        if self.count == 0:
            self.mean = v.astype(np.float64, copy=True)
            self.count = 1
            return self
        check_dims(self.mean, v, "running mean")
        self.count += 1
        self.mean += (v - self.mean) / self.count
        return self

    def merge(self, other: "RunningMean") -> "RunningMean":
        """Count-weighted combination of two accumulators, returned as a new one."""
        if other.count == 0:
            return self.copy()
        if self.count == 0:
            return other.copy()
        check_dims(self.mean, other.mean, "running mean")
        n = self.count + other.count
        mean = self.mean + (other.mean - self.mean) * (other.count / n)
        return RunningMean(mean, n)

    def copy(self) -> "RunningMean":
        return RunningMean(None if self.mean is None else self.mean.copy(), self.count)

    def value(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("running mean is empty")
        return self.mean.copy()


def running_mean_update(acc: RunningMean, v: np.ndarray) -> RunningMean:
    """Functional form of :meth:`RunningMean.update`; ``acc`` is left untouched."""
    return acc.copy().update(v)


def mean_of(vectors: Iterable[np.ndarray]) -> np.ndarray:
    acc = RunningMean()
    for v in vectors:
        acc.update(v)
    return acc.value()


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<Q")


def to_bytes(v: np.ndarray) -> bytes:
    """8-byte little-endian dim header followed by little-endian float64 values."""
    v = np.asarray(v, dtype="<f8").reshape(-1)
    return _HEADER.pack(v.size) + v.tobytes()


def from_bytes(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise ValueError("truncated parameter file: missing dim header")
    (dim,) = _HEADER.unpack_from(data)
    body = data[_HEADER.size:]
    if len(body) != 8 * dim:
        raise ValueError(f"parameter file declares dim {dim} but holds {len(body) // 8} values")
    return np.frombuffer(body, dtype="<f8").astype(np.float64)


def save_params(path: str | Path, v: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(v))


def load_params(path: str | Path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())


def to_csv_text(v: np.ndarray) -> str:
    return "".join(f"{x!r}\n" for x in np.asarray(v, dtype=np.float64).tolist())


def from_csv_text(text: str) -> np.ndarray:
    return as_params([float(line) for line in text.splitlines() if line.strip()])
