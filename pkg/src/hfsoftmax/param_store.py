"""In-process parameter server for the class-weight matrix.

Holds the full ``N x D`` matrix plus per-row momentum buffers. Clients gather
the rows of an active set, compute gradients on their copy, and push sparse
row updates back. Rows never touched by an update stay bit-identical.

Checkpoint layout (little-endian)::

    b"DCS1" | u32 version | u64 N | u64 D | N*D f64 weights | N*D f64 momentum
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"DCS1"
_HEADER = struct.Struct("<4sIQQ")
_MAX_VERSION = 2**32 - 1


class NonFiniteGradientError(ValueError):
    """An update carried NaN or infinite gradient entries and was rejected."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the expected shape."""


@dataclass(frozen=True)
class Gathered:
    """Copy of some weight rows, tagged with the store version it was read at."""

    ids: np.ndarray
    rows: np.ndarray
    version: int


@dataclass(frozen=True)
class Snapshot:
    weights: np.ndarray
    version: int


def _is_full_range(ids: np.ndarray, n: int) -> bool:
    return ids.shape[0] == n and (n == 0 or (ids[0] == 0 and ids[-1] == n - 1 and np.all(np.diff(ids) == 1)))


class ParamStore:
    """Source of truth for the class-weight matrix ``W``.

    A single lock serializes writers against gathers and snapshots, so every
    row a reader copies reflects a whole number of updates.
    """

    def __init__(self, weights: np.ndarray, momentum: np.ndarray | None = None, version: int = 0):
        weights = np.array(weights, dtype=np.float64, order="C")
        if weights.ndim != 2:
            raise ValueError(f"weights must be 2-D, got shape {weights.shape}")
        if not np.all(np.isfinite(weights)):
            raise ValueError("weights must be finite")
        self._w = weights
        if momentum is None:
            self._m = np.zeros_like(weights)
        else:
            self._m = np.array(momentum, dtype=np.float64, order="C")
            if self._m.shape != weights.shape:
                raise ValueError("momentum buffer shape does not match weights")
        self._version = int(version)
        self._lock = threading.Lock()

    @classmethod
    def initialize(cls, n_classes: int, dim: int, seed: int = 0) -> "ParamStore":
        """Zero-mean Gaussian rows with standard deviation ``1/sqrt(dim)``."""
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(n_classes, dim)))

    @property
    def shape(self) -> tuple[int, int]:
        return self._w.shape

    @property
    def n_classes(self) -> int:
        return self._w.shape[0]

    @property
    def version(self) -> int:
        return self._version

    def _ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.ndim != 1 or not np.issubdtype(ids.dtype, np.integer):
            raise ValueError("row ids must be a 1-D integer array")
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_classes):
            raise ValueError(f"row ids must lie in [0, {self.n_classes})")
        return ids.astype(np.int64, copy=False)

    def gather(self, ids) -> Gathered:
        """Copy the requested rows in the given order."""
        ids = self._ids(ids)
        with self._lock:
            if _is_full_range(ids, self.n_classes):
                rows = self._w.copy()
            else:
                rows = self._w[ids]
            return Gathered(ids, rows, self._version)

    def rows(self, ids) -> np.ndarray:
        return self.gather(ids).rows

    def scatter_update(self, ids, grads: np.ndarray, lr: float, momentum: float = 0.0) -> int:
        """Apply one momentum-SGD step to the given rows only.

        For each row ``i``: ``m_i <- momentum * m_i + g_i``, ``w_i <- w_i - lr * m_i``.
        Momentum of untouched rows does not decay.

        Returns:
            The new store version.

        Raises:
            NonFiniteGradientError: nothing is applied if any gradient entry is
                not finite.
        """
        ids = self._ids(ids)
        grads = np.asarray(grads, dtype=np.float64)
        if grads.shape != (ids.shape[0], self._w.shape[1]):
            raise ValueError(f"gradient block shape {grads.shape} does not match ids/dimension")
        if not lr >= 0.0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        # a finite sum rules out NaN and infinite entries without a full mask
        if not np.isfinite(grads.sum()) and not np.all(np.isfinite(grads)):
            raise NonFiniteGradientError("gradient contains non-finite entries; update rejected")
        if ids.size > 1 and not np.all(ids[1:] > ids[:-1]) and np.unique(ids).size != ids.size:
            raise ValueError("duplicate row ids in one update")
        with self._lock:
            if self._version >= _MAX_VERSION:
                raise OverflowError("store version counter exhausted")
            if _is_full_range(ids, self.n_classes):
                self._m *= momentum
                self._m += grads
                self._w -= lr * self._m
            elif ids.size:
                m = momentum * self._m[ids] + grads
                self._m[ids] = m
                self._w[ids] = self._w[ids] - lr * m
            self._version += 1
            return self._version

    def snapshot_for_rebuild(self) -> Snapshot:
        """Consistent read-only copy of the whole matrix and its version."""
        with self._lock:
            w = self._w.copy()
            version = self._version
        w.setflags(write=False)
        return Snapshot(w, version)

    def momentum_rows(self, ids) -> np.ndarray:
        ids = self._ids(ids)
        with self._lock:
            return self._m[ids]

    def save(self, path) -> None:
        with self._lock:
            n, d = self._w.shape
            blob = (
                _HEADER.pack(MAGIC, self._version, n, d)
                + self._w.astype("<f8", copy=False).tobytes(order="C")
                + self._m.astype("<f8", copy=False).tobytes(order="C")
            )
        Path(path).write_bytes(blob)

    @classmethod
    def load(cls, path, expected_shape: tuple[int, int] | None = None) -> "ParamStore":
        blob = Path(path).read_bytes()
        if len(blob) < _HEADER.size:
            raise CheckpointError("checkpoint shorter than its header")
        magic, version, n, d = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if expected_shape is not None and (n, d) != tuple(expected_shape):
            raise CheckpointError(f"checkpoint holds a {n}x{d} matrix, expected {expected_shape}")
        body = len(blob) - _HEADER.size
        if body != 2 * n * d * 8:
            raise CheckpointError(f"checkpoint body has {body} bytes, expected {2 * n * d * 8}")
        data = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
        w = data[: n * d].reshape(n, d)
        m = data[n * d:].reshape(n, d)
        return cls(w.astype(np.float64), m.astype(np.float64), version)
