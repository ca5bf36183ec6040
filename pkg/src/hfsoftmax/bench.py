"""Layer-level timing and memory comparison of selective and dense softmax steps."""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import asdict, dataclass

import numpy as np

from .param_store import ParamStore
from .softmax_core import backward_selective, forward_full, forward_selective


@dataclass(frozen=True)
class BenchReport:
    n_classes: int
    dim: int
    active: int
    repeats: int
    selective_median_s: float
    dense_median_s: float
    speedup: float
    selective_peak_bytes: int
    dense_peak_bytes: int
    memory_ratio: float

    def as_dict(self) -> dict:
        return asdict(self)


def selective_step(store: ParamStore, ids: np.ndarray, x: np.ndarray, label_pos: int,
                   lr: float, momentum: float) -> None:
    """Gather the active rows, run selective softmax forward and backward, scatter the update."""
    local = np.arange(ids.size)
    rows = store.gather(ids).rows
    forward_selective(x, rows, local)
    grads = backward_selective(x, rows, local, label_pos)
    store.scatter_update(ids, grads.rows, lr, momentum)


def dense_step(W: np.ndarray, Mom: np.ndarray, x: np.ndarray, label: int, lr: float, momentum: float) -> None:
    """Full softmax forward and backward with an in-place momentum update of every row."""
    forward_full(x, W)
    grads = backward_selective(x, W, np.arange(W.shape[0]), label)
    Mom *= momentum
    Mom += grads.rows
    W -= lr * Mom


def _timed_pair(fa, fb, repeats: int) -> tuple[float, float]:
    """Median times of two steps run alternately, so load drift hits both alike."""
    times = np.empty((repeats, 2))
    for r in range(repeats):
        for k, fn in enumerate((fa, fb)):
            t0 = time.perf_counter()
            fn()
            times[r, k] = time.perf_counter() - t0
    t_a, t_b = np.median(times, axis=0)
    return float(t_a), float(t_b)


def _peak_bytes(fn) -> int:
    """Peak traced allocation of one call above what was live before it."""
    tracemalloc.start()
    try:
        base = tracemalloc.get_traced_memory()[0]
        tracemalloc.reset_peak()
        fn()
        return max(0, tracemalloc.get_traced_memory()[1] - base)
    finally:
        tracemalloc.stop()


def run_bench(n_classes: int, dim: int, active: int, repeats: int, seed: int = 0,
              lr: float = 0.01, momentum: float = 0.9) -> BenchReport:
    """Median step time and transient memory of the selective versus the dense path.

    Both paths see the same feature vector; the selective path works on
    ``active`` class rows that include the label.

    Raises:
        ValueError: for ``repeats < 1`` or ``active`` outside ``[1, n_classes]``.
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    if not 1 <= active <= n_classes:
        raise ValueError(f"active={active} must lie in [1, {n_classes}]")
    rng = np.random.default_rng(seed)
    store = ParamStore.initialize(n_classes, dim, seed=seed)
    W = store.snapshot_for_rebuild().weights.copy()
    Mom = np.zeros_like(W)
    x = rng.normal(size=dim) / np.sqrt(dim)
    ids = np.sort(rng.choice(n_classes, size=active, replace=False))
    label_pos = int(rng.integers(active))
    label = int(ids[label_pos])

    sel = lambda: selective_step(store, ids, x, label_pos, lr, momentum)
    dense = lambda: dense_step(W, Mom, x, label, lr, momentum)
    sel()
    dense()
    t_sel, t_dense = _timed_pair(sel, dense, repeats)
    m_sel, m_dense = _peak_bytes(sel), _peak_bytes(dense)
    return BenchReport(
        n_classes=n_classes, dim=dim, active=active, repeats=repeats,
        selective_median_s=t_sel, dense_median_s=t_dense, speedup=t_dense / t_sel,
        selective_peak_bytes=m_sel, dense_peak_bytes=m_dense,
        memory_ratio=m_sel / m_dense if m_dense else float("nan"),
    )
