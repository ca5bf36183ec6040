"""Mini-batch training of a softmax classifier with selective softmax.

Each iteration extracts features, asks the selector for the batch active
set, gathers those weight rows from the parameter store, computes the
restricted softmax loss and gradients, and pushes one sparse momentum-SGD
update back. Structure-based selectors are rebuilt every ``T`` iterations
from a weight snapshot in a background thread; the new structure is swapped
in ``rebuild_lag`` iterations later, at a fixed iteration, so runs stay
reproducible.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .allocation import AllocationSchedule, AllocationState, begin_phase
from .data import SyntheticDataset
from .diagnostics import MetricsRecord, batch_concentration
from .extractors import EXTRACTOR_KINDS, make_extractor
from .param_store import ParamStore
from .ranking import top_k_mask
from .selectors import Selector, SelectorConfig, batch_select
from .softmax_core import batch_loss_and_grads

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    schedule: AllocationSchedule | None = None
    epochs: int = 15
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    extractor: str = "identity"
    hidden: int = 128
    seed: int = 0
    init_seed: int = 0
    overlap_every: int = 50
    cp_fraction: float = 0.05
    monitor_size: int = 256
    rebuild_lag: int = 1
    background_rebuild: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.extractor not in EXTRACTOR_KINDS:
            raise ValueError(f"unknown extractor {self.extractor!r}; expected one of {EXTRACTOR_KINDS}")
        cap = self.selector.batch_cap
        if isinstance(cap, int) and cap < self.batch_size:
            raise ValueError(f"batch_cap={cap} must be >= batch_size={self.batch_size}")
        if self.overlap_every < 1 or self.monitor_size < 1 or self.rebuild_lag < 0:
            raise ValueError("overlap_every and monitor_size must be >= 1, rebuild_lag >= 0")
        if not 0 < self.cp_fraction <= 1:
            raise ValueError("cp_fraction must lie in (0, 1]")

    @property
    def adaptive(self) -> bool:
        return self.schedule is not None


@dataclass
class EpochSummary:
    epoch: int
    holdout_acc: float
    monitor_cp_k: float
    monitor_ncg_k: float
    mean_loss: float
    M: int
    L: int
    T: int


@dataclass
class RunResult:
    records: list[MetricsRecord]
    epochs: list[EpochSummary]
    final_accuracy: float
    timings: dict[str, float]
    active_class_total: int
    phases: list[AllocationState] = field(default_factory=list)


class TrainingError(RuntimeError):
    """A module error aborted the run; ``iteration`` is where it happened."""

    def __init__(self, iteration: int, cause: BaseException, records: list[MetricsRecord]):
        super().__init__(f"training failed at iteration {iteration}: {cause!r}")
        self.iteration = iteration
        self.records = records


def evaluate(W: np.ndarray, extractor, X: np.ndarray, y: np.ndarray, chunk: int = 4096) -> float:
    """Top-1 accuracy of the full classifier; ties go to the smaller class id."""
    if len(y) == 0:
        raise ValueError("holdout set is empty")
    W = np.asarray(W, dtype=np.float64)
    hits = 0
    for s in range(0, len(y), chunk):
        feats = extractor(X[s:s + chunk])
        hits += int(np.sum(np.argmax(feats @ W.T, axis=1) == y[s:s + chunk]))
    return hits / len(y)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Sample order for one epoch."""
    return np.random.default_rng([seed, 0, epoch]).permutation(n)


class _Rebuilder:
    """Builds selector structures off the training path and publishes them on schedule.

    The weight snapshot is taken when a rebuild starts; the result becomes
    visible exactly ``lag`` iterations later (waiting for the build if needed).
    """

    def __init__(self, selector: Selector, store: ParamStore, lag: int):
        self.selector = selector
        self.store = store
        self.lag = lag
        self._pool = ThreadPoolExecutor(1, thread_name_prefix="rebuild") if lag > 0 else None
        self._pending: tuple[Future, int] | None = None
        self.count = 0

    def _job(self, snap, L: int, iteration: int, seed):
        t0 = time.perf_counter()
        structure = self.selector.build(snap.weights, n_trees=L, seed=seed,
                                        iteration=iteration, version=snap.version)
        return structure, time.perf_counter() - t0

    def _next_seed(self):
        seed = [self.selector.config.seed, self.count]
        self.count += 1
        return seed

    @property
    def busy(self) -> bool:
        return self._pending is not None

    def build_now(self, L: int, iteration: int):
        self.discard()
        return self._job(self.store.snapshot_for_rebuild(), L, iteration, self._next_seed())

    def start(self, L: int, iteration: int):
        """Begin a rebuild; returns the structure right away only when ``lag`` is 0."""
        snap = self.store.snapshot_for_rebuild()
        seed = self._next_seed()
        if self._pool is None:
            return self._job(snap, L, iteration, seed)
        self._pending = (self._pool.submit(self._job, snap, L, iteration, seed), iteration + self.lag)
        return None, 0.0

    def poll(self, iteration: int):
        if self._pending is None or iteration < self._pending[1]:
            return None, 0.0
        future, _ = self._pending
        self._pending = None
        return future.result()

    def discard(self) -> None:
        if self._pending is not None:
            self._pending[0].result()
        self._pending = None

    def close(self) -> None:
        self.discard()
        if self._pool is not None:
            self._pool.shutdown(wait=True)


def _overlap_rate(per_sample_dense: np.ndarray, Y: np.ndarray) -> float:
    sizes = per_sample_dense.sum(axis=1)
    best = top_k_mask(Y, sizes)
    return float(np.mean((per_sample_dense & best).sum(axis=1) / np.maximum(sizes, 1)))


def train(config: TrainConfig, dataset: SyntheticDataset, store: ParamStore,
          on_epoch_end: Callable[[int, ParamStore, object], None] | None = None) -> RunResult:
    """Run the training loop and collect per-iteration metrics.

    Raises:
        TrainingError: wraps any error raised inside an iteration.
    """
    n_classes, dim = store.shape
    if dataset.n_classes != n_classes:
        raise ValueError(f"dataset has {dataset.n_classes} classes, store has {n_classes}")
    X_train, y_train = dataset.X_train, dataset.y_train
    X_hold, y_hold = dataset.X_holdout, dataset.y_holdout
    extractor = make_extractor(config.extractor, X_train.shape[1], dim, config.hidden, config.init_seed)

    cfg = config.selector
    selector = Selector(cfg, n_classes)
    sel_rng = np.random.default_rng([config.seed, 1])
    monitor_idx = np.random.default_rng([config.seed, 2]).permutation(len(y_train))[: config.monitor_size]
    cp_K = max(1, int(round(config.cp_fraction * n_classes)))
    n_batches = -(-len(y_train) // config.batch_size)

    M, L, T, tau = cfg.M, cfg.L, cfg.T, None
    phases: list[AllocationState] = []
    state: AllocationState | None = None
    rebuilder = _Rebuilder(selector, store, config.rebuild_lag if config.background_rebuild else 0)
    structure = None
    next_rebuild = 0
    records: list[MetricsRecord] = []
    epochs: list[EpochSummary] = []
    timings = dict(select=0.0, softmax=0.0, rebuild=0.0, evaluate=0.0, total=0.0)
    active_total = 0
    iteration = 0
    t_start = time.perf_counter()

    try:
        for epoch in range(config.epochs):
            if config.adaptive and epoch % config.schedule.epochs_per_phase == 0:
                phase = epoch // config.schedule.epochs_per_phase
                if phase < config.schedule.n_phases:
                    W_full = store.snapshot_for_rebuild().weights
                    state = begin_phase(state, config.schedule, extractor(X_train[monitor_idx]), W_full,
                                        phase=phase, batch_size=config.batch_size)
                    phases.append(state)
                    M, L, T, tau = state.M, state.L, state.T, state.tau_cp
                    log.info("phase %d: M=%d L=%d T=%d tau=%.3f", phase, M, L, T, tau)
                    rebuilder.discard()
                    structure = None

            order = epoch_order(config.seed, epoch, len(y_train))
            loss_sum = 0.0
            for bi in range(n_batches):
                rebuild_s = 0.0
                if selector.needs_structure:
                    published, dt = rebuilder.poll(iteration)
                    if published is not None:
                        structure, rebuild_s = published, dt
                    if structure is None:
                        structure, rebuild_s = rebuilder.build_now(L, iteration)
                        next_rebuild = iteration + T
                    elif iteration >= next_rebuild and not rebuilder.busy:
                        built, dt = rebuilder.start(L, iteration)
                        if built is not None:
                            structure, rebuild_s = built, dt
                        next_rebuild = iteration + T

                idx = order[bi * config.batch_size:(bi + 1) * config.batch_size]
                labels = y_train[idx]
                X, cache = extractor.forward(X_train[idx])

                t0 = time.perf_counter()
                active, per_sample = batch_select(X, labels, selector, store.rows, structure=structure,
                                                  M=M, rng=sel_rng)
                t1 = time.perf_counter()
                ids = active.ids
                pos = np.searchsorted(ids, labels)
                if np.any(pos >= ids.size) or np.any(ids[np.minimum(pos, ids.size - 1)] != labels):
                    raise AssertionError("a batch label is missing from the gathered rows")
                gathered = store.gather(ids)
                losses, _, grad_rows, dX = batch_loss_and_grads(X, gathered.rows, pos)
                store.scatter_update(ids, grad_rows, config.learning_rate, config.momentum)
                if extractor.trainable:
                    extractor.backward(cache, dX)
                    extractor.step(config.learning_rate, config.momentum)
                t2 = time.perf_counter()

                active_total += ids.size
                loss = float(losses.mean())
                loss_sum += loss * len(idx)
                cp = ncg = overlap = None
                if iteration % config.overlap_every == 0:
                    W_now = store.rows(np.arange(n_classes))
                    cps, ncgs, _ = batch_concentration(X, W_now, labels, cp_K)
                    cp, ncg = float(cps.mean()), float(ncgs.mean())
                    overlap = _overlap_rate(per_sample.dense(n_classes), X @ W_now.T)

                timings["select"] += t1 - t0
                timings["softmax"] += t2 - t1
                timings["rebuild"] += rebuild_s
                records.append(MetricsRecord(
                    iteration=iteration, epoch=epoch, selector=selector.name,
                    M=M, L=L if selector.config.kind == "hf" else 0, T=T if selector.needs_structure else 0,
                    tau_cp=tau, loss=loss, holdout_acc=None, cp_k=cp, ncg_k=ncg, overlap_optimal=overlap,
                    select_time_us=(t1 - t0) * 1e6, softmax_time_us=(t2 - t1) * 1e6,
                    rebuild_time_us=rebuild_s * 1e6,
                ))
                iteration += 1

            t0 = time.perf_counter()
            W_now = store.rows(np.arange(n_classes))
            acc = evaluate(W_now, extractor, X_hold, y_hold) if len(y_hold) else float("nan")
            mon_X = extractor(X_train[monitor_idx])
            mon_cp, mon_ncg, _ = batch_concentration(mon_X, W_now, y_train[monitor_idx], cp_K)
            timings["evaluate"] += time.perf_counter() - t0
            if records:
                records[-1].holdout_acc = acc
            epochs.append(EpochSummary(epoch, acc, float(mon_cp.mean()), float(mon_ncg.mean()),
                                       loss_sum / len(y_train), M, L, T))
            log.info("epoch %d: acc=%.4f cp=%.3f ncg=%.3f loss=%.4f", epoch, acc,
                     mon_cp.mean(), mon_ncg.mean(), loss_sum / len(y_train))
            if on_epoch_end is not None:
                on_epoch_end(epoch, store, extractor)
    except Exception as exc:
        rebuilder.close()
        raise TrainingError(iteration, exc, records) from exc
    rebuilder.close()

    timings["total"] = time.perf_counter() - t_start
    if epochs:
        final = epochs[-1].holdout_acc
    else:
        final = evaluate(store.rows(np.arange(n_classes)), extractor, X_hold, y_hold) if len(y_hold) else float("nan")
    return RunResult(records, epochs, final, timings, active_total, phases)
