"""Active-class selectors and mini-batch assembly of the active set.

Every selector produces, for each sample of a batch, a set of candidate
classes. ``batch_select`` unions them, adds the batch labels and, when a cap
is configured, downsamples the non-label classes.

Selectors that depend on a structure derived from the weights (hashing
forest, PCA codes, k-means groups) rebuild it from a weight snapshot with
``Selector.build``; the trainer decides when.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .hashing_forest import DEFAULT_LEAF_SIZE, HashForest, build_forest, query_forest
from .ranking import top_k, top_k_mask
from .softmax_core import check_active_ids, softmax

log = logging.getLogger(__name__)

SELECTOR_KINDS = ("full", "random", "pca", "kmeans", "optimal", "hf")

WeightRows = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ActiveSet:
    """Sorted, duplicate-free class ids plus the name of the selector that chose them."""

    ids: np.ndarray
    origin: str = ""

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("an active set must be a non-empty 1-D id array")
        if ids.size > 1 and np.any(ids[1:] <= ids[:-1]):
            raise ValueError("active set ids must be strictly increasing")
        if ids[0] < 0:
            raise ValueError("active set ids must be non-negative")
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return self.ids.size

    def __array__(self, dtype=None, copy=None):
        return self.ids if dtype is None else self.ids.astype(dtype)

    def __contains__(self, cid) -> bool:
        k = np.searchsorted(self.ids, cid)
        return bool(k < self.ids.size and self.ids[k] == cid)


@dataclass
class SelectorConfig:
    """Selector kind and its parameters.

    ``batch_cap`` bounds the size of the mini-batch active set: an integer,
    ``None`` for no cap, or ``"auto"`` for ``M`` plus the number of distinct
    labels in the batch, so that ``M`` slots remain for non-label classes.
    """

    kind: str = "hf"
    M: int = 200
    batch_cap: int | str | None = None
    L: int = 20
    T: int = 200
    leaf_size: int = DEFAULT_LEAF_SIZE
    split_mode: str = "difference"
    code_bits: int = 10
    n_groups: int = 1024
    kmeans_iters: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SELECTOR_KINDS:
            raise ValueError(f"unknown selector kind {self.kind!r}; expected one of {SELECTOR_KINDS}")
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if isinstance(self.batch_cap, str) and self.batch_cap != "auto":
            raise ValueError(f"batch_cap must be an integer, null or 'auto', got {self.batch_cap!r}")
        if isinstance(self.batch_cap, int) and self.batch_cap < 1:
            raise ValueError(f"batch_cap must be >= 1, got {self.batch_cap}")
        for name in ("L", "T", "kmeans_iters", "n_groups"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.code_bits < 0:
            raise ValueError(f"code_bits must be >= 0, got {self.code_bits}")

    def cap_for(self, M: int, n_labels: int) -> int | None:
        """Cap for a batch with ``n_labels`` distinct labels at quota ``M``."""
        if self.batch_cap == "auto":
            return M + n_labels
        return self.batch_cap


@dataclass(frozen=True)
class Candidates:
    """Per-sample selections over a shared id list.

    ``member[r, c]`` is true when ``ids[c]`` was selected for sample ``r``.
    """

    ids: np.ndarray
    member: np.ndarray

    def for_sample(self, r: int) -> np.ndarray:
        return self.ids[self.member[r]]

    def union(self) -> np.ndarray:
        return self.ids[self.member.any(axis=0)]

    def dense(self, n_classes: int) -> np.ndarray:
        out = np.zeros((self.member.shape[0], n_classes), dtype=bool)
        out[:, self.ids] = self.member
        return out


def _rows_of(W) -> WeightRows:
    if callable(W):
        return W
    if hasattr(W, "rows"):
        return W.rows
    W = np.asarray(W, dtype=np.float64)
    return lambda ids: W[ids]


def optimal_select(x: np.ndarray, W: np.ndarray, M: int) -> ActiveSet:
    """The ``M`` classes with the largest responses ``W @ x``; costs a full pass over ``W``."""
    W = np.asarray(W, dtype=np.float64)
    if not 1 <= M <= W.shape[0]:
        raise ValueError(f"M={M} must lie in [1, {W.shape[0]}]")
    return ActiveSet(top_k(W @ np.asarray(x, dtype=np.float64), M), "optimal")


def random_select(N: int, M: int, seed) -> ActiveSet:
    """``M`` distinct classes drawn uniformly; ``seed`` may be an int or a Generator."""
    if not 1 <= M <= N:
        raise ValueError(f"M={M} must lie in [1, {N}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return ActiveSet(np.sort(rng.choice(N, size=M, replace=False)), "random")


class PcaHasher:
    """Sign codes of the weight rows projected on their top principal directions."""

    def __init__(self, W: np.ndarray, code_bits: int = 10):
        W = np.asarray(W, dtype=np.float64)
        n, d = W.shape
        self.code_bits = code_bits
        if code_bits == 0:
            self.directions = np.zeros((0, d))
            self.codes = np.zeros(n, dtype=np.int64)
        else:
            centered = W - W.mean(axis=0)
            _, _, vt = np.linalg.svd(centered, full_matrices=False)
            if code_bits > vt.shape[0]:
                raise ValueError(f"code_bits={code_bits} exceeds the rank bound {vt.shape[0]}")
            self.mean = W.mean(axis=0)
            self.directions = vt[:code_bits]
            self.codes = self.encode(W)
        order = np.argsort(self.codes, kind="stable")
        keys, starts = np.unique(self.codes[order], return_index=True)
        bounds = np.append(starts, n)
        self._buckets = {int(k): np.sort(order[bounds[i]:bounds[i + 1]]) for i, k in enumerate(keys)}

    def encode(self, rows: np.ndarray) -> np.ndarray:
        """Integer code of each row: bit ``k`` is set when projection ``k`` is non-negative."""
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        if self.code_bits == 0:
            return np.zeros(rows.shape[0], dtype=np.int64)
        bits = ((rows - self.mean) @ self.directions.T) >= 0.0
        return bits.astype(np.int64) @ (1 << np.arange(self.code_bits, dtype=np.int64))

    def bucket(self, label: int) -> np.ndarray:
        return self._buckets[int(self.codes[label])]


def pca_select(label: int, W: np.ndarray, code_bits: int = 10) -> ActiveSet:
    """All classes sharing the PCA sign code of ``label``."""
    return ActiveSet(PcaHasher(W, code_bits).bucket(label), "pca")


def _plus_plus_rows(W: np.ndarray, sq: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = W.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.maximum(sq - 2.0 * W @ W[chosen[0]] + sq[chosen[0]], 0.0)
    for _ in range(1, k):
        d2[chosen] = 0.0
        total = d2.sum()
        if total > 0:
            nxt = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        if total <= 0 or d2[nxt] <= 0:
            # only duplicates of chosen rows remain; take any unused row
            nxt = int(rng.choice(np.setdiff1d(np.arange(n), chosen)))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.maximum(sq - 2.0 * W @ W[nxt] + sq[nxt], 0.0))
    return np.asarray(chosen)


class KMeansGroups:
    """Lloyd's k-means over weight rows with a fixed number of iterations.

    Centroids start at ``n_groups`` distinct rows sampled with ``seed`` by
    k-means++ seeding (each next row drawn with probability proportional to
    its squared distance from the rows already chosen); a centroid that loses
    all its members keeps its previous position.
    """

    def __init__(self, W: np.ndarray, n_groups: int = 1024, seed=0, n_iter: int = 25):
        W = np.asarray(W, dtype=np.float64)
        n = W.shape[0]
        n_groups = min(n_groups, n)
        rng = np.random.default_rng(seed)
        sq = np.einsum("ij,ij->i", W, W)
        centroids = W[_plus_plus_rows(W, sq, n_groups, rng)].copy()
        assign = np.zeros(n, dtype=np.int64)
        for _ in range(n_iter):
            d2 = sq[:, None] - 2.0 * W @ centroids.T + np.einsum("ij,ij->i", centroids, centroids)[None, :]
            assign = np.argmin(d2, axis=1)
            sums = np.zeros_like(centroids)
            np.add.at(sums, assign, W)
            counts = np.bincount(assign, minlength=n_groups)
            filled = counts > 0
            centroids[filled] = sums[filled] / counts[filled, None]
        self.centroids = centroids
        self.assign = assign
        order = np.argsort(assign, kind="stable")
        bounds = np.searchsorted(assign[order], np.arange(n_groups + 1))
        self._groups = [np.sort(order[bounds[g]:bounds[g + 1]]) for g in range(n_groups)]

    def group(self, label: int) -> np.ndarray:
        return self._groups[int(self.assign[label])]


def kmeans_select(label: int, W: np.ndarray, n_groups: int = 1024, seed=0, n_iter: int = 25) -> ActiveSet:
    """The k-means group of the weight rows that contains ``label``."""
    return ActiveSet(KMeansGroups(W, n_groups, seed, n_iter).group(label), "kmeans")


def hf_select(x: np.ndarray, forest: HashForest, W: np.ndarray, M: int) -> ActiveSet:
    """Approximate top-``M`` classes for ``x`` from a hashing forest."""
    return ActiveSet(query_forest(forest, x, W, M), "hf")


def _label_buckets(labels: np.ndarray, bucket_of: Callable[[int], np.ndarray]) -> Candidates:
    uniq = np.unique(labels)
    buckets = {int(c): bucket_of(int(c)) for c in uniq}
    ids = np.unique(np.concatenate(list(buckets.values())))
    member = np.zeros((labels.shape[0], ids.size), dtype=bool)
    for c, bucket in buckets.items():
        member[np.ix_(np.flatnonzero(labels == c), np.searchsorted(ids, bucket))] = True
    return Candidates(ids, member)


class Selector:
    """Runtime selector: a config plus the structure built from a weight snapshot."""

    def __init__(self, config: SelectorConfig, n_classes: int):
        self.config = config
        self.n_classes = n_classes
        self.name = config.kind

    @property
    def needs_structure(self) -> bool:
        return self.config.kind in ("hf", "pca", "kmeans")

    def build(self, weights: np.ndarray, *, n_trees: int | None = None, seed: int = 0,
              iteration: int = 0, version: int = 0):
        """Structure for this selector from a weight snapshot, or ``None``."""
        cfg = self.config
        if cfg.kind == "hf":
            return build_forest(weights, n_trees or cfg.L, cfg.leaf_size, seed, cfg.split_mode,
                                built_at_iteration=iteration, weight_version=version)
        if cfg.kind == "pca":
            return PcaHasher(weights, cfg.code_bits)
        if cfg.kind == "kmeans":
            return KMeansGroups(weights, cfg.n_groups, seed, cfg.kmeans_iters)
        return None

    def per_sample(self, X: np.ndarray, labels: np.ndarray, M: int, structure,
                   weight_rows: WeightRows, rng: np.random.Generator) -> Candidates:
        kind = self.config.kind
        n = self.n_classes
        b = X.shape[0]
        M = min(M, n)
        if kind == "full":
            return Candidates(np.arange(n), np.ones((b, n), dtype=bool))
        if kind == "random":
            ids = random_select(n, M, rng).ids
            return Candidates(ids, np.ones((b, ids.size), dtype=bool))
        if kind == "optimal":
            ids = np.arange(n)
            return Candidates(ids, top_k_mask(X @ weight_rows(ids).T, M))
        if structure is None:
            raise RuntimeError(f"selector {kind!r} has no structure; call build() first")
        if kind == "hf":
            ids, member = structure.query_batch(X, M, weight_rows)
            return Candidates(ids, member)
        if kind == "pca":
            return _label_buckets(labels, structure.bucket)
        return _label_buckets(labels, structure.group)


def _weighted_sample(weights: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Positions of ``k`` draws without replacement, each draw proportional to weight.

    Uses exponential races: the first ``k`` arrivals of clocks with rates
    ``weights`` are distributed as successive renormalized categorical draws.
    """
    arrivals = rng.standard_exponential(weights.shape[0])
    keys = np.divide(arrivals, weights, out=np.full_like(arrivals, np.inf), where=weights > 0)
    return np.lexsort((np.arange(keys.size), keys))[:k]


def cap_active_set(ids: np.ndarray, labels: np.ndarray, cap: int, X: np.ndarray,
                   weight_rows: WeightRows, rng: np.random.Generator) -> np.ndarray:
    """Downsample non-label ids of ``ids`` until at most ``cap`` remain.

    The weight of a non-label class is its largest softmax probability over the
    batch's samples, with the softmax restricted to ``ids``.
    """
    label_ids = np.unique(labels)
    if cap < label_ids.size:
        raise ValueError(f"batch_cap={cap} is smaller than the {label_ids.size} distinct batch labels")
    if ids.size <= cap:
        return ids
    probs = softmax(X @ weight_rows(ids).T)
    is_label = np.isin(ids, label_ids, assume_unique=True)
    others = np.flatnonzero(~is_label)
    weight = probs[:, others].max(axis=0)
    keep = others[_weighted_sample(weight, cap - label_ids.size, rng)]
    return np.sort(np.concatenate([ids[is_label], ids[keep]]))


def batch_select(X: np.ndarray, labels, selector: Selector | SelectorConfig, W,
                 *, structure=None, M: int | None = None, rng=None
                 ) -> tuple[ActiveSet, Candidates]:
    """Active set of a mini-batch: union of per-sample sets plus every label, capped.

    Args:
        X: Features of the batch, shape ``(b, D)``.
        labels: Ground-truth class ids of the batch.
        selector: A ``Selector`` or a ``SelectorConfig``; a config is turned
            into a selector whose structure is built from ``W`` on the spot.
        W: Weight matrix, a ``ParamStore`` or a callable returning rows by id.
        structure: Prebuilt structure for structure-based selectors.
        M: Per-sample quota; defaults to the configured ``M``.
        rng: Generator or seed used by random selection and cap sampling.

    Returns:
        The batch active set and the per-sample selections it was built from.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (X.shape[0],):
        raise ValueError("need exactly one label per sample")
    weight_rows = _rows_of(W)
    if isinstance(selector, SelectorConfig):
        n = W.n_classes if hasattr(W, "n_classes") else np.asarray(W).shape[0]
        selector = Selector(selector, n)
        if selector.needs_structure and structure is None:
            full = weight_rows(np.arange(n))
            structure = selector.build(full, seed=selector.config.seed)
    cfg = selector.config
    M = cfg.M if M is None else M
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng if rng is not None else cfg.seed)
    check_active_ids(np.unique(labels), selector.n_classes)

    cap = cfg.cap_for(M, np.unique(labels).size)
    if cap is not None and cap < np.unique(labels).size:
        raise ValueError(f"batch_cap={cap} is smaller than the number of distinct batch labels")
    per_sample = selector.per_sample(X, labels, M, structure, weight_rows, rng)
    ids = np.union1d(per_sample.union(), labels)
    if cap is not None:
        ids = cap_active_set(ids, labels, cap, X, weight_rows, rng)
    return ActiveSet(ids, selector.name), per_sample
