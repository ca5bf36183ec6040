"""Random-hyperplane hashing trees over class weight vectors.

Each tree recursively splits the set of (direction-normalized) weight rows
with a hyperplane derived from two randomly sampled rows until no cell holds
more than ``leaf_size`` classes. A query walks down by the side of each
hyperplane the feature falls on and stops as soon as the next node would hold
fewer than ``Q`` classes, returning every class under the current node. A
forest pools these candidates over its trees and keeps the ``Q`` candidates
with the highest cosine similarity to the query.

Trees are stored flat: ``perm`` lists class ids so that the classes under any
node occupy the contiguous slice ``perm[start[node]:end[node]]``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .ranking import top_k_mask

log = logging.getLogger(__name__)

SPLIT_MODES = ("difference", "midpoint")
MAX_RESAMPLES = 32
DEFAULT_LEAF_SIZE = 64
_DENSE_MASK_LIMIT = 1 << 26


def _ragged_slices(start: np.ndarray, end: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row index and position for every element of the slices ``[start[r], end[r])``."""
    lengths = end - start
    rows = np.repeat(np.arange(lengths.size), lengths)
    offsets = np.cumsum(lengths) - lengths
    pos = np.arange(lengths.sum()) - np.repeat(offsets - start, lengths)
    return rows, pos


def normalize_rows(A: np.ndarray) -> np.ndarray:
    """Scale rows to unit norm; zero rows stay zero."""
    A = np.asarray(A, dtype=np.float64)
    norms = np.sqrt(np.einsum("...i,...i->...", A, A))[..., None]
    return np.divide(A, norms, out=np.zeros_like(A), where=norms > 0)


def splitting_normal(wi: np.ndarray, wj: np.ndarray, mode: str = "difference") -> np.ndarray:
    """Normal vector of the hyperplane used to split a cell.

    ``difference`` gives ``wi - wj``: for unit rows this is the max-margin
    hyperplane through the origin separating the sampled pair. ``midpoint``
    gives ``(wi + wj) / 2``, which does not separate the pair in general.
    """
    if mode == "difference":
        return wi - wj
    if mode == "midpoint":
        return (wi + wj) / 2.0
    raise ValueError(f"unknown split mode {mode!r}; expected one of {SPLIT_MODES}")


@dataclass(frozen=True)
class HashTree:
    """Immutable flat binary tree over class ids.

    Node 0 is the root. ``left[k] == -1`` marks a leaf. A query goes left at
    internal node ``k`` when ``x . normals[k] >= offsets[k]``.
    """

    perm: np.ndarray
    start: np.ndarray
    end: np.ndarray
    left: np.ndarray
    right: np.ndarray
    normals: np.ndarray
    offsets: np.ndarray
    leaf_size: int
    seed: object = None

    @property
    def n_classes(self) -> int:
        return self.perm.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.start.shape[0]

    @property
    def counts(self) -> np.ndarray:
        return self.end - self.start

    def ids_under(self, node: int) -> np.ndarray:
        return np.sort(self.perm[self.start[node]:self.end[node]])

    def is_leaf(self, node: int) -> bool:
        return bool(self.left[node] < 0)

    def leaves(self) -> list[np.ndarray]:
        return [self.ids_under(k) for k in np.flatnonzero(self.left < 0)]

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for k in range(self.n_nodes):
            if self.left[k] >= 0:
                depth[self.left[k]] = depth[self.right[k]] = depth[k] + 1
        return int(depth.max())

    def descend(self, X: np.ndarray, Q: int) -> tuple[np.ndarray, np.ndarray]:
        """Stopping node and number of internal nodes visited, per query row.

        ``X`` should already be row-normalized.
        """
        X = np.atleast_2d(X)
        b = X.shape[0]
        counts = self.counts
        result = np.zeros(b, dtype=np.int64)
        visited = np.zeros(b, dtype=np.int64)
        if counts[0] < Q:
            return result, visited
        node = np.zeros(b, dtype=np.int64)
        active = np.arange(b)
        while active.size:
            cur = node[active]
            leaf = self.left[cur] < 0
            result[active[leaf]] = cur[leaf]
            active, cur = active[~leaf], cur[~leaf]
            if not active.size:
                break
            visited[active] += 1
            side = np.einsum("ij,ij->i", X[active], self.normals[cur]) >= self.offsets[cur]
            child = np.where(side, self.left[cur], self.right[cur])
            stop = counts[child] < Q
            result[active[stop]] = cur[stop]
            node[active[~stop]] = child[~stop]
            active = active[~stop]
        return result, visited


_CHUNK = 4096


def _project(U: np.ndarray, idx: np.ndarray, h: np.ndarray) -> np.ndarray:
    """``U[idx] @ h`` without materializing a large gathered copy of ``U``."""
    if idx.size <= _CHUNK:
        return U[idx] @ h
    out = np.empty(idx.size)
    for c in range(0, idx.size, _CHUNK):
        out[c:c + _CHUNK] = U[idx[c:c + _CHUNK]] @ h
    return out


def _split(U: np.ndarray, idx: np.ndarray, rng: np.random.Generator, mode: str):
    n = idx.size
    for _ in range(MAX_RESAMPLES):
        i = int(rng.integers(n))
        j = int(rng.integers(n - 1))
        j += j >= i
        h = splitting_normal(U[idx[i]], U[idx[j]], mode)
        proj = _project(U, idx, h)
        go_left = proj >= 0.0
        n_left = int(go_left.sum())
        if 0 < n_left < n:
            return h, 0.0, go_left
    # duplicate or collinear rows: fall back to a median split on the last normal
    order = np.lexsort((np.arange(n), -proj))
    half = (n + 1) // 2
    go_left = np.zeros(n, dtype=bool)
    go_left[order[:half]] = True
    offset = 0.5 * (proj[order[half - 1]] + proj[order[half]])
    if proj[order[half - 1]] == proj[order[half]]:
        offset = float(proj[order[half - 1]])
    return h, float(offset), go_left


def build_tree(
    W: np.ndarray,
    leaf_size: int = DEFAULT_LEAF_SIZE,
    seed=0,
    mode: str = "difference",
) -> HashTree:
    """Build one hashing tree over the rows of ``W``.

    Args:
        W: Weight matrix of shape ``(N, D)``.
        leaf_size: Largest number of classes a leaf may hold (``B``).
        seed: Integer or ``np.random.SeedSequence``.
        mode: Splitting-normal mode, see ``splitting_normal``.
    """
    W = _check_build_args(W, leaf_size, mode)
    return _build_unit(normalize_rows(W), leaf_size, seed, mode)


def _check_build_args(W, leaf_size: int, mode: str) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] < 1:
        raise ValueError(f"need a non-empty 2-D weight matrix, got shape {W.shape}")
    if leaf_size < 2:
        raise ValueError(f"leaf_size must be >= 2, got {leaf_size}")
    if mode not in SPLIT_MODES:
        raise ValueError(f"unknown split mode {mode!r}; expected one of {SPLIT_MODES}")
    return W


def _build_unit(U: np.ndarray, leaf_size: int, seed, mode: str) -> HashTree:
    """``build_tree`` on rows that are already unit-normalized."""
    n, d = U.shape
    rng = np.random.default_rng(seed)

    perm = np.arange(n, dtype=np.int64)
    start, end, left, right, offsets = [0], [n], [-1], [-1], [0.0]
    normals = [np.zeros(d)]
    stack = [0]
    while stack:
        k = stack.pop()
        s, e = start[k], end[k]
        if e - s <= leaf_size:
            continue
        idx = perm[s:e]
        h, offset, go_left = _split(U, idx, rng, mode)
        n_left = int(go_left.sum())
        perm[s:e] = np.concatenate([idx[go_left], idx[~go_left]])
        normals[k], offsets[k] = h, offset
        kl, kr = len(start), len(start) + 1
        left[k], right[k] = kl, kr
        start += [s, s + n_left]
        end += [s + n_left, e]
        left += [-1, -1]
        right += [-1, -1]
        offsets += [0.0, 0.0]
        normals += [np.zeros(d), np.zeros(d)]
        stack += [kr, kl]

    arrays = dict(
        perm=perm,
        start=np.asarray(start, dtype=np.int64),
        end=np.asarray(end, dtype=np.int64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        normals=np.asarray(normals, dtype=np.float64),
        offsets=np.asarray(offsets, dtype=np.float64),
    )
    for a in arrays.values():
        a.setflags(write=False)
    return HashTree(**arrays, leaf_size=leaf_size, seed=seed)


def query_tree(tree: HashTree, x: np.ndarray, Q: int) -> np.ndarray:
    """Candidate pool for one feature vector: all ids under the stopping node."""
    if Q < 1:
        raise ValueError(f"Q must be >= 1, got {Q}")
    node, _ = tree.descend(normalize_rows(np.asarray(x, dtype=np.float64)[None, :]), Q)
    return tree.ids_under(int(node[0]))


@dataclass(frozen=True)
class HashForest:
    """``L`` hashing trees built from one weight snapshot."""

    trees: tuple[HashTree, ...]
    built_at_iteration: int = 0
    weight_version: int = 0

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def n_classes(self) -> int:
        return self.trees[0].n_classes

    def pools(self, X: np.ndarray, Q: int) -> tuple[np.ndarray, np.ndarray]:
        """Pooled candidates of every query row over all trees.

        Returns:
            ``(cand_ids, member)`` where ``cand_ids`` is the sorted union of
            candidates over the whole batch and ``member[r, c]`` tells whether
            ``cand_ids[c]`` is in the pool of row ``r``.
        """
        Xn = normalize_rows(np.atleast_2d(X))
        b = Xn.shape[0]
        rows, ids = [], []
        for tree in self.trees:
            stops, _ = tree.descend(Xn, Q)
            r, pos = _ragged_slices(tree.start[stops], tree.end[stops])
            rows.append(r)
            ids.append(tree.perm[pos])
        rows, ids = np.concatenate(rows), np.concatenate(ids)
        n = self.n_classes
        if b * n <= _DENSE_MASK_LIMIT:
            dense = np.zeros(b * n, dtype=bool)
            dense[rows * n + ids] = True
            dense = dense.reshape(b, n)
            cand = np.flatnonzero(dense.any(axis=0))
            return cand, dense[:, cand]
        cand, col = np.unique(ids, return_inverse=True)
        member = np.zeros((b, cand.size), dtype=bool)
        member[rows, col] = True
        return cand, member

    def query_batch(
        self, X: np.ndarray, Q: int, weight_rows: Callable[[np.ndarray], np.ndarray]
    ) -> tuple[np.ndarray, np.ndarray]:
        """Top-``Q`` pooled candidates per query row by cosine similarity.

        Args:
            X: Query features, shape ``(b, D)``.
            Q: Quota per row.
            weight_rows: Returns the current weight rows for a sorted id array.

        Returns:
            ``(cand_ids, selected)`` with ``selected`` a ``(b, len(cand_ids))``
            boolean mask; each row selects ``min(Q, pool size)`` candidates.
        """
        if Q < 1:
            raise ValueError(f"Q must be >= 1, got {Q}")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        cand, member = self.pools(X, Q)
        Xn = normalize_rows(X)
        Wn = normalize_rows(weight_rows(cand))
        scores = Xn @ Wn.T
        zero = (~Xn.any(axis=1))[:, None] | (~Wn.any(axis=1))[None, :]
        if zero.any():
            log.debug("query_batch: zero-norm query or weight row, ranked last")
            scores[zero] = -1.0
        return cand, top_k_mask(scores, Q, valid=member)

    def mean_visited(self, X: np.ndarray, Q: int) -> float:
        """Average number of internal nodes visited per tree and query."""
        Xn = normalize_rows(np.atleast_2d(X))
        return float(np.mean([t.descend(Xn, Q)[1].mean() for t in self.trees]))


def build_forest(
    W: np.ndarray,
    n_trees: int,
    leaf_size: int = DEFAULT_LEAF_SIZE,
    seed: int = 0,
    mode: str = "difference",
    built_at_iteration: int = 0,
    weight_version: int = 0,
    n_jobs: int = 1,
) -> HashForest:
    """Build ``n_trees`` independent trees with per-tree seeds spawned from ``seed``.

    Tree ``k`` depends only on ``seed`` and ``k``, so a forest of ``L`` trees
    is a prefix of any larger forest built with the same seed.
    """
    if n_trees < 1:
        raise ValueError(f"n_trees must be >= 1, got {n_trees}")
    U = normalize_rows(_check_build_args(W, leaf_size, mode))
    seeds = np.random.SeedSequence(seed).spawn(n_trees)
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            trees = list(pool.map(lambda s: _build_unit(U, leaf_size, s, mode), seeds))
    else:
        trees = [_build_unit(U, leaf_size, s, mode) for s in seeds]
    return HashForest(tuple(trees), built_at_iteration, weight_version)


def query_forest(forest: HashForest, x: np.ndarray, W: np.ndarray, Q: int) -> np.ndarray:
    """Sorted ids of the ``min(Q, pool size)`` best pooled candidates for ``x``."""
    W = np.asarray(W, dtype=np.float64)
    cand, selected = forest.query_batch(np.asarray(x)[None, :], Q, lambda ids: W[ids])
    return cand[selected[0]]
