"""Deterministic top-k selection: largest values first, ties by ascending index."""

from __future__ import annotations

import numpy as np


def top_k(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries of a 1-D array, sorted ascending.

    Ties at the cut-off are resolved in favour of the smaller index.
    """
    values = np.asarray(values)
    n = values.shape[0]
    if not 0 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} values")
    if k == n:
        return np.arange(n)
    if k == 0:
        return np.empty(0, dtype=np.int64)
    return np.flatnonzero(top_k_mask(values[None, :], k)[0])


def top_k_mask(scores: np.ndarray, k, valid: np.ndarray | None = None) -> np.ndarray:
    """Row-wise boolean mask of the top-``k`` entries of a 2-D score matrix.

    Args:
        scores: Shape ``(b, n)``. Columns are assumed to be in ascending id order.
        k: Quota, scalar or one value per row.
        valid: Optional mask of eligible entries; rows with fewer than ``k``
            eligible entries select all of them.
    """
    scores = np.asarray(scores, dtype=np.float64)
    b, n = scores.shape
    if valid is not None:
        scores = np.where(valid, scores, -np.inf)
        n_valid = valid.sum(axis=1)
    else:
        n_valid = np.full(b, n)
    k = np.minimum(np.broadcast_to(np.asarray(k, dtype=np.int64), (b,)), n_valid)
    mask = np.zeros((b, n), dtype=bool)
    if n == 0:
        return mask
    kk = np.clip(k, 1, n)
    # k-th largest value of each row
    if np.all(kk == kk[0]):
        thresh = np.partition(scores, n - kk[0], axis=1)[:, n - kk[0]][:, None]
    else:
        thresh = np.sort(scores, axis=1)[np.arange(b), n - kk][:, None]
    above = scores > thresh
    tied = scores == thresh
    need = (k - above.sum(axis=1))[:, None]
    mask = above | (tied & (np.cumsum(tied, axis=1) <= need))
    if valid is not None:
        mask &= valid
    mask[k == 0] = False
    return mask
