"""Full and selective softmax with hand-derived cross-entropy gradients.

The selective path restricts the softmax to a set of active class ids,
renormalizes over that set and scatters the result back to a length-N
vector that is zero outside the set. Everything here is a pure function of
its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class LabelNotSelectedError(ValueError):
    """The ground-truth label is missing from the active set."""


def softmax(y: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0 or y.shape[-1] == 0:
        raise ValueError("softmax of an empty vector is undefined")
    z = y - y.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def log_softmax(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0 or y.shape[-1] == 0:
        raise ValueError("log_softmax of an empty vector is undefined")
    z = y - y.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def check_active_ids(ids, n_classes: int) -> np.ndarray:
    """Validate an active set and return it as a sorted int64 array.

    Raises:
        ValueError: if the set is empty, has duplicates or ids outside
            ``[0, n_classes)``.
    """
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise ValueError(f"active set must be 1-D, got shape {ids.shape}")
    if ids.size == 0:
        raise ValueError("active set is empty")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError(f"active set ids must be integers, got {ids.dtype}")
    ids = ids.astype(np.int64, copy=False)
    # selectors emit strictly increasing ids; sort and look for duplicates otherwise
    if ids.size > 1 and not np.all(ids[1:] > ids[:-1]):
        ids = np.sort(ids)
        if np.any(ids[1:] == ids[:-1]):
            raise ValueError("active set contains duplicate ids")
    if ids[0] < 0 or ids[-1] >= n_classes:
        raise ValueError(f"active set ids must lie in [0, {n_classes})")
    return ids


def _rows(W: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """``W[ids]`` for sorted ids, without a copy when ``ids`` covers every row."""
    if ids.size == W.shape[0]:
        return W
    return W[ids]


def _check_features(x: np.ndarray, W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError(f"weight matrix must be 2-D, got shape {W.shape}")
    if x.ndim != 1 or x.shape[0] != W.shape[1]:
        raise ValueError(
            f"feature length {x.shape} does not match weight dimension {W.shape[1]}"
        )
    return x, W


def forward_full(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Posterior ``softmax(W @ x)`` over all classes."""
    x, W = _check_features(x, W)
    return softmax(W @ x)


def forward_selective(x: np.ndarray, W: np.ndarray, S) -> np.ndarray:
    """Selective softmax: softmax over the rows in ``S``, zero elsewhere.

    The returned vector has length ``W.shape[0]`` and is indexed by class id,
    whatever order ``S`` was given in.
    """
    x, W = _check_features(x, W)
    ids = check_active_ids(S, W.shape[0])
    if ids.size == W.shape[0]:
        return softmax(W @ x)
    p = np.zeros(W.shape[0])
    p[ids] = softmax(W[ids] @ x)
    return p


@dataclass(frozen=True)
class GradientRows:
    """Per-row weight gradients for one sample over its active set.

    Attributes:
        ids: Sorted class ids; row ``k`` of ``rows`` is the gradient at ``ids[k]``.
        rows: Array of shape ``(len(ids), D)``.
        dx: Gradient of the loss with respect to the feature vector.
        loss: ``-log`` of the restricted probability of the label.
    """

    ids: np.ndarray
    rows: np.ndarray
    dx: np.ndarray
    loss: float

    def as_dict(self) -> dict[int, np.ndarray]:
        return {int(i): r for i, r in zip(self.ids, self.rows)}


def backward_selective(x: np.ndarray, W: np.ndarray, S, label: int) -> GradientRows:
    """Cross-entropy loss and gradients of the selective softmax for one sample.

    For every active class ``i`` the row gradient is ``(p_i - [i == label]) x``
    where ``p`` is the softmax restricted to ``S``. Rows outside ``S`` get no
    gradient at all.

    Raises:
        LabelNotSelectedError: if ``label`` is not in ``S``.
    """
    x, W = _check_features(x, W)
    ids = check_active_ids(S, W.shape[0])
    pos = np.searchsorted(ids, label)
    if pos >= ids.size or ids[pos] != label:
        raise LabelNotSelectedError(f"label {label} is not in the active set")
    W_sub = _rows(W, ids)
    logits = W_sub @ x
    logp = log_softmax(logits)
    delta = np.exp(logp)
    delta[pos] -= 1.0
    return GradientRows(
        ids=ids,
        rows=np.outer(delta, x),
        dx=W_sub.T @ delta,
        loss=float(-logp[pos]),
    )


def batch_loss_and_grads(
    X: np.ndarray, W_sub: np.ndarray, target_pos: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Selective softmax loss over a mini-batch that shares one active set.

    Args:
        X: Features, shape ``(b, D)``.
        W_sub: Gathered weight rows of the active set, shape ``(m, D)``.
        target_pos: Position of each sample's label inside the active set.

    Returns:
        ``(losses, probs, grad_rows, dX)`` where ``probs`` has shape ``(b, m)``,
        ``grad_rows`` is the sum of per-sample row gradients ``(m, D)`` and
        ``dX`` holds the per-sample feature gradients.
    """
    logp = log_softmax(X @ W_sub.T)
    rows = np.arange(X.shape[0])
    losses = -logp[rows, target_pos]
    probs = np.exp(logp)
    delta = probs.copy()
    delta[rows, target_pos] -= 1.0
    return losses, probs, delta.T @ X, delta @ W_sub
