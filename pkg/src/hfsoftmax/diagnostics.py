"""Concentration metrics for softmax outputs and gradients.

``cp_k`` measures how much probability mass sits on the K classes with the
highest responses; ``ncg_k`` measures the share of squared gradient norm those
classes carry. Both feed the adaptive controller and the per-iteration
metrics stream.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from .ranking import top_k, top_k_mask
from .softmax_core import check_active_ids, softmax

log = logging.getLogger(__name__)

# absorbs summation round-off when comparing cumulative mass against a threshold
_MASS_EPS = 1e-12


@dataclass(frozen=True)
class ConcentrationProfile:
    """Probability mass sorted in descending order plus its running sum."""

    mass: np.ndarray
    cumulative: np.ndarray

    @classmethod
    def from_probs(cls, p: np.ndarray) -> "ConcentrationProfile":
        mass = -np.sort(-np.asarray(p, dtype=np.float64))
        return cls(mass=mass, cumulative=np.cumsum(mass))

    @property
    def n_classes(self) -> int:
        return self.mass.shape[0]


@dataclass
class MetricsRecord:
    """Diagnostics for one training iteration.

    Quantities that are not measured on a given iteration are ``None`` and
    serialize to an empty CSV field.
    """

    iteration: int
    epoch: int
    selector: str
    M: int
    L: int
    T: int
    tau_cp: float | None
    loss: float
    holdout_acc: float | None
    cp_k: float | None
    ncg_k: float | None
    overlap_optimal: float | None
    select_time_us: float
    softmax_time_us: float
    rebuild_time_us: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def values(self) -> tuple:
        return tuple(getattr(self, c) for c in self.columns())

    def timing_free(self) -> tuple:
        return tuple(getattr(self, c) for c in self.columns() if not c.endswith("_time_us"))


def _check_k(K: int, n: int) -> None:
    if not 1 <= K <= n:
        raise ValueError(f"K={K} must lie in [1, {n}]")


def cp_k(p: np.ndarray, K: int) -> float:
    """Top-K cumulative probability of a probability vector.

    The top-K set is ranked by probability, which orders classes exactly as
    their responses do; ties go to the smaller class id.
    """
    p = np.asarray(p, dtype=np.float64)
    _check_k(K, p.shape[0])
    return float(p[top_k(p, K)].sum())


def cp_k_from_features(x: np.ndarray, W: np.ndarray, K: int) -> float:
    y = np.asarray(W, dtype=np.float64) @ np.asarray(x, dtype=np.float64)
    _check_k(K, y.shape[0])
    return float(softmax(y)[top_k(y, K)].sum())


def ncg_k(x: np.ndarray, W: np.ndarray, label: int, K: int) -> float:
    """Normalized top-K cumulative gradient energy of the full softmax loss.

    The stacked gradient ``g`` and its top-K masked copy ``g_hat`` satisfy
    ``g.g_hat = |g_hat|^2``, so the squared cosine reduces to the energy ratio
    ``sum_{top K} |g_i|^2 / sum_i |g_i|^2``. A zero gradient yields 1.0.
    """
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    n = W.shape[0]
    _check_k(K, n)
    if not 0 <= label < n:
        raise ValueError(f"label {label} out of range for {n} classes")
    y = W @ x
    delta = softmax(y)
    delta[label] -= 1.0
    energy = delta**2 * float(x @ x)
    total = energy.sum()
    if total == 0.0:
        log.debug("ncg_k: zero gradient, reporting 1.0")
        return 1.0
    return float(energy[top_k(y, K)].sum() / total)


def batch_concentration(
    X: np.ndarray, W: np.ndarray, labels: np.ndarray, K: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample CP_K, NCG_K and full-softmax probabilities for a batch."""
    X = np.asarray(X, dtype=np.float64)
    Y = X @ np.asarray(W, dtype=np.float64).T
    b, n = Y.shape
    _check_k(K, n)
    P = softmax(Y)
    top = top_k_mask(Y, K)
    cp = np.where(top, P, 0.0).sum(axis=1)
    delta = P.copy()
    delta[np.arange(b), labels] -= 1.0
    energy = delta**2 * np.einsum("ij,ij->i", X, X)[:, None]
    total = energy.sum(axis=1)
    captured = np.where(top, energy, 0.0).sum(axis=1)
    zero = total == 0.0
    ncg = np.divide(captured, total, out=np.ones(b), where=~zero)
    return cp, ncg, P


def overlap_with_optimal(S, x: np.ndarray, W: np.ndarray) -> float:
    """Fraction of ``S`` that lies in the optimal top-``|S|`` set for ``x``."""
    W = np.asarray(W, dtype=np.float64)
    ids = check_active_ids(S, W.shape[0])
    best = top_k(W @ np.asarray(x, dtype=np.float64), ids.size)
    return np.intersect1d(ids, best, assume_unique=True).size / ids.size


def min_m_for_threshold(profiles, tau: float) -> int:
    """Smallest M whose average top-M cumulative probability reaches ``tau``.

    Returns the class count if no M reaches it (possible only for ``tau``
    at or very near 1).
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    profiles = list(profiles)
    if not profiles:
        raise ValueError("at least one concentration profile is required")
    mean_cum = np.mean([p.cumulative for p in profiles], axis=0)
    hit = np.flatnonzero(mean_cum >= tau - _MASS_EPS)
    return int(hit[0]) + 1 if hit.size else int(mean_cum.shape[0])
