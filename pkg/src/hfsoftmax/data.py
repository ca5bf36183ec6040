"""Synthetic many-class data with neighbouring classes.

Class centres are scattered around a few super-cluster directions on the
unit sphere, so every class has a handful of easily confused neighbours.
Classes can also come in small tight groups inside a super-cluster. Samples
are noisy copies of their class centre projected back to the sphere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hashing_forest import normalize_rows

NUISANCE_UNITS = ("super", "group")


@dataclass
class DatasetSpec:
    n_classes: int = 2000
    dim: int = 64
    samples_per_class: int = 50
    n_super: int = 40
    class_spread: float = 0.6
    noise: float = 0.5
    nuisance_rank: int = 0
    nuisance_scale: float = 0.0
    nuisance_by: str = "super"
    group_size: int = 1
    group_spread: float = 0.0
    holdout_per_class: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if min(self.noise, self.class_spread, self.nuisance_scale, self.group_spread) < 0:
            raise ValueError("noise, class_spread, group_spread and nuisance_scale must be non-negative")
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")
        if self.nuisance_by not in NUISANCE_UNITS:
            raise ValueError(f"nuisance_by must be one of {NUISANCE_UNITS}, got {self.nuisance_by!r}")
        if not 0 <= self.nuisance_rank <= self.dim:
            raise ValueError(f"nuisance_rank must lie in [0, dim], got {self.nuisance_rank}")
        if self.n_super < 1 or self.dim < 1 or self.samples_per_class < 1:
            raise ValueError("n_super, dim and samples_per_class must be >= 1")
        if not 0 <= self.holdout_per_class < self.samples_per_class:
            raise ValueError("holdout_per_class must lie in [0, samples_per_class)")


@dataclass
class SyntheticDataset:
    spec: DatasetSpec
    centers: np.ndarray
    super_of: np.ndarray
    group_of: np.ndarray
    X: np.ndarray
    y: np.ndarray
    train_idx: np.ndarray
    holdout_idx: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    @property
    def X_train(self) -> np.ndarray:
        return self.X[self.train_idx]

    @property
    def y_train(self) -> np.ndarray:
        return self.y[self.train_idx]

    @property
    def X_holdout(self) -> np.ndarray:
        return self.X[self.holdout_idx]

    @property
    def y_holdout(self) -> np.ndarray:
        return self.y[self.holdout_idx]


def generate_dataset(spec: DatasetSpec) -> SyntheticDataset:
    """Deterministic dataset for ``spec``.

    Perturbations are isotropic Gaussians scaled by ``1/sqrt(dim)``, so
    ``class_spread`` and ``noise`` are roughly the perturbation norm relative
    to a unit vector.

    With ``group_size > 1`` consecutive class ids form groups of that size.
    Each group centre sits ``class_spread`` away from its super-cluster
    direction, and the group's classes sit ``group_spread`` away from the
    group centre. With ``group_size = 1`` every class is its own group and
    ``group_spread`` is unused.

    With ``nuisance_rank > 0`` every super-cluster (``nuisance_by="super"``)
    or every group (``nuisance_by="group"``) also gets a random
    ``nuisance_rank``-dimensional subspace, and each sample is pushed along
    its unit's subspace by a Gaussian of norm about ``nuisance_scale``.
    Classes of one unit then share directions of large irrelevant variation,
    which a nearest-centre rule cannot discount.
    """
    rng = np.random.default_rng(spec.seed)
    n, d, k, g = spec.n_classes, spec.dim, spec.samples_per_class, spec.group_size
    scale = 1.0 / np.sqrt(d)
    supers = normalize_rows(rng.normal(size=(spec.n_super, d)))
    if g == 1:
        group_of = np.arange(n)
        super_of = rng.integers(spec.n_super, size=n)
        centers = normalize_rows(supers[super_of] + spec.class_spread * scale * rng.normal(size=(n, d)))
    else:
        n_groups = -(-n // g)
        group_of = np.arange(n) // g
        super_of_group = rng.integers(spec.n_super, size=n_groups)
        group_centers = supers[super_of_group] + spec.class_spread * scale * rng.normal(size=(n_groups, d))
        super_of = super_of_group[group_of]
        centers = normalize_rows(group_centers[group_of] + spec.group_spread * scale * rng.normal(size=(n, d)))

    y = np.repeat(np.arange(n), k)
    noise = rng.normal(size=(n * k, d))
    X = centers[y] + spec.noise * scale * noise
    nuisance = spec.nuisance_rank > 0 and spec.nuisance_scale > 0
    if nuisance:
        r = spec.nuisance_rank
        unit_of = super_of if spec.nuisance_by == "super" else group_of
        n_units = spec.n_super if spec.nuisance_by == "super" else int(group_of[-1]) + 1
        bases = np.linalg.qr(rng.normal(size=(n_units, d, r)))[0]
        z = rng.normal(size=(n * k, r)) * (spec.nuisance_scale / np.sqrt(r))
        units = unit_of[y]
        order = np.argsort(units, kind="stable")
        bounds = np.searchsorted(units[order], np.arange(n_units + 1))
        for u in range(n_units):
            rows = order[bounds[u]:bounds[u + 1]]
            X[rows] += z[rows] @ bases[u].T
    X = normalize_rows(X) if spec.noise > 0 or nuisance else centers[y]

    within = np.argsort(rng.random((n, k)), axis=1)
    holdout = within[:, : spec.holdout_per_class] + (np.arange(n) * k)[:, None]
    is_holdout = np.zeros(n * k, dtype=bool)
    is_holdout[holdout.ravel()] = True
    return SyntheticDataset(
        spec=spec,
        centers=centers,
        super_of=super_of,
        group_of=group_of,
        X=X,
        y=y,
        train_idx=np.flatnonzero(~is_holdout),
        holdout_idx=np.flatnonzero(is_holdout),
    )
