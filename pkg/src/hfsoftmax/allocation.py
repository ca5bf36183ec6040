"""Phase-wise resource allocation for hashing-forest training (HF-A).

Training is cut into phases of a few epochs. At each phase boundary the
threshold ``tau_cp``, tree count ``L`` and rebuild interval ``T`` move along
linear schedules, and ``M`` is reset to the smallest quota whose average
top-M cumulative probability on a monitor batch reaches ``tau_cp``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diagnostics import ConcentrationProfile, min_m_for_threshold
from .softmax_core import softmax


@dataclass
class AllocationSchedule:
    tau_start: float = 0.7
    tau_end: float = 0.9
    L_start: int = 5
    L_end: int = 50
    T_start: int = 100
    T_end: int = 1000
    n_phases: int = 8
    epochs_per_phase: int = 2
    M_floor: int | None = None
    M_ceil: int | None = None

    def __post_init__(self):
        if not 0.0 < self.tau_start <= self.tau_end <= 1.0:
            raise ValueError("need 0 < tau_start <= tau_end <= 1")
        if not 1 <= self.L_start <= self.L_end:
            raise ValueError("need 1 <= L_start <= L_end")
        if not 1 <= self.T_start <= self.T_end:
            raise ValueError("need 1 <= T_start <= T_end")
        if self.n_phases < 1 or self.epochs_per_phase < 1:
            raise ValueError("n_phases and epochs_per_phase must be >= 1")

    def m_bounds(self, n_classes: int, batch_size: int) -> tuple[int, int]:
        """Clamp range for ``M``: defaults to ``[max(16, batch), N // 4]``."""
        floor = self.M_floor if self.M_floor is not None else max(16, batch_size)
        ceil = self.M_ceil if self.M_ceil is not None else n_classes // 4
        ceil = max(1, min(ceil, n_classes))
        return min(floor, ceil), ceil


@dataclass(frozen=True)
class AllocationState:
    phase_index: int
    M: int
    L: int
    T: int
    tau_cp: float


def _lerp(a: float, b: float, frac: float) -> float:
    return a + (b - a) * frac


def schedule_at(schedule: AllocationSchedule, phase: int) -> tuple[float, int, int]:
    """``(tau_cp, L, T)`` for a phase, interpolated linearly between the endpoints."""
    if not 0 <= phase < schedule.n_phases:
        raise ValueError(f"phase {phase} out of range [0, {schedule.n_phases})")
    frac = phase / (schedule.n_phases - 1) if schedule.n_phases > 1 else 0.0
    tau = _lerp(schedule.tau_start, schedule.tau_end, frac)
    L = max(1, int(round(_lerp(schedule.L_start, schedule.L_end, frac))))
    T = max(1, int(round(_lerp(schedule.T_start, schedule.T_end, frac))))
    return tau, L, T


def monitor_profiles(monitor_X: np.ndarray, W: np.ndarray) -> list[ConcentrationProfile]:
    """Full-softmax concentration profile of every monitor sample."""
    monitor_X = np.atleast_2d(np.asarray(monitor_X, dtype=np.float64))
    if monitor_X.shape[0] == 0:
        raise ValueError("monitor batch is empty")
    P = softmax(monitor_X @ np.asarray(W, dtype=np.float64).T)
    return [ConcentrationProfile.from_probs(p) for p in P]


def begin_phase(state: AllocationState | None, schedule: AllocationSchedule, monitor_X: np.ndarray,
                W: np.ndarray, *, phase: int | None = None, batch_size: int = 1) -> AllocationState:
    """Allocation for the next phase.

    ``phase`` defaults to one past ``state.phase_index`` (0 when ``state`` is
    None). The caller rebuilds the forest with the returned ``L``.
    """
    if phase is None:
        phase = 0 if state is None else state.phase_index + 1
    tau, L, T = schedule_at(schedule, phase)
    profiles = monitor_profiles(monitor_X, W)
    lo, hi = schedule.m_bounds(profiles[0].n_classes, batch_size)
    M = int(np.clip(min_m_for_threshold(profiles, tau), lo, hi))
    return AllocationState(phase, M, L, T, tau)
