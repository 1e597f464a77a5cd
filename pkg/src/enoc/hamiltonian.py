"""Hamiltonian of the grid problem: exact minimum over the finite control set.

The costate is an :class:`~enoc.measure.EnsembleState` read through the
mass-weighted pairing, so the Hamiltonian value is
min over admissible u of sum_i w_i p_i . f(t, phi_i, u, w_i).
The minimum over the finite set is exact for the discretized problem; the
gap to a continuum control set is of the order of the set's dispersion
times the Lipschitz certificate times the costate norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, ScheduleError
from .measure import EnsembleState
from .problem import ProblemSpec

# A costate is an ensemble state acting on velocities via the weighted pairing.
Costate = EnsembleState


@dataclass
class HamiltonianResult:
    value: float
    minimizer: np.ndarray
    minimizer_index: int


def hamiltonian(p: ProblemSpec, t, phi: EnsembleState, costate: Costate) -> HamiltonianResult:
    """Minimize the paired velocity over the control set active at time t.

    Ties break to the lowest control index, which keeps downstream argmin
    tables deterministic.
    """
    if not (0.0 <= t <= p.horizon + 1e-12):
        raise ValueError(f"time {t} outside the horizon [0, {p.horizon}]")
    if phi.values.shape != (p.space.size, p.n):
        raise DimensionMismatchError(
            f"state shape {phi.values.shape} does not match problem"
        )
    if costate.values.shape != phi.values.shape:
        raise DimensionMismatchError(
            f"costate shape {costate.values.shape} != state shape {phi.values.shape}"
        )
    pts = p.controls.active_set(t)
    if pts.shape[0] == 0:
        raise ScheduleError(f"empty control set at t={t}")
    w = p.space.weights
    best_val = np.inf
    best_idx = 0
    for idx in range(pts.shape[0]):
        vel = p.dynamics.field(t, phi.values, pts[idx])
        val = float(np.einsum("i,ij,ij->", w, costate.values, vel))
        if val < best_val:
            best_val = val
            best_idx = idx
    return HamiltonianResult(value=best_val, minimizer=pts[best_idx].copy(),
                             minimizer_index=best_idx)
