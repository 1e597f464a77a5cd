"""Trajectory integration for control-driven ensembles, plus the bound suite.

For a fixed control the atoms decouple, so one classical 4th-order step
advances the whole (M, n) state block at once.  Fixed-step integration only:
the verification suites need deterministic, analyzable error, and adaptive
stepping would confound their slack factors.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DivergenceError
from .measure import EnsembleState, l2_norm
from .problem import ProblemSpec

_FLOAT_FMT = "%.17g"


class TimeGrid:
    """Uniform nodes t_0 .. t_N on [s, T].

    ``prefix``/``suffix`` share the parent's node values bitwise, so
    integrating a sub-horizon reproduces the parent's steps exactly.
    """

    def __init__(self, s, T, steps, _nodes=None):
        if not steps >= 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
        if not (0.0 <= s < T):
            raise ValueError(f"need 0 <= s < T, got s={s}, T={T}")
        self.s = float(s)
        self.T = float(T)
        self.steps = int(steps)
        if _nodes is None:
            _nodes = np.linspace(self.s, self.T, self.steps + 1)
        self.nodes = _nodes
        self.nodes.setflags(write=False)

    @property
    def dt(self):
        return (self.T - self.s) / self.steps

    def suffix(self, j):
        """Sub-grid over [t_j, T]."""
        if not 0 <= j < self.steps:
            raise ValueError(f"split index {j} out of range")
        return TimeGrid(self.nodes[j], self.T, self.steps - j, _nodes=self.nodes[j:])

    def prefix(self, j):
        """Sub-grid over [s, t_j]."""
        if not 0 < j <= self.steps:
            raise ValueError(f"split index {j} out of range")
        return TimeGrid(self.s, self.nodes[j], j, _nodes=self.nodes[: j + 1])

    def __repr__(self):
        return f"TimeGrid(s={self.s:.6g}, T={self.T:.6g}, steps={self.steps})"


class ControlSignal:
    """One control point per grid interval."""

    def __init__(self, grid: TimeGrid, values):
        vals = np.asarray(values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.shape[0] != grid.steps:
            raise ValueError(
                f"signal has {vals.shape[0]} values for {grid.steps} intervals"
            )
        vals = vals.copy()
        vals.setflags(write=False)
        self.grid = grid
        self.values = vals

    @classmethod
    def constant(cls, grid, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return cls(grid, np.tile(u, (grid.steps, 1)))

    @property
    def m(self):
        return self.values.shape[1]

    def restrict(self, j):
        """Tail of the signal from node j onward."""
        return ControlSignal(self.grid.suffix(j), self.values[j:])

    def check_admissible(self, p: ProblemSpec, tol=1e-9):
        """Verify each value lies in the convex hull of the set active then.

        Hull containment (not exact set membership) is the invariant: the
        descent solver legitimately returns hull points, while enumeration
        and grid solvers only ever construct exact set members.
        """
        for j in range(self.grid.steps):
            if not p.controls.hull_contains(self.grid.nodes[j], self.values[j], tol):
                raise ValueError(
                    f"control value on interval {j} is outside the admissible hull"
                )
        return True


@dataclass
class Trajectory:
    """Time-indexed ensemble states produced by :func:`integrate`."""

    grid: TimeGrid
    states: np.ndarray  # (steps + 1, M, n)
    control: ControlSignal
    space: object = None

    def state_at(self, j) -> EnsembleState:
        return EnsembleState(self.states[j], self.space)

    @property
    def terminal(self) -> EnsembleState:
        return EnsembleState(self.states[-1], self.space)

    def verify_consistency(self, p) -> bool:
        """Re-evaluate every step and compare bit-for-bit.

        The integrator is deterministic, so a stored trajectory must
        reproduce exactly under re-evaluation; anything else means the
        states array was tampered with or belongs to another problem.
        """
        if not np.array_equal(self.states[0],
                              np.asarray(self.states[0], dtype=float)):
            return False
        X = self.states[0]
        for j in range(self.grid.steps):
            h = self.grid.nodes[j + 1] - self.grid.nodes[j]
            X = _rk4_step(p.dynamics.field, self.grid.nodes[j], h, X,
                          self.control.values[j])
            if not np.array_equal(X, self.states[j + 1]):
                return False
        return True

    def to_csv(self, path):
        """Write rows (t, atom, x_0.., u_0..); the control column of the last
        node repeats the final interval's value so rows stay rectangular."""
        N, M, n = self.states.shape
        m = self.control.m
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "atom"] + [f"x{k}" for k in range(n)]
                        + [f"u{k}" for k in range(m)])
            for j in range(N):
                u = self.control.values[min(j, N - 2)]
                for i in range(M):
                    wr.writerow([_FLOAT_FMT % self.grid.nodes[j], i]
                                + [_FLOAT_FMT % v for v in self.states[j, i]]
                                + [_FLOAT_FMT % v for v in u])

    @classmethod
    def from_csv(cls, path, space):
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd)
            n = sum(1 for h in header if h.startswith("x"))
            m = sum(1 for h in header if h.startswith("u"))
            rows = [(float(r[0]), int(r[1]),
                     [float(v) for v in r[2:2 + n]],
                     [float(v) for v in r[2 + n:2 + n + m]]) for r in rd]
        ts = sorted({r[0] for r in rows})
        M = space.size
        states = np.empty((len(ts), M, n))
        controls = np.empty((len(ts) - 1, m))
        t_index = {t: j for j, t in enumerate(ts)}
        for t, atom, x, u in rows:
            j = t_index[t]
            states[j, atom] = x
            if j < len(ts) - 1:
                controls[j] = u
        grid = TimeGrid(ts[0], ts[-1], len(ts) - 1, _nodes=np.array(ts))
        sig = ControlSignal(grid, controls)
        return cls(grid=grid, states=states, control=sig, space=space)


def _rk4_step(fld, t, h, X, u):
    k1 = fld(t, X, u)
    k2 = fld(t + 0.5 * h, X + 0.5 * h * k1, u)
    k3 = fld(t + 0.5 * h, X + 0.5 * h * k2, u)
    k4 = fld(t + h, X + h * k3, u)
    return X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(p: ProblemSpec, s, phi: EnsembleState, u: ControlSignal) -> Trajectory:
    """Integrate the ensemble from (s, phi) under the signal u.

    Classical 4th-order one-step rule with the control frozen per interval;
    deterministic and exact for dynamics polynomial of degree <= 3 in t.
    Raises :class:`DivergenceError` at the first non-finite node.
    """
    grid = u.grid
    if abs(grid.s - s) > 1e-12:
        raise ValueError(f"signal grid starts at {grid.s}, expected {s}")
    if grid.T > p.horizon + 1e-12:
        raise ValueError(f"signal grid ends at {grid.T} beyond horizon {p.horizon}")
    if phi.values.shape != (p.space.size, p.n):
        raise ValueError(
            f"initial state shape {phi.values.shape} does not match problem "
            f"({p.space.size}, {p.n})"
        )
    fld = p.dynamics.field
    states = np.empty((grid.steps + 1, p.space.size, p.n))
    states[0] = phi.values
    X = phi.values
    for j in range(grid.steps):
        t = grid.nodes[j]
        h = grid.nodes[j + 1] - grid.nodes[j]
        X = _rk4_step(fld, t, h, X, u.values[j])
        if not np.all(np.isfinite(X)):
            atom = int(np.flatnonzero(~np.isfinite(X).all(axis=1))[0])
            raise DivergenceError(grid.nodes[j + 1], atom)
        states[j + 1] = X
    return Trajectory(grid=grid, states=states, control=u, space=phi.space)


@dataclass
class PropertyReport:
    """Aggregate of a randomized inequality suite with re-runnable witnesses."""

    name: str
    trials: int
    passed: bool
    max_ratio: dict
    violations: list = field(default_factory=list)
    slack: float = 1.05
    seed: Optional[int] = None

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        ratios = ", ".join(f"{k}={v:.4f}" for k, v in self.max_ratio.items())
        return f"[{status}] {self.name}: {self.trials} trials, max ratios {ratios}"


def random_signal(p: ProblemSpec, grid: TimeGrid, rng) -> ControlSignal:
    """Uniformly random admissible signal on the grid."""
    vals = np.empty((grid.steps, p.m))
    for j in range(grid.steps):
        pts = p.controls.active_set(grid.nodes[j])
        vals[j] = pts[rng.integers(pts.shape[0])]
    return ControlSignal(grid, vals)


def trajectory_bound_suite(p: ProblemSpec, trials: int, steps=200, seed=0,
                  slack=1.05, phi_scale=1.0) -> PropertyReport:
    """Randomized check of the four a-priori trajectory bounds.

    With c the growth certificate, k the Lipschitz certificate and
    mu = sqrt(total mass), each trial draws s <= tau <= t (grid nodes), data
    phi, phibar and an admissible signal, then verifies:

    1. ||x_{s,phi}(t)||            <= e^{c(t-s)} (||phi|| + c (t-s) mu)
    2. ||x_{s,phi}(t)-x_{s,phibar}(t)|| <= e^{k(t-s)} ||phi - phibar||
    3. ||x_{tau,phi}(t)-x_{s,phi}(t)||  <= c e^{k(t-tau)} e^{c(tau-s)}
                                           (mu + ||phi||) (tau - s)
    4. ||x_{s,phi}(t)-x_{s,phi}(tau)||  <= c e^{c(t-s)} (mu + ||phi||) (t - tau)

    The constants follow from the certificates by the usual comparison
    argument applied to 1 + |x|; each bound is allowed the multiplicative
    discretization slack.  Violations are recorded with witnesses, never
    raised.
    """
    rng = np.random.default_rng(seed)
    M, n = p.space.size, p.n
    c = p.dynamics.growth_c
    k = p.dynamics.lipschitz_k
    mu = np.sqrt(p.space.mass)
    max_ratio = {"growth": 0.0, "stability": 0.0, "shift": 0.0, "time": 0.0}
    violations = []

    def track(kind, lhs, rhs, trial):
        if rhs <= 0.0:
            ok = lhs <= 1e-12
            ratio = 0.0 if ok else np.inf
        else:
            ratio = lhs / rhs
            ok = ratio <= slack
        if ratio > max_ratio[kind]:
            max_ratio[kind] = ratio
        if not ok:
            violations.append({"bound": kind, "trial": trial,
                               "lhs": lhs, "rhs": rhs, "ratio": ratio})

    for trial in range(trials):
        s = rng.uniform(0.0, 0.5 * p.horizon)
        grid = TimeGrid(s, p.horizon, steps)
        j_tau = int(rng.integers(0, steps))
        j_t = int(rng.integers(j_tau, steps)) + 1
        tau, t = grid.nodes[j_tau], grid.nodes[j_t]
        phi = EnsembleState(phi_scale * rng.standard_normal((M, n)), p.space)
        phibar = EnsembleState(phi_scale * rng.standard_normal((M, n)), p.space)
        sig = random_signal(p, grid, rng)
        x = integrate(p, s, phi, sig)
        xbar = integrate(p, s, phibar, sig)

        norm_phi = l2_norm(phi)
        nx_t = np.sqrt(float(np.einsum(
            "i,ij,ij->", p.space.weights, x.states[j_t], x.states[j_t])))
        track("growth", nx_t,
              np.exp(c * (t - s)) * (norm_phi + c * (t - s) * mu), trial)

        d2 = x.states[j_t] - xbar.states[j_t]
        track("stability",
              np.sqrt(float(np.einsum("i,ij,ij->", p.space.weights, d2, d2))),
              np.exp(k * (t - s)) * l2_norm(
                  EnsembleState(phi.values - phibar.values, p.space)), trial)

        if j_tau > 0:
            x_shift = integrate(p, tau, phi, sig.restrict(j_tau))
            d3 = x_shift.states[j_t - j_tau] - x.states[j_t]
            track("shift",
                  np.sqrt(float(np.einsum("i,ij,ij->", p.space.weights, d3, d3))),
                  c * np.exp(k * (t - tau)) * np.exp(c * (tau - s))
                  * (mu + norm_phi) * (tau - s), trial)

        d4 = x.states[j_t] - x.states[j_tau]
        track("time",
              np.sqrt(float(np.einsum("i,ij,ij->", p.space.weights, d4, d4))),
              c * np.exp(c * (t - s)) * (mu + norm_phi) * (t - tau), trial)

    return PropertyReport(name="trajectory_bounds", trials=trials,
                          passed=not violations, max_ratio=max_ratio,
                          violations=violations, slack=slack, seed=seed)
