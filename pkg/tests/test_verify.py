import numpy as np
import pytest

from enoc import (Axis, CapabilityError, ControlSchedule, ControlSignal,
                  DynamicsSpec, EnsembleState, ParameterSpace, ProblemSpec,
                  TerminalCostSpec, TimeGrid, builtin,
                  cost_lipschitz_bound, epigraph_invariance, hjb_residual,
                  integrate, oscillation_diagnostic, terminal_limit,
                  terminal_functional, value_dp, value_oracle)


def drift_free_smooth():
    space = ParameterSpace(weights=[1.0], coords=[[0.0]])
    dyn = DynamicsSpec(eval=lambda t, x, u, i: np.zeros_like(x),
                       eval_ens=lambda t, X, u: np.zeros_like(X),
                       growth_c=1.0, lipschitz_k=1.0,
                       omega_modulus=lambda r: 0.0)
    cost = TerminalCostSpec(eval=lambda x, i: float(np.sin(x[0])),
                            eval_ens=lambda X: np.sin(X[..., 0]),
                            lower_bound_a=np.full(1, -1.0), lower_bound_b=0.0)
    return ProblemSpec(space=space, n=1, m=1, dynamics=dyn, cost=cost,
                       controls=ControlSchedule.constant([[-1.0], [0.0], [1.0]]),
                       horizon=1.0)


# -- finite-difference residual --------------------------------------------------

def test_hjb_drift_free_residual_is_zero():
    p = drift_free_smooth()
    vg = value_dp(p, [Axis(-2.0, 2.0, 21)], TimeGrid(0.0, 1.0, 10))
    rep = hjb_residual(vg, p)
    assert rep.passed
    assert rep.worst == pytest.approx(0.0, abs=1e-14)
    assert rep.details["skipped_kinks"] == 0


def test_hjb_smooth_linear_instance_within_tolerance(lin2):
    vg = value_dp(lin2, [Axis(-5.0, 5.0, 41)] * 2, TimeGrid(0.0, 1.0, 50))
    rep = hjb_residual(vg, lin2)
    assert rep.passed
    assert rep.worst <= rep.tolerance


def test_hjb_boundary_sample_rejected(lin2):
    vg = value_dp(lin2, [Axis(-2.0, 2.0, 9)] * 2, TimeGrid(0.0, 1.0, 5))
    with pytest.raises(ValueError, match="interior"):
        hjb_residual(vg, lin2, samples=[(0, (3, 3))])
    with pytest.raises(ValueError, match="boundary"):
        hjb_residual(vg, lin2, samples=[(2, (0, 3))])


def test_hjb_explicit_interior_samples(lin2):
    vg = value_dp(lin2, [Axis(-2.0, 2.0, 9)] * 2, TimeGrid(0.0, 1.0, 5))
    rep = hjb_residual(vg, lin2, samples=[(2, (4, 4)), (3, (2, 5))])
    assert (rep.details["evaluated"] + rep.details["skipped_kinks"]
            + rep.details["skipped_boundary"]) == 2


def test_hjb_matches_pointwise_hamiltonian_operation(lin2):
    # the vectorized sweep must agree with the costate-pairing operation
    from enoc import hamiltonian
    vg = value_dp(lin2, [Axis(-3.0, 3.0, 25)] * 2, TimeGrid(0.0, 1.0, 20))
    j = 10
    idx = (12, 12)
    dz = vg.axes[0].spacing
    grad = np.array([
        (vg.values[j][idx[0] + 1, idx[1]] - vg.values[j][idx[0] - 1, idx[1]])
        / (2 * dz),
        (vg.values[j][idx[0], idx[1] + 1] - vg.values[j][idx[0], idx[1] - 1])
        / (2 * dz),
    ])
    xi_t = (vg.values[j + 1][idx] - vg.values[j - 1][idx]) / (2 * vg.grid.dt)
    z = np.array([vg.axes[0].nodes[idx[0]], vg.axes[1].nodes[idx[1]]])
    phi = EnsembleState(z.reshape(2, 1), lin2.space)
    costate = EnsembleState((grad / lin2.space.weights).reshape(2, 1), lin2.space)
    h = hamiltonian(lin2, vg.grid.nodes[j], phi, costate)
    rep = hjb_residual(vg, lin2, samples=[(j, idx)])
    if rep.details["evaluated"]:
        assert rep.worst == pytest.approx(abs(xi_t + h.value), abs=1e-12)


# -- invariance ---------------------------------------------------------------

def test_epigraph_drift_free_exact():
    p = drift_free_smooth()
    phi = EnsembleState([[0.4]], p.space)
    rep = epigraph_invariance(p, 0.0, phi, TimeGrid(0.0, 1.0, 4))
    assert rep.passed
    assert rep.details["drift"] == 0.0
    assert rep.details["min_margin"] >= 0.0


def test_epigraph_linear_family(lin2):
    phi = EnsembleState([[0.3], [0.4]], lin2.space)
    rep = epigraph_invariance(lin2, 0.0, phi, TimeGrid(0.0, 1.0, 4))
    assert rep.passed
    assert rep.details["signals"] == 81
    assert rep.details["drift"] <= 1e-8


def test_epigraph_suboptimal_control_strictly_increases_value(lin2):
    # a deliberately wrong constant control must carry positive margin
    phi = EnsembleState([[0.3], [0.4]], lin2.space)
    grid = TimeGrid(0.0, 1.0, 4)
    sig = ControlSignal.constant(grid, 1.0)  # optimal is -1: worst choice
    traj = integrate(lin2, 0.0, phi, sig)
    vs = []
    for j in range(5):
        state = EnsembleState(traj.states[j], lin2.space)
        if j < 4:
            vs.append(value_oracle(lin2, grid.nodes[j], state, grid.suffix(j)).value)
        else:
            vs.append(terminal_functional(lin2, state))
    gaps = np.diff(vs)
    assert np.all(gaps > 1e-3)


def test_epigraph_reproducible(lin2):
    phi = EnsembleState([[0.1], [-0.2]], lin2.space)
    a = epigraph_invariance(lin2, 0.0, phi, TimeGrid(0.0, 1.0, 3))
    b = epigraph_invariance(lin2, 0.0, phi, TimeGrid(0.0, 1.0, 3))
    assert a.worst == b.worst
    assert a.details["min_margin"] == b.details["min_margin"]


# -- terminal limit ---------------------------------------------------------------

def test_terminal_limit_drift_free_zero_differences():
    p = drift_free_smooth()
    phi = EnsembleState([[0.4]], p.space)
    rep = terminal_limit(p, phi, [0.2, 0.1, 0.05], cost_lipschitz=1.0)
    assert rep.passed
    for row in rep.details["table"]:
        assert row["difference"] == pytest.approx(0.0, abs=1e-14)


def test_terminal_limit_linear_family(lin2):
    phi = EnsembleState([[0.3], [0.4]], lin2.space)
    lip = cost_lipschitz_bound(lin2, radius=5.0)
    rep = terminal_limit(lin2, phi, [0.2, 0.1, 0.05, 0.025], cost_lipschitz=lip)
    assert rep.passed
    assert rep.details["empirical_slope"] <= rep.tolerance
    diffs = [row["difference"] for row in rep.details["table"]]
    assert all(a >= b for a, b in zip(diffs, diffs[1:]))


def test_terminal_limit_requires_certificate(lin2):
    phi = EnsembleState([[0.0], [0.0]], lin2.space)
    with pytest.raises(ValueError, match="Lipschitz"):
        terminal_limit(lin2, phi, [0.1])


def test_terminal_limit_rejects_bad_gaps(lin2):
    phi = EnsembleState([[0.0], [0.0]], lin2.space)
    with pytest.raises(ValueError):
        terminal_limit(lin2, phi, [1.5], cost_lipschitz=1.0)


# -- oscillation diagnostic ---------------------------------------------------------

def test_oscillation_parameter_free_field_is_zero():
    p = builtin("decoupled-quadratic", M=3, tau=[0.0, 0.1, 0.2])
    phi = EnsembleState.zeros(p.space, 1)
    rep = oscillation_diagnostic(p, 0.0, phi, 3, [0.3, 0.8, 2.0], steps=20)
    assert rep.passed
    for row in rep.details["curves"]:
        assert row["oscillation"] == pytest.approx(0.0, abs=1e-26)


def test_oscillation_single_atom_is_zero():
    p = builtin("decoupled-quadratic", M=1, tau=[0.3])
    phi = EnsembleState.zeros(p.space, 1)
    rep = oscillation_diagnostic(p, 0.0, phi, 2, [0.5, 1.0], steps=20)
    assert rep.passed
    assert all(r["oscillation"] == 0.0 for r in rep.details["curves"])


def test_oscillation_linear_family_below_bound(lin2):
    phi = EnsembleState([[0.5], [0.5]], lin2.space)
    rep = oscillation_diagnostic(lin2, 0.0, phi, 5, [0.4, 0.9, 1.5], steps=50,
                                 seed=3)
    assert rep.passed
    assert all(v > 0 for v in rep.details["ball_mass"].values())


def test_oscillation_requires_modulus():
    space = ParameterSpace(weights=[0.5, 0.5], coords=[[0.0], [1.0]])
    dyn = DynamicsSpec(eval=lambda t, x, u, i: np.zeros_like(x),
                       growth_c=1.0, lipschitz_k=1.0)
    cost = TerminalCostSpec(eval=lambda x, i: 0.0, lower_bound_a=np.zeros(2),
                            lower_bound_b=0.0)
    p = ProblemSpec(space=space, n=1, m=1, dynamics=dyn, cost=cost,
                    controls=ControlSchedule.constant([[0.0]]), horizon=1.0)
    with pytest.raises(CapabilityError):
        oscillation_diagnostic(p, 0.0, EnsembleState.zeros(space, 1), 1, [0.5])


def test_oscillation_reproducible_with_seed(lin2):
    phi = EnsembleState([[0.5], [0.5]], lin2.space)
    a = oscillation_diagnostic(lin2, 0.0, phi, 3, [0.5], steps=30, seed=7)
    b = oscillation_diagnostic(lin2, 0.0, phi, 3, [0.5], steps=30, seed=7)
    assert a.worst == b.worst
