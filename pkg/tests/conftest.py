import pytest

from enoc import EnsembleState, ParameterSpace, builtin


@pytest.fixture
def two_atom_space():
    return ParameterSpace(weights=[0.5, 0.5], coords=[[0.0], [1.0]])


@pytest.fixture
def lin2():
    """Two-atom linear family with positive cost weights (smooth instance)."""
    return builtin("linear-ensemble", M=2, a=[0.5, -0.3], c=[2.0, 1.0])


@pytest.fixture
def lin2_zero_gain():
    return builtin("linear-ensemble", M=2, a=[0.0, 0.0], c=[2.0, 1.0])


@pytest.fixture
def steering():
    return builtin("decoupled-quadratic", M=1, tau=[0.5])


def random_state(space, n, rng, scale=1.0):
    return EnsembleState(scale * rng.standard_normal((space.size, n)), space)
