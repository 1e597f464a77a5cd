"""Exception and warning types shared across the package."""


class EnocError(Exception):
    """Base class for errors raised by this package."""


class DimensionMismatchError(EnocError, ValueError):
    """Shapes of states, costates or controls are inconsistent."""


class DivergenceError(EnocError, RuntimeError):
    """Integration produced a non-finite state.

    Carries the first offending time node and atom index.
    """

    def __init__(self, t, atom):
        self.t = float(t)
        self.atom = int(atom)
        super().__init__(f"non-finite state at t={self.t:.6g}, atom {self.atom}")


class CapacityError(EnocError, RuntimeError):
    """An enumeration budget would be exceeded; shrink the grid or control set."""


class CapabilityError(EnocError, RuntimeError):
    """The problem lacks an optional capability (modulus, derivatives) a method needs."""


class ScheduleError(EnocError, ValueError):
    """The control schedule has no admissible points at the queried time."""


class TerminalValueError(EnocError, ValueError):
    """Terminal cost evaluated to NaN or +inf on a state grid node."""


class GridCoverageWarning(UserWarning):
    """Value-grid axes do not cover the a-priori reachable set."""
