"""Exception hierarchy shared by the solvers and the simulators."""


class SwitchLQError(Exception):
    """Base class for every error raised by this package."""


class ModelError(SwitchLQError, ValueError):
    """Model data break a declared invariant (bounds, symmetry, stochasticity)."""


class GridError(SwitchLQError, ValueError):
    """Arguments fall outside a grid, or two fields live on different grids."""


class StabilityError(SwitchLQError):
    """The explicit backward scheme is unstable for the requested step."""


class PositivityError(SwitchLQError):
    """A solution that should be nonnegative definite is not, beyond tolerance."""


class BoundError(SwitchLQError):
    """A computed quantity exceeds its a priori bound."""


class ConvergenceError(SwitchLQError):
    """An iteration failed to converge or left its admissible ball."""


class SimulationError(SwitchLQError):
    """A simulated path became non-finite."""


class ConfigError(SwitchLQError, ValueError):
    """An experiment configuration failed validation."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
