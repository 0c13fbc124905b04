class ConfigError(ValueError):
    """Invalid parameters or configuration."""


class SolverError(RuntimeError):
    """A numerical solver failed to converge or returned an invalid result."""

    def __init__(self, msg, residual=None):
        super().__init__(msg if residual is None else f"{msg} (residual {residual:.3e})")
        self.residual = residual


class InfeasibleGraspError(ValueError):
    """Force-closure problem has no feasible force assignment."""
