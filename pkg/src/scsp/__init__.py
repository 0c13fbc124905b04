"""Contact-rich manipulation planning with a surrogate contact model."""
from .dynamics import Pose, SystemParams, WorldState
from .errors import ConfigError, InfeasibleGraspError, SolverError

__all__ = ["Pose", "SystemParams", "WorldState", "ConfigError", "InfeasibleGraspError", "SolverError"]
__version__ = "0.1.0"
