"""Random walks in balanced random environments: simulation and numerical checks."""

__version__ = "0.1.0"

from .env import EnvSpec, Environment, generate, load_env, remove_laziness, save_env, validate
from .lattice import GridFunction, LatticeDomain

__all__ = [
    "EnvSpec", "Environment", "GridFunction", "LatticeDomain", "generate", "load_env",
    "remove_laziness", "save_env", "validate", "__version__",
]
