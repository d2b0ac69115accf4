"""Model-accelerated PPO for multi-vehicle intersection crossing."""
from .config import RunConfig, load_config
from .env import EnvConfig, IntersectionEnv
from .geometry import IntersectionLayout, VehicleType, build_paths
from .networks import PolicyValueNet
from .trainer import Trainer, evaluate, train

__all__ = [
    "EnvConfig",
    "IntersectionEnv",
    "IntersectionLayout",
    "PolicyValueNet",
    "RunConfig",
    "Trainer",
    "VehicleType",
    "build_paths",
    "evaluate",
    "load_config",
    "train",
]
__version__ = "0.1.0"
