"""Offline meta-RL on point-mass task families.

Representation learning via a reconstruction-trained task auto-encoder,
probing-data alignment via policy/dynamics/reward relabeling, and
TD3+BC meta-policy optimization -- deterministic and desk-scale.
"""

__version__ = "0.1.0"

from .envs import TaskSpec, env_step, sample_tasks, true_model  # noqa: F401
from .errors import ConfigError, DataFormatError, GentleError, MissingInputError  # noqa: F401
from .rng import Rng  # noqa: F401
from .trainer import TrainConfig, meta_train  # noqa: F401
