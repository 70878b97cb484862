"""Instance-conditioned adaptation model for routing problems."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ContractError, DimensionError, DomainError, ICAMError, InfeasibleError,
    NumericError, ParseError, SizeError,
)
from .instances import Instance, generate_set, generate_uniform, load_instances  # noqa: E402
from .model import ICAM, Batch, ModelConfig  # noqa: E402
from .rollout import rollout, rollout_many, solve_augmented  # noqa: E402
from .training import TrainingConfig, desk_preset, full_preset, train  # noqa: E402

__all__ = [
    "ICAM", "Batch", "ModelConfig", "Instance", "TrainingConfig",
    "generate_uniform", "generate_set", "load_instances",
    "rollout", "rollout_many", "solve_augmented",
    "train", "desk_preset", "full_preset",
    "ICAMError", "ContractError", "DimensionError", "DomainError",
    "InfeasibleError", "NumericError", "ParseError", "SizeError",
]
