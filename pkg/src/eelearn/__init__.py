"""Online learning of competitive equilibria in exchange economies."""

from .economy import (
    Economy,
    ParametricUtility,
    amdahl,
    ces,
    demand,
    eval_features,
    eval_utility,
    linear,
    load_economy,
    sample_feedback,
)
from .errors import ConfigError, ContractError, DomainError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DomainError",
    "Economy",
    "ParametricUtility",
    "amdahl",
    "ces",
    "demand",
    "eval_features",
    "eval_utility",
    "linear",
    "load_economy",
    "sample_feedback",
]
