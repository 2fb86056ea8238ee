"""Exception types shared across the package."""


class ContractError(ValueError):
    """An input violates a documented precondition."""


class DomainError(ContractError):
    """A value lies outside the domain of a map (e.g. an allocation outside [0, 1])."""


class ConfigError(ContractError):
    """An experiment configuration is invalid."""
