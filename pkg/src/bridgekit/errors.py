"""Exception hierarchy. Each CLI-visible failure maps to one exit status."""


class BridgeKitError(Exception):
    category = "internal"
    exit_code = 1


class DomainError(BridgeKitError, ValueError):
    """An argument lies outside the set where the operation is defined."""

    category = "domain"


class SingularityError(DomainError):
    """A bridge drift was requested at (or past) the terminal time."""

    category = "singularity"


class ContractError(BridgeKitError, ValueError):
    category = "contract"


class UnsupportedDomainError(ContractError):
    category = "unsupported"


class ResourceError(BridgeKitError):
    category = "resource"


class ConfigError(BridgeKitError, ValueError):
    category = "config"
    exit_code = 2


class DivergenceError(BridgeKitError, ArithmeticError):
    """Non-finite numbers appeared during simulation or training."""

    category = "divergence"
    exit_code = 3

    def __init__(self, message, step=None, **info):
        super().__init__(message)
        self.step = step
        self.info = info


class NumericalWarning(UserWarning):
    """A numerically degenerate case was replaced by its limiting value."""
