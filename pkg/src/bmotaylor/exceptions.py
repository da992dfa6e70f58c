"""Exception types raised across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


class PreconditionError(ValueError):
    """An operation's precondition on its inputs does not hold."""


class ResourceError(RuntimeError):
    """A computation would exceed its configured budget."""


class ConfigurationError(ValueError):
    """An experiment or integrand configuration is malformed."""
