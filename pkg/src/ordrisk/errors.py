"""Exception types shared across modules."""


class ConfigError(ValueError):
    """A configuration value is out of range or unknown."""


class ValidationError(ValueError):
    """An input value violates an operation's precondition."""
