"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operands disagree in rank or shape."""


class ConfigError(ValueError):
    """A configuration value lies outside its documented domain."""


class ContractError(RuntimeError):
    """A runtime precondition was violated by the caller."""


class FormatError(ValueError):
    """A file does not match its documented binary layout."""

    def __init__(self, message: str, path=None):
        if path is not None:
            message = f"{message} [{path}]"
        super().__init__(message)
        self.path = path
