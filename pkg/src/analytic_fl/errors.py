"""Exception hierarchy shared by every stage of the pipeline."""


class AFLError(Exception):
    """Base class for all package errors."""


class ContractError(AFLError, ValueError):
    """Inputs violate an operation's shape or value preconditions."""


class RankError(AFLError, ArithmeticError):
    """A matrix that must be full rank (or positive definite) is not."""


class NumericalError(AFLError, ArithmeticError):
    """A factorization or decomposition failed to converge."""


class FormatError(AFLError, ValueError):
    """A binary file does not conform to its declared layout."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(AFLError, ValueError):
    """An experiment configuration is malformed."""
