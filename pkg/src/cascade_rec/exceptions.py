"""Exception hierarchy shared by every module."""


class CascadeRecError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CascadeRecError, ValueError):
    """Invalid configuration value or combination of values."""


class ContractError(CascadeRecError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class ParseError(CascadeRecError, ValueError):
    """A malformed line in an interaction log."""

    def __init__(self, line_no, reason):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"line {line_no}: {reason}")


class SplitError(CascadeRecError, ValueError):
    """The data cannot be split as requested."""


class SamplingError(CascadeRecError, RuntimeError):
    """Training triples cannot be drawn (e.g. a user has seen every item)."""


class TrainingDivergence(CascadeRecError, FloatingPointError):
    """The loss or the gradients became non-finite."""
