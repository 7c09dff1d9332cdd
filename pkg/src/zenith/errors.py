"""Exception hierarchy shared by every module."""


class ZenithError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ZenithError, ValueError):
    """A configuration or shape invariant does not hold.

    ``violations`` lists every broken constraint, not only the first.
    """

    def __init__(self, message, violations=None):
        self.violations = list(violations) if violations else [message]
        super().__init__(message)


class InputError(ZenithError, ValueError):
    """Input data is inconsistent with the schema (e.g. out-of-vocabulary index)."""


class UsageError(ZenithError, TypeError):
    """An API was called the wrong way (e.g. backward on a non-scalar)."""


class UndefinedMetricError(ZenithError, ValueError):
    """A metric is undefined for the given input (e.g. AUC with one class)."""
