"""Exception types shared across the package.

The CLI maps these onto exit codes: config/usage problems exit 1,
runtime data problems exit 2.
"""


class InvalidInputError(ValueError):
    """An operation received an argument outside its domain."""


class InvalidConfigError(ValueError):
    """A configuration value or file is unusable."""


class DegenerateFitError(ValueError):
    """A least-squares fit has no unique solution (too few or collinear samples)."""


class EmptyDomainError(ValueError):
    """A metric was asked to average over an empty set."""


class DataError(RuntimeError):
    """A dataset, frame, or checkpoint could not be read."""
