"""Exception types shared across the package.

The CLI maps these onto distinct exit codes: InputError -> 2,
TrainingFailure -> 3, anything else -> 1.
"""


class DissimError(Exception):
    """Base class for all package errors."""


class InputError(DissimError):
    """Rejected input: bad arguments, malformed files, invalid config."""


class PlacementError(DissimError):
    """No room left to place a shape after bounded retries."""


class SamplingExhausted(DissimError):
    """Negative sampling ran out of tries before meeting the semantic gate.

    Carries the best semantic difference seen, which signals that the gate
    threshold is too high for the pool at hand.
    """

    def __init__(self, message: str, best_difference: float):
        super().__init__(message)
        self.best_difference = float(best_difference)


class TrainingFailure(DissimError):
    """Training diverged or missed its quality bar; details in the message."""

    def __init__(self, message: str, summary: dict | None = None):
        super().__init__(message)
        self.summary = dict(summary) if summary else {}


class UndefinedMetricError(InputError):
    """Metric undefined for the given labels (e.g. single-class ROC)."""


class CheckpointError(InputError):
    """Missing or malformed checkpoint file."""
