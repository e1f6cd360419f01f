"""Detect semantic-segmentation errors by comparing an input image against a
synthetic re-rendering of its predicted labels.

The pipeline has three actors: a segmentation net S (toy encoder-decoder),
a conditional generator G (toy label->RGB net, or the deterministic oracle
renderer), and a dissimilarity detector D that scores real/synthetic patch
pairs. Everything runs at desk scale on a procedurally generated world with
exact ground truth for out-of-distribution objects and misclassifications.
"""

__version__ = "0.1.0"

from .errors import (
    DissimError,
    InputError,
    PlacementError,
    SamplingExhausted,
    TrainingFailure,
    UndefinedMetricError,
)

__all__ = [
    "__version__",
    "DissimError",
    "InputError",
    "PlacementError",
    "SamplingExhausted",
    "TrainingFailure",
    "UndefinedMetricError",
]
