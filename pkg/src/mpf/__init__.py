"""Multi-perspective fusion: fit perspective mixture weights to a baseline feature
distribution, then generate responses by weighted perspective sampling."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    Benchmark,
    DecompositionResult,
    FeatureHistogram,
    FeatureScores,
    GenerationRecord,
    HyperParams,
    Perspective,
    ValidationError,
    Weights,
    default_perspectives,
    normalize,
    validate_benchmark,
)
from .metrics import (  # noqa: E402
    calibration_error,
    compose_histogram,
    kl_divergence,
    l2_regularizer,
    objective,
    sparsity_penalty,
)
from .mitigator import SweepGrid, decompose_benchmark, grid_search_oracle, optimize, sweep  # noqa: E402

__all__ = [
    "Benchmark", "DecompositionResult", "FeatureHistogram", "FeatureScores", "GenerationRecord",
    "HyperParams", "Perspective", "SweepGrid", "ValidationError", "Weights",
    "calibration_error", "compose_histogram", "decompose_benchmark", "default_perspectives",
    "grid_search_oracle", "kl_divergence", "l2_regularizer", "normalize", "objective",
    "optimize", "sparsity_penalty", "sweep", "validate_benchmark",
]
