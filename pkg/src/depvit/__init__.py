"""Reversed-attention transformer with dependency-tree induction and
dependency-driven dynamic token pooling, plus the evaluation and cost
tooling needed to exercise it end to end on synthetic data."""

from .errors import (
    ConfigError,
    DepvitError,
    FormatError,
    IntegrityError,
    NumericError,
    ShapeError,
    TrainingError,
    UsageError,
)

__all__ = [
    "ConfigError",
    "DepvitError",
    "FormatError",
    "IntegrityError",
    "NumericError",
    "ShapeError",
    "TrainingError",
    "UsageError",
]

__version__ = "0.1.0"
