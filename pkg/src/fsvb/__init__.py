"""Variational inference for high-dimensional factor stochastic volatility."""

from .families import (
    SrnBlock,
    TbnBlock,
    VariationalSpec,
    count_variational_params,
)
from .model import (
    EvaluationError,
    LatentStates,
    ModelSpec,
    ThetaNatural,
    ThetaReal,
    grad_log_joint,
    log_joint,
    to_natural,
    to_real,
)

__all__ = [
    "EvaluationError",
    "LatentStates",
    "ModelSpec",
    "SrnBlock",
    "TbnBlock",
    "ThetaNatural",
    "ThetaReal",
    "VariationalSpec",
    "count_variational_params",
    "grad_log_joint",
    "log_joint",
    "to_natural",
    "to_real",
]

__version__ = "0.1.0"
