"""Nonnegative tensor factorization with latent SIR regularization for epidemic forecasting."""
from .engine import (
    FittedStelar,
    Hyperparams,
    extract_components,
    fit,
    predict_slabs,
    suggest_weights,
)
from .sir_fit import SirParams
from .tensor import FactorModel, reconstruct

__version__ = "0.1.0"

__all__ = [
    "FactorModel",
    "FittedStelar",
    "Hyperparams",
    "SirParams",
    "extract_components",
    "fit",
    "predict_slabs",
    "reconstruct",
    "suggest_weights",
]
