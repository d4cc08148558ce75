"""Generative capsule model with template rendering and free-form variational inference."""

from .model import LayerParams, LatentState, ModelParams
from .inference import VariationalState, elbo_estimate, fit_free_form, init_state, reconstruct
from .training import TrainConfig, fit_parameters, warm_start_full_posterior

__all__ = [
    "LayerParams",
    "LatentState",
    "ModelParams",
    "VariationalState",
    "elbo_estimate",
    "fit_free_form",
    "init_state",
    "reconstruct",
    "TrainConfig",
    "fit_parameters",
    "warm_start_full_posterior",
]
