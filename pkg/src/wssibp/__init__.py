"""Weakly supervised stacked Indian Buffet Process: variational training,
test-time inference, annotation and retrieval tasks, and ranking metrics."""

__version__ = "0.1.0"

from .data import (
    FactorLayout,
    FormatError,
    Hyperparams,
    ImageBag,
    Model,
    PosteriorSummary,
    ValidationError,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
)
from .engine import VariationalState, fit, surrogate_objective, sweep, train
from .infer import infer, infer_batch
from .sampler import GroundTruth, SamplerParams, sample_dataset, sample_well_separated

__all__ = [
    "FactorLayout",
    "FormatError",
    "GroundTruth",
    "Hyperparams",
    "ImageBag",
    "Model",
    "PosteriorSummary",
    "SamplerParams",
    "ValidationError",
    "VariationalState",
    "fit",
    "infer",
    "infer_batch",
    "load_dataset",
    "load_model",
    "sample_dataset",
    "sample_well_separated",
    "save_dataset",
    "save_model",
    "surrogate_objective",
    "sweep",
    "train",
]
