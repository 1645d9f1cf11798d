"""Structured variational deep Gaussian process regression.

Mean-field, stripes-and-arrow and fully-coupled Gaussian posteriors over the
inducing outputs of a deep GP, trained by stochastic ELBO maximisation with
all inducing outputs marginalised analytically.
"""

from .data import NormStats, SplitSpec, load_csv, make_split, toy_sine
from .kernel import KernelParams, conditional_terms, kmat
from .model import DGPModel, LayerPosterior, build_model, predict, sample_layer
from .training import TrainConfig, elbo, elbo_sampled_fm, train
from .variational import (
    FULLY_COUPLED,
    MEAN_FIELD,
    STRIPES_ARROW,
    Architecture,
    VariationalFactor,
    init_factor,
    nonzero_count,
)

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "DGPModel",
    "FULLY_COUPLED",
    "KernelParams",
    "LayerPosterior",
    "MEAN_FIELD",
    "NormStats",
    "STRIPES_ARROW",
    "SplitSpec",
    "TrainConfig",
    "VariationalFactor",
    "build_model",
    "conditional_terms",
    "elbo",
    "elbo_sampled_fm",
    "init_factor",
    "kmat",
    "load_csv",
    "make_split",
    "nonzero_count",
    "predict",
    "sample_layer",
    "toy_sine",
    "train",
]
