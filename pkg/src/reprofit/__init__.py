"""Exposure-response fitting for reproduction counts from chronic bioassays.

Mortality enters through the number of individual-days (NID); inter-replicate
variability through Poisson, NegBin1 or NegBin2 stochastic parts.
"""

from .analysis import (
    CHLORDAN_DESIGN,
    Design,
    coverage,
    curve_band,
    dic,
    ec_x,
    ecx_posterior,
    per_alive_fit,
    posterior_predictive,
    simulate_dataset,
)
from .dataset import BioassayDataset, assemble_dataset, compute_nid, load_dataset
from .inference import SamplerConfig, calibrate_priors, mle_fit, posterior_summary, run_mcmc
from .model import CurveParams, Family, ModelSpec, StochasticFamily

__version__ = "0.1.0"

__all__ = [
    "BioassayDataset",
    "CHLORDAN_DESIGN",
    "CurveParams",
    "Design",
    "Family",
    "ModelSpec",
    "SamplerConfig",
    "StochasticFamily",
    "assemble_dataset",
    "calibrate_priors",
    "compute_nid",
    "coverage",
    "curve_band",
    "dic",
    "ec_x",
    "ecx_posterior",
    "load_dataset",
    "mle_fit",
    "per_alive_fit",
    "posterior_predictive",
    "posterior_summary",
    "run_mcmc",
    "simulate_dataset",
]
