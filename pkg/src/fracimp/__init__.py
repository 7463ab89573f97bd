"""Fractional imputation of a missing confounder for IPW and AIPW treatment effect estimation."""

__version__ = "0.1.0"

from .data import FractionalDataset, ModelParams, ObservedDataset, Schema, load_csv, stack, write_csv
from .engine import FiConfig, FiResult, i_step, iterate, m_step, run_em, stack_draws, w_step
from .estimators import AIPW, CC, FI, FULL, IPW, MEAN, baseline_estimate, estimate_tau
from .pipeline import EstimateRow, estimate, fit_fi
from .proposal import Proposal, fit_proposal
from .rng import StreamFactory
from .variance import ResamplingConfig, bootstrap_se, jackknife_se

__all__ = [
    "AIPW", "CC", "FI", "FULL", "IPW", "MEAN",
    "EstimateRow", "FiConfig", "FiResult", "FractionalDataset", "ModelParams", "ObservedDataset",
    "Proposal", "ResamplingConfig", "Schema", "StreamFactory",
    "baseline_estimate", "bootstrap_se", "estimate", "estimate_tau", "fit_fi", "fit_proposal",
    "i_step", "iterate", "jackknife_se", "load_csv", "m_step", "run_em", "stack", "stack_draws",
    "w_step", "write_csv",
]
