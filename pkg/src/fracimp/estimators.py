"""IPW and AIPW estimating functions and the estimators built on them."""

from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import expit

from . import glm
from .data import FractionalDataset, ModelParams, ObservedDataset
from .engine import BINARY, FiConfig
from .formula import column_names, design_matrix

log = logging.getLogger(__name__)

IPW = "IPW"
AIPW = "AIPW"
METHODS = (IPW, AIPW)
FI = "FI"
CC = "CC"
MEAN = "MEAN"
FULL = "FULL"
STRATEGIES = (FI, CC, MEAN, FULL)


@dataclass(frozen=True)
class TauEstimate:
    tau_hat: float
    method: str
    strategy: str
    n_effective: int
    diagnostics: dict[str, Any] = field(default_factory=dict)


def ipw_psi(A, Y, e):
    """IPW contrast ``AY/e - (1-A)Y/(1-e)``."""
    return A * Y / e - (1 - A) * Y / (1 - e)


def aipw_psi(A, Y, e, mu1, mu0):
    """Augmented contrast; ``mu1``/``mu0`` are outcome predictions with A set to 1/0."""
    treated = A * Y / e + (1 - A / e) * mu1
    control = (1 - A) * Y / (1 - e) + (1 - (1 - A) / (1 - e)) * mu0
    return treated - control


def propensity(columns: Mapping[str, np.ndarray], theta, config: FiConfig) -> np.ndarray:
    return glm.logistic_prob(theta, design_matrix(config.propensity_formula, columns))


def outcome_mean(columns: Mapping[str, np.ndarray], a: int, beta, config: FiConfig) -> np.ndarray:
    """mu(X, a): the fitted outcome regression evaluated with treatment set to ``a``."""
    cols = dict(columns)
    n = len(cols["A"])
    cols["A"] = np.full(n, float(a))
    eta = design_matrix(config.outcome_formula, cols, n) @ np.asarray(beta, dtype=float)
    return expit(eta) if config.outcome_family == BINARY else eta


def psi_values(columns: Mapping[str, np.ndarray], theta, beta, method: str, config: FiConfig):
    """Row-wise contrast values plus propensity diagnostics."""
    e = propensity(columns, theta, config)
    diag = {"propensity_min": float(e.min()), "propensity_max": float(e.max())}
    lo, hi = config.overlap_bounds
    n_out = int(np.sum((e < lo) | (e > hi)))
    diag["n_overlap_violations"] = n_out
    if n_out:
        log.debug("%d rows have fitted propensity outside [%g, %g]", n_out, lo, hi)
    if config.propensity_clip is not None:
        c = config.propensity_clip
        diag["n_clipped"] = int(np.sum((e < c) | (e > 1 - c)))
        e = np.clip(e, c, 1 - c)
    A = np.asarray(columns["A"], dtype=float)
    Y = np.asarray(columns["Y"], dtype=float)
    if method == IPW:
        return ipw_psi(A, Y, e), diag
    if method == AIPW:
        mu1 = outcome_mean(columns, 1, beta, config)
        mu0 = outcome_mean(columns, 0, beta, config)
        return aipw_psi(A, Y, e, mu1, mu0), diag
    raise ValueError(f"unknown method {method!r}")


def estimate_tau(fd: FractionalDataset, params: ModelParams, method: str, config: FiConfig,
                 strategy: str = FI) -> TauEstimate:
    """Root of the fractionally weighted estimating equation.

    The estimating function is ``psi - tau`` so the root is
    ``sum_ij w_ij psi_ij / n`` with ``n`` the number of units.
    """
    psi, diag = psi_values(fd.columns, params.theta, params.beta, method, config)
    tau = float(np.sum(fd.weights * psi)) / fd.n_units
    if not np.isfinite(tau):
        raise FloatingPointError("non-finite treatment effect estimate")
    return TauEstimate(tau_hat=tau, method=method, strategy=strategy, n_effective=fd.n_units, diagnostics=diag)


def estimating_equation_residual(fd: FractionalDataset, params: ModelParams, method: str,
                                 config: FiConfig, tau: float) -> float:
    psi, _ = psi_values(fd.columns, params.theta, params.beta, method, config)
    return float(np.sum(fd.weights * (psi - tau))) / fd.n_units


def fit_full_data(columns: Mapping[str, np.ndarray], config: FiConfig):
    """Propensity and outcome fits on fully observed columns; returns (theta, beta)."""
    n = len(columns["A"])
    w = np.ones(n)
    Xt = design_matrix(config.propensity_formula, columns, n)
    theta = glm.fit_weighted_logistic(Xt, columns["A"], w).coefficients
    Xb = design_matrix(config.outcome_formula, columns, n)
    if config.outcome_family == BINARY:
        beta = glm.fit_weighted_logistic(Xb, columns["Y"], w).coefficients
    else:
        beta = glm.fit_weighted_gaussian(Xb, columns["Y"], w,
                                         column_names=column_names(config.outcome_formula)).coefficients
    return theta, beta


def full_data_estimate(columns: Mapping[str, np.ndarray], method: str, config: FiConfig,
                       strategy: str) -> TauEstimate:
    theta, beta = fit_full_data(columns, config)
    psi, diag = psi_values(columns, theta, beta, method, config)
    n = len(psi)
    tau = float(np.sum(psi)) / n
    return TauEstimate(tau_hat=tau, method=method, strategy=strategy, n_effective=n, diagnostics=diag)


def baseline_estimate(data: ObservedDataset, strategy: str, method: str, config: FiConfig,
                      truth: np.ndarray | None = None) -> TauEstimate:
    """Complete-case, mean-imputation or full-data estimate.

    ``truth`` holds the true values of the designated covariate and is only
    read by the ``FULL`` strategy.
    """
    config = config.resolved(data)
    name = data.missing_covariate
    cols = data.columns()
    if strategy == CC:
        cc = data.complete
        if not cc.any():
            raise ValueError("no complete cases")
        cols = {k: v[cc] for k, v in cols.items()}
    elif strategy == MEAN:
        x = cols[name]
        obs = np.isfinite(x)
        if not obs.any():
            raise ValueError("no observed values to average")
        cols[name] = np.where(obs, x, x[obs].mean())
    elif strategy == FULL:
        if truth is None:
            raise ValueError("FULL needs the true values of the designated covariate")
        truth = np.asarray(truth, dtype=float)
        x = cols[name]
        obs = np.isfinite(x)
        if truth.shape != x.shape or not np.array_equal(truth[obs], x[obs]):
            raise ValueError("truth does not agree with the observed values")
        cols[name] = truth
    else:
        raise ValueError(f"unknown baseline strategy {strategy!r}")
    return full_data_estimate(cols, method, config, strategy)
