"""Fractional imputation EM: imputation, weighting and maximisation steps."""

from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np

from . import glm
from .data import FractionalDataset, ModelParams, ObservedDataset, stack
from .formula import column_names, design_matrix, parse_terms
from .proposal import MATCHED_T, VARIANCE_MATCHED, Proposal, draw
from .rng import StreamFactory

log = logging.getLogger(__name__)

GAUSSIAN = "gaussian"
BINARY = "binary"
INIT_IMPUTED = "imputed"
INIT_COMPLETE_CASE = "complete-case"


class WeightUnderflowError(FloatingPointError):
    pass


@dataclass(frozen=True)
class FiConfig:
    """Model and iteration settings shared by every estimation strategy.

    Formulas are term lists (see :mod:`fracimp.formula`).  ``covariate_formula``
    lists the predictors of the missing covariate; when empty every other
    covariate is used.  ``init`` selects the starting point of the EM:
    ``"imputed"`` fits all models once on the freshly imputed table with
    weights ``1/M``; ``"complete-case"`` starts from complete-case fits.
    """

    M: int = 200
    max_iterations: int = 250
    tolerance: float = 1e-6
    update_alpha: bool = False
    outcome_family: str = GAUSSIAN
    outcome_formula: tuple[str, ...] = ()
    propensity_formula: tuple[str, ...] = ()
    covariate_formula: tuple[str, ...] = ()
    covariate_family: str = GAUSSIAN
    proposal_family: str = MATCHED_T
    scale_convention: str = VARIANCE_MATCHED
    init: str = INIT_IMPUTED
    propensity_clip: float | None = None
    overlap_bounds: tuple[float, float] = (0.01, 0.99)

    def __post_init__(self):
        for name in ("outcome_formula", "propensity_formula", "covariate_formula"):
            object.__setattr__(self, name, parse_terms(getattr(self, name)))
        object.__setattr__(self, "overlap_bounds", tuple(float(x) for x in self.overlap_bounds))
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.outcome_family not in (GAUSSIAN, BINARY):
            raise ValueError(f"unknown outcome family {self.outcome_family!r}")
        if self.covariate_family not in (GAUSSIAN, BINARY):
            raise ValueError(f"unknown covariate family {self.covariate_family!r}")
        if self.init not in (INIT_IMPUTED, INIT_COMPLETE_CASE):
            raise ValueError(f"unknown init {self.init!r}")
        if self.propensity_clip is not None and not 0 < self.propensity_clip < 0.5:
            raise ValueError("propensity_clip must lie in (0, 0.5)")

    def resolved(self, data: ObservedDataset) -> "FiConfig":
        """Fill empty formulas from the dataset's covariates."""
        covs = data.covariate_names
        upd = {}
        if not self.covariate_formula:
            upd["covariate_formula"] = tuple(data.observed_covariates)
        if not self.propensity_formula:
            upd["propensity_formula"] = tuple(covs)
        if not self.outcome_formula:
            upd["outcome_formula"] = (*covs, "A")
        if not upd:
            return self
        d = self.to_dict()
        d.update(upd)
        return FiConfig(**d)

    def to_dict(self) -> dict[str, Any]:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FiConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown fi settings: {sorted(unknown)}")
        d = dict(d)
        if "overlap_bounds" in d:
            d["overlap_bounds"] = tuple(d["overlap_bounds"])
        return cls(**d)


@dataclass
class FiResult:
    fractional_data: FractionalDataset
    params: ModelParams
    iterations_used: int
    converged: bool
    loglik_trace: list[float] = field(default_factory=list)
    alpha_complete_case: ModelParams | None = None


class _Designs:
    """Design matrices of a fractional table; fixed because draws never change."""

    def __init__(self, fd: FractionalDataset, cfg: FiConfig):
        cols = fd.columns
        n = fd.n_rows
        name = fd.source.missing_covariate
        self.x_mis = cols[name]
        self.A = cols["A"]
        self.Y = cols["Y"]
        self.X_alpha = np.asfortranarray(design_matrix(cfg.covariate_formula, cols, n))
        self.X_theta = np.asfortranarray(design_matrix(cfg.propensity_formula, cols, n))
        self.X_beta = np.asfortranarray(design_matrix(cfg.outcome_formula, cols, n))
        self.log_h = np.log(fd.h_values)


def _check_binary(values, what):
    if np.any((values != 0) & (values != 1)):
        raise ValueError(f"{what} must be 0/1 for the binary family")


def _fit_family(family, X, y, w, start=None, names=None, check=True):
    if family == BINARY:
        fit = glm.fit_weighted_logistic(X, y, w, start=start, check=check)
        if not fit.converged:
            log.debug("logistic fit stopped with max|score|=%.3g", fit.max_abs_score)
        return fit.coefficients, None
    fit = glm.fit_weighted_gaussian(X, y, w, column_names=names, check=check)
    if not fit.sigma > 0:
        raise glm.SingularDesignError("Gaussian fit has zero residual scale")
    return fit.coefficients, fit.sigma


def _family_log_density(family, X, b, sigma, y):
    eta = X @ b
    if family == BINARY:
        return glm.logistic_log_pmf(eta, y)
    return glm.gaussian_log_density(eta, sigma, y)


def fit_alpha_complete_case(data: ObservedDataset, cfg: FiConfig) -> tuple[np.ndarray, float | None]:
    cc = data.complete
    cols = {k: v[cc] for k, v in data.covariates.items()}
    X = design_matrix(cfg.covariate_formula, cols, int(cc.sum()))
    y = cols[data.missing_covariate]
    if cfg.covariate_family == BINARY:
        _check_binary(y, "designated covariate")
    return _fit_family(cfg.covariate_family, X, y, np.ones(len(y)),
                       names=column_names(cfg.covariate_formula))


def i_step(data: ObservedDataset, proposal: Proposal, M: int, rng) -> FractionalDataset:
    """Draw ``M`` values per incomplete unit and stack them with weights ``1/M``.

    ``rng`` is a :class:`~fracimp.rng.StreamFactory` (one stream per unit id)
    or a ``numpy.random.Generator`` consumed in unit order.
    """
    miss = np.flatnonzero(~data.complete)
    draws = np.empty((len(miss), M))
    for k, pos in enumerate(miss):
        x_obs = {c: data.covariates[c][pos] for c in data.observed_covariates}
        gen = rng.generator(int(data.unit_id[pos])) if isinstance(rng, StreamFactory) else rng
        draws[k] = draw(proposal, x_obs, M, gen)
    return stack_draws(data, proposal, draws)


def stack_draws(data: ObservedDataset, proposal: Proposal, draws) -> FractionalDataset:
    """Stack given imputed values, evaluating their proposal densities.

    ``draws`` is an array of shape (n_missing, M) in unit order or a mapping
    from unit id to the unit's values.
    """
    miss = np.flatnonzero(~data.complete)
    if isinstance(draws, Mapping):
        ids = [int(u) for u in data.unit_id[miss]]
        key = {int(k): k for k in draws}
        if set(key) != set(ids):
            raise ValueError(f"draws given for units {sorted(key)}, expected exactly {sorted(ids)}")
        draws = [list(draws[key[u]]) for u in ids]
        if len({len(v) for v in draws}) > 1:
            raise ValueError("every incomplete unit needs the same number of draws")
    draws = np.asarray(draws, dtype=float)
    if len(miss) == 0:
        return stack(data, np.empty((0, 1)), np.empty((0, 1)))
    if draws.ndim != 2 or draws.shape[0] != len(miss):
        raise ValueError(f"need draws for {len(miss)} incomplete units, got shape {draws.shape}")
    M = draws.shape[1]
    cols = {c: np.repeat(data.covariates[c][miss], M) for c in data.observed_covariates}
    h = np.exp(proposal.log_density_vec(cols, draws.ravel())).reshape(draws.shape)
    if np.any(~(h > 0)):
        raise ValueError("proposal density vanished at a draw")
    return stack(data, draws, h)


def _row_log_joint(d: _Designs, params: ModelParams, cfg: FiConfig) -> np.ndarray:
    ll = _family_log_density(cfg.covariate_family, d.X_alpha, params.alpha, params.alpha_sigma, d.x_mis)
    ll = ll + glm.logistic_log_pmf(d.X_theta @ params.theta, d.A)
    ll = ll + _family_log_density(cfg.outcome_family, d.X_beta, params.beta, params.sigma, d.Y)
    return ll


def _weights_and_loglik(fd: FractionalDataset, d: _Designs, params: ModelParams, cfg: FiConfig):
    lr = _row_log_joint(d, params, cfg) - d.log_h
    mx = np.maximum.reduceat(lr, fd.starts)
    if not np.all(np.isfinite(mx)):
        k = int(np.flatnonzero(~np.isfinite(mx))[0])
        raise WeightUnderflowError(f"likelihood underflow for every draw of unit_id {fd.source.unit_id[k]}")
    counts = fd.counts
    e = np.exp(lr - np.repeat(mx, counts))
    s = np.add.reduceat(e, fd.starts)
    w = e / np.repeat(s, counts)
    w[~fd.imputed] = 1.0
    loglik = float(np.sum(mx + np.log(s)))
    return w, loglik


def w_step(fd: FractionalDataset, params: ModelParams, config: FiConfig) -> np.ndarray:
    """Normalised likelihood-ratio weights at ``params``; complete rows keep weight 1."""
    w, _ = _weights_and_loglik(fd, _Designs(fd, config), params, config)
    return w


def observed_loglik(fd: FractionalDataset, params: ModelParams, config: FiConfig) -> float:
    """Importance-sampling approximation of the observed-data log-likelihood."""
    return _weights_and_loglik(fd, _Designs(fd, config), params, config)[1]


def _m_step(d: _Designs, w: np.ndarray, cfg: FiConfig, previous: ModelParams | None,
            fixed_alpha: tuple[np.ndarray, float | None] | None) -> ModelParams:
    theta, _ = _fit_family(BINARY, d.X_theta, d.A, w,
                           start=None if previous is None else previous.theta, check=False)
    beta_start = previous.beta if (previous is not None and cfg.outcome_family == BINARY) else None
    beta, sigma = _fit_family(cfg.outcome_family, d.X_beta, d.Y, w, start=beta_start,
                              names=column_names(cfg.outcome_formula), check=False)
    if cfg.update_alpha or fixed_alpha is None:
        a_start = previous.alpha if (previous is not None and cfg.covariate_family == BINARY) else None
        alpha, alpha_sigma = _fit_family(cfg.covariate_family, d.X_alpha, d.x_mis, w, start=a_start,
                                         names=column_names(cfg.covariate_formula), check=False)
    else:
        alpha, alpha_sigma = fixed_alpha
    it = 0 if previous is None else previous.iteration + 1
    return ModelParams(alpha=alpha, alpha_sigma=alpha_sigma, beta=beta, sigma=sigma, theta=theta, iteration=it)


def m_step(fd: FractionalDataset, config: FiConfig, previous: ModelParams | None = None) -> ModelParams:
    """Weighted MLE of theta, beta (and sigma), and alpha when ``update_alpha`` is set.

    Without ``update_alpha`` alpha is carried over from ``previous`` (or refit
    on complete cases when there is no previous iterate).
    """
    d = _Designs(fd, config)
    fixed = None
    if not config.update_alpha:
        fixed = ((previous.alpha, previous.alpha_sigma) if previous is not None
                 else fit_alpha_complete_case(fd.source, config))
    return _m_step(d, fd.weights, config, previous, fixed)


def initial_params(fd: FractionalDataset, config: FiConfig) -> ModelParams:
    """Starting iterate of the EM (iteration 0)."""
    alpha_cc = fit_alpha_complete_case(fd.source, config)
    if config.init == INIT_IMPUTED:
        return _m_step(_Designs(fd, config), fd.weights, config, None, alpha_cc)
    d = _Designs(fd, config)
    w = np.where(fd.source.complete[fd.unit_index], 1.0, 0.0)
    return _m_step(d, w, config, None, alpha_cc)


def iterate(fd: FractionalDataset, config: FiConfig, start: ModelParams | None = None,
            alpha_fixed: tuple[np.ndarray, float | None] | None = None) -> FiResult:
    """Alternate W- and M-steps on an already imputed table until the parameters settle."""
    d = _Designs(fd, config)
    if alpha_fixed is None and not config.update_alpha:
        alpha_fixed = fit_alpha_complete_case(fd.source, config)
    if start is None:
        params = initial_params(fd, config)
    elif alpha_fixed is not None and not config.update_alpha:
        params = ModelParams(alpha=alpha_fixed[0], alpha_sigma=alpha_fixed[1], beta=start.beta,
                             sigma=start.sigma, theta=start.theta, iteration=0)
    else:
        params = ModelParams(alpha=start.alpha, alpha_sigma=start.alpha_sigma, beta=start.beta,
                             sigma=start.sigma, theta=start.theta, iteration=0)
    trace = []
    converged = False
    t = 0
    w = fd.weights
    while t < config.max_iterations:
        t += 1
        w, ll = _weights_and_loglik(fd, d, params, config)
        trace.append(ll)
        new = _m_step(d, w, config, params, alpha_fixed)
        delta = float(np.max(np.abs(new.vector() - params.vector())))
        params = new
        if delta < config.tolerance:
            converged = True
            break
    w, ll = _weights_and_loglik(fd, d, params, config)
    trace.append(ll)
    if not converged:
        log.info("EM stopped at max_iterations=%d without convergence", config.max_iterations)
    alpha_cc = None
    if alpha_fixed is not None:
        alpha_cc = ModelParams(alpha=alpha_fixed[0], alpha_sigma=alpha_fixed[1], beta=params.beta,
                               sigma=params.sigma, theta=params.theta)
    return FiResult(fractional_data=fd.with_weights(w), params=params, iterations_used=t,
                    converged=converged, loglik_trace=trace, alpha_complete_case=alpha_cc)


def run_em(data: ObservedDataset, proposal: Proposal, config: FiConfig, rng,
           start: ModelParams | None = None) -> FiResult:
    """Impute with ``proposal`` and run the EM to convergence or ``max_iterations``.

    ``start`` replaces the default initialisation, e.g. with full-sample
    estimates when refitting on a resampled data set.
    """
    config = config.resolved(data)
    if config.covariate_family == BINARY:
        _check_binary(data.covariates[data.missing_covariate][data.complete], "designated covariate")
    if config.outcome_family == BINARY:
        _check_binary(data.outcome, "outcome")
    fd = i_step(data, proposal, config.M, rng)
    return iterate(fd, config, start=start)
