"""Proposal distributions h(x_mis | x_obs) for the imputation step."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import stats

from . import glm
from .data import ObservedDataset
from .formula import design_matrix

MATCHED_T = "matched-t"
BERNOULLI = "bernoulli-logistic"
VARIANCE_MATCHED = "variance-matched"
SD_MULTIPLIED = "sd-multiplied"
T_DF = 4


class DegenerateProposalError(ValueError):
    pass


@dataclass(frozen=True)
class Proposal:
    """Fitted proposal for the designated covariate.

    For ``matched-t`` the draw is ``location + scale * t_4``.  Under the
    ``variance-matched`` convention ``scale = residual_sd / sqrt(2)`` so the
    draw variance equals the residual variance; under ``sd-multiplied`` the
    scale is the residual sd itself.
    """

    family: str
    predictors: tuple[str, ...]
    coefficients: np.ndarray
    scale: float | None = None
    residual_sd: float | None = None
    scale_convention: str | None = None
    df: int = T_DF

    def _row(self, x_obs) -> np.ndarray:
        if isinstance(x_obs, Mapping):
            cols = {k: np.atleast_1d(np.asarray(v, dtype=float)) for k, v in x_obs.items()}
            return design_matrix(self.predictors, cols, 1)[0]
        x = np.asarray(x_obs, dtype=float).ravel()
        if len(x) != len(self.predictors):
            raise ValueError(f"expected {len(self.predictors)} predictor values, got {len(x)}")
        return np.concatenate([[1.0], x])

    def linear_predictor(self, columns: Mapping[str, np.ndarray]) -> np.ndarray:
        return design_matrix(self.predictors, columns) @ self.coefficients

    def log_density_vec(self, columns: Mapping[str, np.ndarray], values: np.ndarray) -> np.ndarray:
        """Vectorised log h(value | x_obs) over rows of ``columns``."""
        eta = self.linear_predictor(columns)
        values = np.asarray(values, dtype=float)
        if self.family == MATCHED_T:
            return stats.t.logpdf((values - eta) / self.scale, self.df) - np.log(self.scale)
        if np.any((values != 0) & (values != 1)):
            raise ValueError("binary proposal evaluated outside {0, 1}")
        return glm.logistic_log_pmf(eta, values)

    def to_dict(self) -> dict[str, Any]:
        return {
            "family": self.family,
            "predictors": list(self.predictors),
            "coefficients": self.coefficients.tolist(),
            "scale": self.scale,
            "residual_sd": self.residual_sd,
            "scale_convention": self.scale_convention,
            "df": self.df if self.family == MATCHED_T else None,
        }


def fit_proposal(data: ObservedDataset, predictors: Sequence[str], family: str = MATCHED_T,
                 scale_convention: str = VARIANCE_MATCHED) -> Proposal:
    """Regress the designated covariate on ``predictors`` over complete cases."""
    predictors = tuple(predictors)
    if data.missing_covariate in predictors:
        raise ValueError("the designated covariate cannot predict itself")
    cc = data.complete
    n_cc = int(cc.sum())
    if n_cc < len(predictors) + 2:
        raise ValueError(f"need at least {len(predictors) + 2} complete cases, have {n_cc}")
    cols = {k: v[cc] for k, v in data.covariates.items()}
    X = design_matrix(predictors, cols, n_cc)
    x = cols[data.missing_covariate]
    w = np.ones(n_cc)
    if family == BERNOULLI:
        if np.any((x != 0) & (x != 1)):
            raise ValueError("bernoulli-logistic proposal needs a 0/1 covariate")
        if np.all(x == x[0]):
            raise DegenerateProposalError("designated covariate is constant among complete cases")
        fit = glm.fit_weighted_logistic(X, x, w)
        if not fit.converged:
            raise DegenerateProposalError("logistic proposal fit did not converge (separation)")
        return Proposal(family=family, predictors=predictors, coefficients=fit.coefficients)
    if family == MATCHED_T:
        fit = glm.fit_weighted_gaussian(X, x, w)
        if not fit.sigma > 0:
            raise DegenerateProposalError("zero residual scale in proposal regression")
        if scale_convention == VARIANCE_MATCHED:
            scale = fit.sigma / np.sqrt(T_DF / (T_DF - 2))
        elif scale_convention == SD_MULTIPLIED:
            scale = fit.sigma
        else:
            raise ValueError(f"unknown scale convention {scale_convention!r}")
        return Proposal(family=family, predictors=predictors, coefficients=fit.coefficients,
                        scale=float(scale), residual_sd=fit.sigma, scale_convention=scale_convention)
    raise ValueError(f"unknown proposal family {family!r}")


def location(p: Proposal, x_obs) -> float:
    """Location (matched-t) or P(value = 1) (binary) at one covariate row."""
    row = p._row(x_obs)
    if p.family == BERNOULLI:
        return float(glm.logistic_prob(p.coefficients, row))
    return float(row @ p.coefficients)


def draw(p: Proposal, x_obs, M: int, rng: np.random.Generator) -> np.ndarray:
    """``M`` i.i.d. draws from the proposal at ``x_obs``."""
    if M < 1:
        raise ValueError("M must be at least 1")
    loc = location(p, x_obs)
    if p.family == BERNOULLI:
        return (rng.random(M) < loc).astype(float)
    return loc + p.scale * rng.standard_t(p.df, size=M)


def density(p: Proposal, x_obs, value) -> float:
    """Exact pmf/pdf of ``value`` under the proposal at ``x_obs``."""
    loc = location(p, x_obs)
    if p.family == BERNOULLI:
        if value not in (0, 1):
            raise ValueError(f"value {value!r} outside the support {{0, 1}}")
        d = loc if value == 1 else 1.0 - loc
        if d <= 0:
            raise ValueError("zero proposal probability for an imputed value")
        return float(d)
    return float(stats.t.pdf((value - loc) / p.scale, p.df) / p.scale)
