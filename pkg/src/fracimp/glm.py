"""Weighted maximum-likelihood fits for the logistic and Gaussian families.

These are the only model fits the imputation engine needs: every nuisance
model is one of the two, fitted with fractional weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import expit

FIT_TOL = 1e-8
MAX_ITER = 100
ETA_CLAMP = 30.0
PROB_FLOOR = 1e-12
RIDGE = 1e-8
LOG_2PI = np.log(2.0 * np.pi)


class SingularDesignError(ValueError):
    pass


@dataclass(frozen=True)
class FitResult:
    coefficients: np.ndarray
    sigma: float | None
    converged: bool
    iterations: int
    max_abs_score: float


def _check_inputs(X, y, w):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    if X.ndim != 2:
        raise ValueError("design must be a 2-d matrix")
    if y.shape != (X.shape[0],) or w.shape != (X.shape[0],):
        raise ValueError(f"dimension mismatch: design {X.shape}, response {y.shape}, weights {w.shape}")
    if np.isnan(X).any() or np.isnan(y).any() or np.isnan(w).any():
        raise ValueError("NaN in regression inputs")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y)) and np.all(np.isfinite(w))):
        raise ValueError("non-finite regression inputs")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if w.sum() <= 0:
        raise ValueError("weights must have a positive sum")
    return X, y, w


def clamped_eta(eta):
    return np.clip(eta, -ETA_CLAMP, ETA_CLAMP)


_LOG_FLOOR = np.log(PROB_FLOOR)
_LOG_CEIL = np.log1p(-PROB_FLOOR)


def _softplus(z):
    # log(1 + exp(z)) without overflow; much faster than np.logaddexp(0, z)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _signed_log_pmf(signed_eta):
    return np.clip(-_softplus(-signed_eta), _LOG_FLOOR, _LOG_CEIL)


def logistic_log_pmf(eta, y):
    """log P(y | eta) for y in {0,1}; equals logging the clamped probability."""
    s = 2.0 * np.asarray(y, dtype=float) - 1.0
    return _signed_log_pmf(s * np.asarray(eta, dtype=float))


def logistic_loglik(b, X, y, w) -> float:
    return float(np.dot(w, logistic_log_pmf(X @ b, y)))


def logistic_score(b, X, y, w) -> np.ndarray:
    """Gradient of the weighted logistic log-likelihood."""
    p = expit(X @ b)
    return X.T @ (w * (y - p))


def _solve_information(info: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        c = linalg.cho_factor(info, check_finite=False)
        d = np.diag(c[0]) ** 2
        if d.min() > 1e-13 * d.max():
            return linalg.cho_solve(c, rhs, check_finite=False)
    except linalg.LinAlgError:
        pass
    scale = max(np.abs(np.diag(info)).max(), 1.0)
    ridged = info + RIDGE * scale * np.eye(len(info))
    try:
        c = linalg.cho_factor(ridged, check_finite=False)
    except linalg.LinAlgError:
        raise SingularDesignError("weighted information matrix is singular even after ridge fallback") from None
    return linalg.cho_solve(c, rhs, check_finite=False)


def fit_weighted_logistic(X, y, w, start=None, tol: float = FIT_TOL, max_iter: int = MAX_ITER,
                          check: bool = True) -> FitResult:
    """Weighted logistic regression by IRLS with step-halving.

    Maximises ``sum_r w_r [y_r log p_r + (1 - y_r) log(1 - p_r)]``.  Returns
    ``converged=False`` instead of raising when separation keeps the score
    above ``tol`` after ``max_iter`` iterations.
    """
    if check:
        X, y, w = _check_inputs(X, y, w)
        if np.any((y != 0) & (y != 1)):
            raise ValueError("logistic response must be binary")
    b = np.zeros(X.shape[1]) if start is None else np.array(start, dtype=float)
    s = 2.0 * y - 1.0
    eta = X @ b
    ll = float(np.dot(w, logistic_log_pmf(eta, y)))
    p = expit(eta)
    score = X.T @ (w * (y - p))
    it = 0
    while np.max(np.abs(score)) > tol and it < max_iter:
        it += 1
        v = w * p * (1.0 - p)
        info = (X.T * v) @ X
        step = _solve_information(info, score)
        t = 1.0
        for _ in range(40):
            cand = b + t * step
            eta = X @ cand
            ll_new = float(np.dot(w, _signed_log_pmf(s * eta)))
            if ll_new >= ll - 1e-12 * (1.0 + abs(ll)):
                break
            t *= 0.5
        else:
            break
        b, ll = cand, ll_new
        p = expit(eta)
        score = X.T @ (w * (y - p))
    mas = float(np.max(np.abs(score)))
    return FitResult(coefficients=b, sigma=None, converged=mas <= tol, iterations=it, max_abs_score=mas)


def _dependent_column(Xw: np.ndarray) -> int:
    for j in range(1, Xw.shape[1] + 1):
        if np.linalg.matrix_rank(Xw[:, :j]) < j:
            return j - 1
    return Xw.shape[1] - 1


def fit_weighted_gaussian(X, y, w, column_names=None, check: bool = True) -> FitResult:
    """Weighted least squares; ``sigma`` is the weighted MLE (no df correction)."""
    if check:
        X, y, w = _check_inputs(X, y, w)
    XtW = X.T * w
    info = XtW @ X
    rhs = XtW @ y
    singular = False
    try:
        c = linalg.cho_factor(info, check_finite=False)
        d = np.diag(c[0]) ** 2
        singular = d.min() <= 1e-12 * d.max()
    except linalg.LinAlgError:
        singular = True
    if singular:
        j = _dependent_column(X * np.sqrt(w)[:, None])
        name = column_names[j] if column_names is not None else f"column {j}"
        raise SingularDesignError(f"rank-deficient design: {name} is linearly dependent on earlier columns")
    b = linalg.cho_solve(c, rhs, check_finite=False)
    r = y - X @ b
    score = XtW @ r
    if np.max(np.abs(score)) > FIT_TOL:
        # one refinement step keeps the normal equations tight when X'WX is ill-conditioned
        b = b + linalg.cho_solve(c, score, check_finite=False)
        r = y - X @ b
        score = XtW @ r
    sigma = float(np.sqrt(np.dot(w, r * r) / w.sum()))
    mas = float(np.max(np.abs(score)))
    return FitResult(coefficients=b, sigma=sigma, converged=True, iterations=1, max_abs_score=mas)


def logistic_prob(coefficients, row) -> float | np.ndarray:
    """logistic(x'b), clamped to ``[1e-12, 1 - 1e-12]``; ``row`` may be a matrix."""
    eta = np.asarray(row, dtype=float) @ np.asarray(coefficients, dtype=float)
    return np.clip(expit(clamped_eta(eta)), PROB_FLOOR, 1.0 - PROB_FLOOR)


def gaussian_log_density(mean, sigma, y):
    z = (np.asarray(y, dtype=float) - mean) / sigma
    return -0.5 * (LOG_2PI + z * z) - np.log(sigma)


def gaussian_density(coefficients, sigma, row, y) -> float | np.ndarray:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    mean = np.asarray(row, dtype=float) @ np.asarray(coefficients, dtype=float)
    return np.exp(gaussian_log_density(mean, sigma, y))


def gaussian_loglik(b, sigma, X, y, w) -> float:
    return float(np.dot(w, gaussian_log_density(X @ b, sigma, y)))


def gaussian_score(b, sigma, X, y, w) -> np.ndarray:
    """Gradient in (b, sigma) of the weighted Gaussian log-likelihood."""
    r = y - X @ b
    gb = X.T @ (w * r) / sigma**2
    gs = np.dot(w, r * r) / sigma**3 - w.sum() / sigma
    return np.append(gb, gs)
