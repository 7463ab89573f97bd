"""Resampling standard errors and normal-approximation intervals."""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import ObservedDataset
from .engine import FiConfig, FiResult, i_step, iterate, run_em
from .estimators import FI, IPW, METHODS, baseline_estimate, estimate_tau
from .proposal import Proposal, fit_proposal
from .rng import PURPOSE_BOOTSTRAP, PURPOSE_IMPUTE, PURPOSE_JACKKNIFE, StreamFactory

log = logging.getLogger(__name__)

JACKKNIFE = "jackknife"
BOOTSTRAP = "bootstrap"
WEIGHTS_ONLY = "weights-only"
FULL_REFIT = "full-refit"
MAX_FAIL_FRACTION = 0.10

# exceptions that mark a single replicate as failed rather than aborting the run
REPLICATE_ERRORS = (ValueError, FloatingPointError, np.linalg.LinAlgError, ArithmeticError)


class ResamplingFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class ResamplingConfig:
    kind: str = JACKKNIFE
    d: int = 10
    B: int = 200
    ci_level: float = 0.95
    refit_scope: str = WEIGHTS_ONLY

    def __post_init__(self):
        if self.kind not in (JACKKNIFE, BOOTSTRAP):
            raise ValueError(f"unknown resampling kind {self.kind!r}")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.B < 2:
            raise ValueError("B must be >= 2")
        if not 0 < self.ci_level < 1:
            raise ValueError("ci_level must lie in (0, 1)")
        if self.refit_scope not in (WEIGHTS_ONLY, FULL_REFIT):
            raise ValueError(f"unknown refit scope {self.refit_scope!r}")

    def to_dict(self):
        return {"kind": self.kind, "d": self.d, "B": self.B, "ci_level": self.ci_level,
                "refit_scope": self.refit_scope}


@dataclass
class ResamplingResult:
    se: dict[str, float]
    replicates: dict[str, np.ndarray]
    n_failed: int
    n_replicates: int


def delete_d_groups(n: int, d: int) -> list[np.ndarray]:
    """Contiguous blocks of ``d`` positions; the remainder joins the last block."""
    if not 1 <= d < n:
        raise ValueError(f"need 1 <= d < n, got d={d}, n={n}")
    g = n // d
    groups = [np.arange(k * d, (k + 1) * d) for k in range(g)]
    if g * d < n:
        groups[-1] = np.arange((g - 1) * d, n)
    return groups


def jackknife_se_from_replicates(replicates: Sequence[float], n: int, d: int) -> float:
    """Delete-d jackknife SE: ``sqrt((n-d)/d * mean((t_k - mean t)^2))``."""
    t = np.asarray(replicates, dtype=float)
    g = len(t)
    if g < 2:
        raise ValueError("need at least two jackknife replicates")
    return float(np.sqrt((n - d) / d * np.sum((t - t.mean()) ** 2) / g))


def _collect(fn, jobs):
    reps: dict[str, list[float]] = {}
    failed = 0
    for k, positions in jobs:
        try:
            out = fn(positions, k)
        except REPLICATE_ERRORS as exc:
            failed += 1
            log.warning("resampling replicate %d failed: %s", k, exc)
            continue
        if not isinstance(out, dict):
            out = {"value": out}
        for key, v in out.items():
            reps.setdefault(key, []).append(float(v))
    return {k: np.asarray(v) for k, v in reps.items()}, failed


def _check_failures(failed, total, max_fail_fraction):
    if failed > max_fail_fraction * total:
        raise ResamplingFailure(f"{failed} of {total} resampling replicates failed")


def jackknife(n: int, d: int, fn: Callable, max_fail_fraction: float = MAX_FAIL_FRACTION) -> ResamplingResult:
    """Delete-d jackknife of ``fn(kept_positions, group_index)``.

    ``fn`` returns a scalar or a dict of named scalars; each name gets its
    own SE.  Replicates that raise are dropped and counted.
    """
    groups = delete_d_groups(n, d)
    everything = np.arange(n)
    jobs = ((k, np.setdiff1d(everything, grp, assume_unique=True)) for k, grp in enumerate(groups))
    reps, failed = _collect(fn, jobs)
    _check_failures(failed, len(groups), max_fail_fraction)
    se = {k: jackknife_se_from_replicates(v, n, d) for k, v in reps.items()}
    return ResamplingResult(se=se, replicates=reps, n_failed=failed, n_replicates=len(groups))


def bootstrap(n: int, B: int, fn: Callable, rng: np.random.Generator,
              max_fail_fraction: float = MAX_FAIL_FRACTION) -> ResamplingResult:
    """Nonparametric bootstrap over units; SE is the sample SD of the replicates."""
    draws = [rng.integers(0, n, size=n) for _ in range(B)]
    reps, failed = _collect(fn, enumerate(draws))
    _check_failures(failed, B, max_fail_fraction)
    se = {k: float(np.std(v, ddof=1)) for k, v in reps.items()}
    return ResamplingResult(se=se, replicates=reps, n_failed=failed, n_replicates=B)


def confidence_interval(tau_hat: float, se: float, level: float = 0.95) -> tuple[float, float]:
    if se < 0:
        raise ValueError("se must be non-negative")
    z = stats.norm.ppf(0.5 + level / 2)
    return tau_hat - z * se, tau_hat + z * se


# ---------------------------------------------------------------------------
# strategy-level replicate functionals


def fi_replicate_fn(data: ObservedDataset, config: FiConfig, fi_result: FiResult | None,
                    methods: Sequence[str], scope: str, streams: StreamFactory | None = None,
                    renumber: bool = False) -> Callable:
    """Replicate functional for fractional imputation.

    ``weights-only`` keeps the imputed draws of ``fi_result`` and re-runs the
    W/M iterations on the retained units, warm-started at the full-sample
    estimates.  ``full-refit`` refits the proposal, redraws imputations from a
    stream keyed by the replicate index and reruns the EM, warm-started at the
    full-sample estimates when ``fi_result`` is given.
    """
    config = config.resolved(data)
    if scope == WEIGHTS_ONLY:
        if fi_result is None:
            raise ValueError("weights-only resampling needs the full-sample FI result")
        fd = fi_result.fractional_data
        start = fi_result.params

        def fn(positions, k):
            sub = fd.take_units(positions, renumber=renumber)
            res = iterate(sub, config, start=start)
            return {m: estimate_tau(res.fractional_data, res.params, m, config).tau_hat for m in methods}

        return fn
    if streams is None:
        raise ValueError("full-refit resampling needs random streams")
    start = None if fi_result is None else fi_result.params

    def fn(positions, k):
        sub = data.take(positions, renumber=renumber)
        prop = fit_proposal(sub, config.covariate_formula, config.proposal_family, config.scale_convention)
        res = run_em(sub, prop, config, streams.child(k), start=start)
        return {m: estimate_tau(res.fractional_data, res.params, m, config).tau_hat for m in methods}

    return fn


def baseline_replicate_fn(data: ObservedDataset, strategy: str, config: FiConfig, methods: Sequence[str],
                          truth: np.ndarray | None = None, renumber: bool = False) -> Callable:
    def fn(positions, k):
        sub = data.take(positions, renumber=renumber)
        t = None if truth is None else np.asarray(truth)[positions]
        return {m: baseline_estimate(sub, strategy, m, config, truth=t).tau_hat for m in methods}

    return fn


def replicate_fn(data, strategy, config, methods, rc: ResamplingConfig, fi_result=None, streams=None,
                 truth=None, renumber=False) -> Callable:
    if strategy == FI:
        return fi_replicate_fn(data, config, fi_result, methods, rc.refit_scope, streams, renumber)
    return baseline_replicate_fn(data, strategy, config, methods, truth, renumber)


def resample(data: ObservedDataset, strategy: str, config: FiConfig, methods: Sequence[str],
             rc: ResamplingConfig, fi_result: FiResult | None = None,
             streams: StreamFactory | None = None, truth=None) -> ResamplingResult:
    """Resampling SEs for every method of one strategy."""
    if rc.kind == JACKKNIFE:
        fn = replicate_fn(data, strategy, config, methods, rc, fi_result,
                          None if streams is None else streams.child(PURPOSE_JACKKNIFE), truth)
        return jackknife(data.n, rc.d, fn)
    if streams is None:
        raise ValueError("bootstrap needs random streams")
    boot = streams.child(PURPOSE_BOOTSTRAP)
    fn = replicate_fn(data, strategy, config, methods, rc, fi_result, boot.child(1), truth, renumber=True)
    return bootstrap(data.n, rc.B, fn, boot.generator(0))


def _fi_inputs(data, proposal, fi_config, fi_result, streams):
    if fi_result is None:
        if streams is None:
            raise ValueError("need either a fitted FI result or random streams to impute")
        fi_result = run_em(data, proposal, fi_config, streams.child(PURPOSE_IMPUTE))
    return fi_result


def jackknife_se(data: ObservedDataset, proposal: Proposal | None, fi_config: FiConfig, method: str = IPW,
                 rc: ResamplingConfig | None = None, fi_result: FiResult | None = None,
                 streams: StreamFactory | None = None, strategy: str = FI, truth=None):
    """Delete-d jackknife SE of one estimator; returns ``(se, replicate estimates)``."""
    rc = rc or ResamplingConfig()
    rc = ResamplingConfig(kind=JACKKNIFE, d=rc.d, B=rc.B, ci_level=rc.ci_level, refit_scope=rc.refit_scope)
    if strategy == FI and rc.refit_scope == WEIGHTS_ONLY:
        fi_result = _fi_inputs(data, proposal, fi_config, fi_result, streams)
    res = resample(data, strategy, fi_config, [method], rc, fi_result, streams, truth)
    return res.se[method], res.replicates[method]


def bootstrap_se(data: ObservedDataset, proposal: Proposal | None, fi_config: FiConfig, method: str = IPW,
                 rc: ResamplingConfig | None = None, streams: StreamFactory | None = None,
                 fi_result: FiResult | None = None, strategy: str = FI, truth=None):
    """Bootstrap SE of one estimator; returns ``(se, replicate estimates)``."""
    rc = rc or ResamplingConfig(kind=BOOTSTRAP)
    rc = ResamplingConfig(kind=BOOTSTRAP, d=rc.d, B=rc.B, ci_level=rc.ci_level, refit_scope=rc.refit_scope)
    if streams is None:
        raise ValueError("bootstrap needs random streams")
    if strategy == FI and rc.refit_scope == WEIGHTS_ONLY:
        fi_result = _fi_inputs(data, proposal, fi_config, fi_result, streams)
    res = resample(data, strategy, fi_config, [method], rc, fi_result, streams, truth)
    return res.se[method], res.replicates[method]
