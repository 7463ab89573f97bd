"""End-to-end estimation: FI fit plus baselines, each with resampling SEs."""

from __future__ import annotations

import logging
import time
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .data import ObservedDataset
from .engine import FiConfig, FiResult, run_em
from .estimators import FI, FULL, baseline_estimate, estimate_tau
from .proposal import Proposal, fit_proposal
from .rng import PURPOSE_IMPUTE, StreamFactory
from .variance import ResamplingConfig, confidence_interval, resample

log = logging.getLogger(__name__)


@dataclass
class EstimateRow:
    strategy: str
    method: str
    tau_hat: float
    se: float | None = None
    ci_low: float | None = None
    ci_high: float | None = None
    runtime_s: float = 0.0
    n_failed: int = 0
    em_iterations: int | None = None
    em_converged: bool | None = None
    diagnostics: dict[str, Any] = field(default_factory=dict)
    replicates: np.ndarray | None = field(default=None, repr=False)

    def as_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("replicates")
        return d


def fit_fi(data: ObservedDataset, config: FiConfig, streams: StreamFactory) -> tuple[Proposal, FiResult]:
    """Fit the proposal on complete cases and run the FI EM."""
    config = config.resolved(data)
    proposal = fit_proposal(data, config.covariate_formula, config.proposal_family, config.scale_convention)
    return proposal, run_em(data, proposal, config, streams.child(PURPOSE_IMPUTE))


def estimate(data: ObservedDataset, strategies: Sequence[str], methods: Sequence[str], config: FiConfig,
             rc: ResamplingConfig | None, streams: StreamFactory, truth: np.ndarray | None = None,
             fi_fit: tuple[Proposal, FiResult] | None = None) -> list[EstimateRow]:
    """Point estimates, SEs and intervals for each (strategy, method).

    ``rc=None`` skips resampling.  ``runtime_s`` covers the point estimate and
    the resampling of its strategy.
    """
    config = config.resolved(data)
    rows = []
    for strategy in strategies:
        t0 = time.perf_counter()
        fi_result = None
        if strategy == FI:
            _, fi_result = fi_fit if fi_fit is not None else fit_fi(data, config, streams)
            ests = {m: estimate_tau(fi_result.fractional_data, fi_result.params, m, config) for m in methods}
        else:
            if strategy == FULL and truth is None:
                raise ValueError("FULL strategy requires the true covariate values")
            ests = {m: baseline_estimate(data, strategy, m, config, truth=truth) for m in methods}
        for m, est in ests.items():
            n_out = est.diagnostics.get("n_overlap_violations", 0)
            if n_out:
                lo, hi = config.overlap_bounds
                log.warning("%s/%s: %d rows have fitted propensity outside [%g, %g]", strategy, m, n_out, lo, hi)
        res = None
        if rc is not None:
            res = resample(data, strategy, config, methods, rc, fi_result, streams, truth)
        elapsed = time.perf_counter() - t0
        for m in methods:
            row = EstimateRow(strategy=strategy, method=m, tau_hat=ests[m].tau_hat, runtime_s=elapsed,
                              diagnostics=dict(ests[m].diagnostics))
            if fi_result is not None:
                row.em_iterations = fi_result.iterations_used
                row.em_converged = fi_result.converged
            if res is not None:
                row.se = res.se[m]
                row.ci_low, row.ci_high = confidence_interval(row.tau_hat, row.se, rc.ci_level)
                row.n_failed = res.n_failed
                row.replicates = res.replicates[m]
            rows.append(row)
    return rows
