"""Monte Carlo study: data generation, replicate execution, metric aggregation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.special import expit

from .data import ObservedDataset
from .engine import FiConfig
from .estimators import CC, FI, FULL, IPW, AIPW, MEAN
from .pipeline import estimate
from .rng import PURPOSE_DATA, StreamFactory
from .variance import FULL_REFIT, ResamplingConfig

log = logging.getLogger(__name__)

MAX_REPLICATE_FAILURES = 0.05

SIM_OUTCOME_FORMULA = ("X1", "X2", "X3", "A", "A:X1", "A:X2", "A:X3")
SIM_PROPENSITY_FORMULA = ("X1", "X2", "X3")
SIM_COVARIATE_FORMULA = ("X1", "X3")


def simulation_fi_config(M: int = 200, **overrides) -> FiConfig:
    """FI settings of the simulation design (t(4) proposal on X1, X3)."""
    kw = dict(M=M, max_iterations=250, tolerance=1e-6, update_alpha=True,
              outcome_formula=SIM_OUTCOME_FORMULA, propensity_formula=SIM_PROPENSITY_FORMULA,
              covariate_formula=SIM_COVARIATE_FORMULA)
    kw.update(overrides)
    return FiConfig(**kw)


@dataclass(frozen=True)
class SimulatedSample:
    """Generated data; ``truth`` and the potential outcomes are hidden from FI/CC/MEAN."""

    observed: ObservedDataset
    truth: np.ndarray
    y1: np.ndarray
    y0: np.ndarray

    @property
    def tau0(self) -> float:
        return float(np.mean(self.y1 - self.y0))


def true_propensity(x1, x2, x3):
    return 1.0 / (1.0 + np.exp(0.3 + 0.2 * x1 - 0.1 * x2 - 0.1 * x3))


def generate_sample(n: int, rng: np.random.Generator) -> tuple[SimulatedSample, float]:
    """Draw one data set from the simulation design; returns (sample, within-sample tau0)."""
    x3 = (rng.random(n) < 0.2).astype(float)
    z = rng.multivariate_normal([0.0, 0.0], [[1.0, 0.5], [0.5, 1.0]], size=n)
    x1 = np.where(x3 == 1, 1.0, -1.0) + z[:, 0]
    x2 = np.where(x3 == 1, -1.0, 1.0) + z[:, 1]
    e = true_propensity(x1, x2, x3)
    a = (rng.random(n) < e).astype(float)
    eps = rng.standard_normal(n)
    base = -x1 + x2 - x3 + eps
    y0 = base
    y1 = base + 2.0 + 0.5 * x1 + 0.25 * x2
    y = np.where(a == 1, y1, y0)
    phi = expit(0.25 + 0.25 * x1 - 0.6 * x3 + 0.5 * a + 0.4 * y)
    r = rng.random(n) < phi
    observed = ObservedDataset(
        unit_id=np.arange(1, n + 1),
        covariates={"X1": x1, "X2": np.where(r, x2, np.nan), "X3": x3},
        treatment=a,
        outcome=y,
        missing_covariate="X2",
    )
    sample = SimulatedSample(observed=observed, truth=x2, y1=y1, y0=y0)
    return sample, sample.tau0


@dataclass(frozen=True)
class SimConfig:
    n: int = 1000
    replicates: int = 2000
    master_seed: int = 20240101
    fi_config: FiConfig = field(default_factory=simulation_fi_config)
    resampling: ResamplingConfig | None = field(default_factory=ResamplingConfig)
    strategies: tuple[str, ...] = (FI, CC, FULL)
    methods: tuple[str, ...] = (IPW, AIPW)
    m_sweep: tuple[int, ...] = ()

    def __post_init__(self):
        if self.n < 50:
            raise ValueError("n must be >= 50")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        object.__setattr__(self, "strategies", tuple(self.strategies))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "m_sweep", tuple(int(m) for m in self.m_sweep))

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "replicates": self.replicates,
            "master_seed": self.master_seed,
            "fi_config": self.fi_config.to_dict(),
            "resampling": None if self.resampling is None else self.resampling.to_dict(),
            "strategies": list(self.strategies),
            "methods": list(self.methods),
            "m_sweep": list(self.m_sweep),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SimConfig":
        d = dict(d)
        if "fi_config" in d and isinstance(d["fi_config"], dict):
            base = simulation_fi_config().to_dict()
            base.update(d["fi_config"])
            d["fi_config"] = FiConfig.from_dict(base)
        if "resampling" in d and isinstance(d["resampling"], dict):
            d["resampling"] = ResamplingConfig(**d["resampling"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


PRESETS = {
    "full": dict(n=1000, replicates=2000, fi=dict(M=200)),
    "desk": dict(n=1000, replicates=500, fi=dict(M=100)),
    # redrawing imputations inside each jackknife replicate lets the SE carry the
    # Monte Carlo noise of small M, which is what the sweep is meant to expose
    "sweep": dict(n=1000, replicates=200, fi=dict(M=100), m_sweep=(5, 10, 20, 50, 100),
                  resampling=ResamplingConfig(refit_scope=FULL_REFIT)),
    "smoke": dict(n=200, replicates=2, fi=dict(M=20)),
}


def preset(name: str, **overrides) -> SimConfig:
    p = dict(PRESETS[name])
    fi = simulation_fi_config(**p.pop("fi"))
    fi_over = overrides.pop("fi", None)
    if fi_over:
        fi = dataclasses.replace(fi, **fi_over)
    p.update(overrides)
    return SimConfig(fi_config=fi, **p)


# ---------------------------------------------------------------------------
# replicate execution


def _replicate_streams(cfg: SimConfig, rep: int) -> StreamFactory:
    return StreamFactory(cfg.master_seed, (rep,))


def simulate_replicate(cfg: SimConfig, rep: int) -> list[dict[str, Any]]:
    """All (strategy, method) results for one replicate."""
    streams = _replicate_streams(cfg, rep)
    sample, tau0 = generate_sample(cfg.n, streams.generator(PURPOSE_DATA))
    rows = estimate(sample.observed, cfg.strategies, cfg.methods, cfg.fi_config, cfg.resampling, streams,
                    truth=sample.truth)
    return [_record(rep, tau0, r) for r in rows]


def _record(rep, tau0, row, M=None) -> dict[str, Any]:
    rec = {
        "replicate": rep,
        "strategy": row.strategy,
        "method": row.method,
        "tau_hat": row.tau_hat,
        "tau0": tau0,
        "se": row.se,
        "ci_low": row.ci_low,
        "ci_high": row.ci_high,
        "covered": None if row.se is None else bool(row.ci_low <= tau0 <= row.ci_high),
        "runtime_s": row.runtime_s,
        "em_iterations": row.em_iterations,
        "em_converged": row.em_converged,
        "n_failed": row.n_failed,
    }
    if M is not None:
        rec["M"] = M
    return rec


def sweep_replicate(cfg: SimConfig, rep: int) -> list[dict[str, Any]]:
    """One replicate of the M sweep: data generated once, FI rerun for each M."""
    streams = _replicate_streams(cfg, rep)
    sample, tau0 = generate_sample(cfg.n, streams.generator(PURPOSE_DATA))
    baselines = [s for s in cfg.strategies if s != FI]
    base_rows = estimate(sample.observed, baselines, cfg.methods, cfg.fi_config, cfg.resampling, streams,
                         truth=sample.truth) if baselines else []
    out = []
    for M in cfg.m_sweep:
        fi_cfg = dataclasses.replace(cfg.fi_config, M=M)
        if FI in cfg.strategies:
            for r in estimate(sample.observed, [FI], cfg.methods, fi_cfg, cfg.resampling, streams,
                              truth=sample.truth):
                out.append(_record(rep, tau0, r, M))
        out.extend(_record(rep, tau0, r, M) for r in base_rows)
    return out


def _safe(job: Callable, cfg: SimConfig, rep: int):
    try:
        return rep, job(cfg, rep), None
    except Exception as exc:  # replicate-level failures are counted, not fatal
        log.warning("replicate %d failed: %r", rep, exc)
        return rep, None, repr(exc)


def _load_checkpoint(path: Path | None, digest: str) -> dict[int, list[dict]]:
    done: dict[int, list[dict]] = {}
    if path is None or not path.exists():
        return done
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("config_digest") != digest:
                continue
            done[int(rec["replicate"])] = rec["records"]
    return done


def _execute(cfg: SimConfig, job: Callable, workers: int = 1, checkpoint: str | Path | None = None,
             progress: Callable[[int, int], None] | None = None) -> tuple[list[dict], int]:
    digest = cfg.digest() + job.__name__
    path = Path(checkpoint) if checkpoint else None
    done = _load_checkpoint(path, digest)
    todo = [r for r in range(cfg.replicates) if r not in done]
    results: dict[int, list[dict] | None] = dict(done)
    failures = 0

    def consume(items: Iterable):
        nonlocal failures
        for rep, recs, err in items:
            results[rep] = recs
            if recs is None:
                failures += 1
            elif path is not None:
                with open(path, "a") as fh:
                    fh.write(json.dumps({"config_digest": digest, "replicate": rep, "records": recs}) + "\n")
            if progress is not None:
                progress(sum(v is not None for v in results.values()), cfg.replicates)

    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            consume(pool.map(_safe, [job] * len(todo), [cfg] * len(todo), todo))
    else:
        consume(_safe(job, cfg, r) for r in todo)
    if failures > MAX_REPLICATE_FAILURES * cfg.replicates:
        raise RuntimeError(f"{failures} of {cfg.replicates} replicates failed")
    records = [rec for rep in sorted(results) if results[rep] is not None for rec in results[rep]]
    return records, failures


@dataclass
class ReplicationMetrics:
    """Aggregated Monte Carlo metrics keyed by (strategy, method) or (M, strategy, method)."""

    rows: list[dict[str, Any]]
    records: list[dict[str, Any]]
    failures: int = 0

    def get(self, strategy: str, method: str, M: int | None = None) -> dict[str, Any]:
        for r in self.rows:
            if r["strategy"] == strategy and r["method"] == method and (M is None or r.get("M") == M):
                return r
        raise KeyError((strategy, method, M))


def aggregate(records: Sequence[dict], by_m: bool = False) -> list[dict[str, Any]]:
    keys = []
    groups: dict[tuple, list[dict]] = {}
    for rec in records:
        k = ((rec["M"],) if by_m else ()) + (rec["strategy"], rec["method"])
        if k not in groups:
            groups[k] = []
            keys.append(k)
        groups[k].append(rec)
    out = []
    for k in keys:
        g = groups[k]
        err = np.array([r["tau_hat"] - r["tau0"] for r in g])
        ses = [r["se"] for r in g if r["se"] is not None]
        cov = [r["covered"] for r in g if r["covered"] is not None]
        row = {}
        if by_m:
            row["M"] = k[0]
        row.update({
            "strategy": k[-2],
            "method": k[-1],
            "replicates": len(g),
            "bias": float(err.mean()),
            "MAD": float(np.abs(err).mean()),
            "MSE": float(np.mean(err**2)),
            "mean_SE": float(np.mean(ses)) if ses else None,
            "coverage": float(np.mean(cov)) if cov else None,
            "mean_runtime_s": float(np.mean([r["runtime_s"] for r in g])),
        })
        out.append(row)
    return out


def run_replications(config: SimConfig, workers: int = 1, checkpoint: str | Path | None = None,
                     progress: Callable[[int, int], None] | None = None) -> ReplicationMetrics:
    """Run the Monte Carlo study; deterministic in ``config.master_seed``."""
    records, failures = _execute(config, simulate_replicate, workers, checkpoint, progress)
    return ReplicationMetrics(rows=aggregate(records), records=records, failures=failures)


def m_sensitivity_sweep(config: SimConfig, workers: int = 1, checkpoint: str | Path | None = None,
                        progress: Callable[[int, int], None] | None = None) -> ReplicationMetrics:
    """Paired sweep over ``config.m_sweep`` reusing each replicate's data across M."""
    if not config.m_sweep:
        raise ValueError("m_sweep must list at least one M")
    records, failures = _execute(config, sweep_replicate, workers, checkpoint, progress)
    return ReplicationMetrics(rows=aggregate(records, by_m=True), records=records, failures=failures)

