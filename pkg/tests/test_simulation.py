import json

import numpy as np
import pytest

from fracimp.data import missingness_summary
from fracimp.estimators import AIPW, CC, FI, IPW, MEAN
from fracimp.pipeline import estimate
from fracimp.rng import StreamFactory
from fracimp.simulation import (SimConfig, _execute, aggregate, generate_sample, m_sensitivity_sweep, preset,
                                run_replications, simulation_fi_config, true_propensity)
from fracimp.variance import ResamplingConfig


@pytest.fixture(scope="module")
def big_sample():
    return generate_sample(200_000, StreamFactory(99).generator(0))


def test_missingness_and_treatment_proportions(big_sample):
    sample, _ = big_sample
    t = missingness_summary(sample.observed)
    assert t["missing"]["total"] == pytest.approx(0.317, abs=0.006)
    assert t["missing"]["treatment"] == pytest.approx(0.087, abs=0.006)


def test_average_effect_matches_analytic_expectation(big_sample):
    sample, tau0 = big_sample
    # 2 + 0.5 E X1 + 0.25 E X2 with E X1 = -0.6 and E X2 = 0.6
    assert tau0 == pytest.approx(1.85, abs=0.01)
    assert np.allclose(sample.y1 - sample.y0, 2 + 0.5 * sample.observed.covariates["X1"] + 0.25 * sample.truth)


def test_propensity_as_written():
    assert true_propensity(0.0, 0.0, 0.0) == pytest.approx(1 / (1 + np.exp(0.3)), abs=1e-12)
    assert true_propensity(0.0, 0.0, 0.0) == pytest.approx(0.4256, abs=1e-4)


def test_hidden_truth_only_reaches_full():
    sample, _ = generate_sample(300, StreamFactory(1).generator(0))
    obs = sample.observed
    assert np.isnan(obs.covariates["X2"]).sum() > 0
    rows = estimate(obs, [FI, CC, MEAN], [IPW, AIPW], simulation_fi_config(M=10), None, StreamFactory(1))
    assert len(rows) == 6 and all(np.isfinite(r.tau_hat) for r in rows)
    with pytest.raises(ValueError, match="requires the true"):
        estimate(obs, ["FULL"], [IPW], simulation_fi_config(M=10), None, StreamFactory(1))


def _stable(rows):
    """Metrics without wall-clock fields, serialised for exact comparison."""
    return json.dumps([{k: v for k, v in r.items() if "runtime" not in k} for r in rows], sort_keys=True)


def _tiny(**kw):
    base = dict(n=300, replicates=3, master_seed=5, fi_config=simulation_fi_config(M=8),
                resampling=ResamplingConfig(d=60))
    base.update(kw)
    return SimConfig(**base)


def test_replications_are_seed_deterministic(tmp_path):
    a = run_replications(_tiny())
    b = run_replications(_tiny())
    assert _stable(a.rows) == _stable(b.rows)
    assert _stable(a.records) == _stable(b.records)
    c = run_replications(_tiny(master_seed=6))
    assert _stable(c.rows) != _stable(a.rows)
    assert len(a.rows) == 6
    row = a.get(FI, IPW)
    assert set(row) >= {"bias", "MAD", "MSE", "mean_SE", "coverage"}


def test_checkpoint_resume_gives_identical_metrics(tmp_path):
    ck = tmp_path / "ck.jsonl"
    first = run_replications(_tiny(), checkpoint=ck)
    lines = ck.read_text().splitlines()
    assert len(lines) == 3
    ck.write_text("\n".join(lines[:2]) + "\n")
    resumed = run_replications(_tiny(), checkpoint=ck)
    assert len(ck.read_text().splitlines()) == 3
    assert _stable(resumed.records) == _stable(first.records)
    # a different configuration ignores the stored replicates
    other = run_replications(_tiny(master_seed=8), checkpoint=ck)
    assert _stable(other.records) != _stable(first.records)


def test_sweep_single_replicate_shape():
    cfg = _tiny(replicates=1, m_sweep=(5,))
    m = m_sensitivity_sweep(cfg)
    assert len(m.rows) == len(cfg.strategies) * len(cfg.methods)
    m2 = m_sensitivity_sweep(_tiny(replicates=1, m_sweep=(5, 20), strategies=(FI,)))
    assert [(r["M"], r["method"]) for r in m2.rows] == [(5, IPW), (5, AIPW), (20, IPW), (20, AIPW)]
    with pytest.raises(ValueError):
        m_sensitivity_sweep(_tiny())


def test_too_many_failures_reject_the_run():
    def job(cfg, rep):
        if rep % 2:
            raise FloatingPointError("bad replicate")
        return [{"replicate": rep}]
    with pytest.raises(RuntimeError, match="replicates failed"):
        _execute(_tiny(replicates=10), job)

    def rare(cfg, rep):
        if rep == 0:
            raise FloatingPointError("bad replicate")
        return [{"replicate": rep}]
    records, failures = _execute(_tiny(replicates=40), rare)
    assert failures == 1 and len(records) == 39


def test_aggregate_metrics_by_hand():
    recs = [dict(strategy=FI, method=IPW, tau_hat=1.0 + e, tau0=1.0, se=0.1, covered=c, runtime_s=1.0)
            for e, c in ((0.1, True), (-0.3, False))]
    row = aggregate(recs)[0]
    assert row["bias"] == pytest.approx(-0.1)
    assert row["MAD"] == pytest.approx(0.2)
    assert row["MSE"] == pytest.approx(0.05)
    assert row["coverage"] == 0.5


def test_presets_and_digest():
    desk = preset("desk")
    assert (desk.n, desk.replicates, desk.fi_config.M, desk.resampling.d) == (1000, 500, 100, 10)
    assert preset("sweep").m_sweep == (5, 10, 20, 50, 100)
    assert desk.digest() == SimConfig.from_dict(desk.to_dict()).digest()
    assert desk.digest() != preset("desk", n=999).digest()
