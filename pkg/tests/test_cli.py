import csv
import json

import numpy as np
import pytest

from conftest import TOY_A, TOY_X1, TOY_X2, TOY_Y, sim_sample
from fracimp.cli import main
from fracimp.data import format_number, write_csv

TOY_YAML = """\
schema: {treatment: A, outcome: Y, missing: X2, covariates: [X1, X2], id: id}
fi:
  M: 5
  update_alpha: true
  outcome_family: binary
  covariate_family: binary
  proposal_family: bernoulli-logistic
  outcome_formula: X1 + X2 + A
  propensity_formula: [X1, X2]
  covariate_formula: [X1]
  tolerance: 1.0e-4
"""


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def _header(path):
    with open(path) as fh:
        return [line for line in fh if line.startswith("#")]


@pytest.fixture
def toy_files(tmp_path):
    lines = ["id,X1,X2,A,Y"]
    for i in range(10):
        x2 = "NA" if np.isnan(TOY_X2[i]) else str(int(TOY_X2[i]))
        lines.append(f"{i + 1},{TOY_X1[i]},{x2},{TOY_A[i]},{TOY_Y[i]}")
    (tmp_path / "toy.csv").write_text("\n".join(lines) + "\n")
    (tmp_path / "toy.yaml").write_text(TOY_YAML)
    (tmp_path / "draws.csv").write_text("unit_id,value\n2,0\n2,1\n2,0\n2,1\n2,1\n3,0\n3,0\n3,0\n3,1\n3,1\n")
    return tmp_path


def test_impute_reproduces_worked_example_weights(toy_files):
    d = toy_files
    assert main(["impute", str(d / "toy.csv"), "--config", str(d / "toy.yaml"), "--draws", str(d / "draws.csv"),
                 "--out-dir", str(d / "out")]) == 0
    rows = _rows(d / "out" / "imputed.csv")
    assert len(rows) == 18
    w = {(r["unit_id"], r["X2"]): float(r["weight"]) for r in rows}
    np.testing.assert_allclose([w["2", "0"], w["2", "1"], w["3", "0"], w["3", "1"]],
                               [0.0886, 0.2743, 0.1334, 0.3000], atol=0.02)
    side = json.loads((d / "out" / "imputed_params.json").read_text())
    assert side["converged"] and len(side["loglik_trace"]) == side["iterations_used"] + 1
    assert side["proposal"]["family"] == "bernoulli-logistic"
    assert "config_sha256=" in _header(d / "out" / "imputed.csv")[1]


def test_impute_same_seed_is_byte_identical(tmp_path):
    sample, _ = sim_sample(120, seed=3)
    obs = sample.observed
    p = tmp_path / "sim.csv"

    write_csv(obs, p)
    args = ["impute", str(p), "--treatment", "A", "--outcome", "Y", "--missing", "X2", "--covariates",
            "X1,X2,X3", "--id", "id", "--m", "10", "--update-alpha"]
    assert main(args + ["--seed", "4", "--out-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--seed", "4", "--out-dir", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "imputed.csv").read_bytes() == (tmp_path / "b" / "imputed.csv").read_bytes()
    assert main(args + ["--seed", "5", "--out-dir", str(tmp_path / "c")]) == 0
    assert (tmp_path / "a" / "imputed.csv").read_bytes() != (tmp_path / "c" / "imputed.csv").read_bytes()


def test_impute_without_missing_values_adds_unit_weights(tmp_path):
    p = tmp_path / "full.csv"
    p.write_text("id,X1,X2,A,Y\n1,0.5,1.5,0,1\n2,1.5,0.5,1,2\n3,-1,2,0,0\n4,2,1,1,3\n5,0,0,1,1\n")
    assert main(["impute", str(p), "--treatment", "A", "--outcome", "Y", "--missing", "X2",
                 "--covariates", "X1,X2", "--id", "id", "--out-dir", str(tmp_path / "o")]) == 0
    rows = _rows(tmp_path / "o" / "imputed.csv")
    assert [r["weight"] for r in rows] == ["1"] * 5
    assert [(r["X1"], r["X2"], r["A"], r["Y"]) for r in rows][0] == ("0.5", "1.5", "0", "1")


def _sim_csv(path, n, seed, with_truth=False):
    sample, tau0 = sim_sample(n, seed=seed)
    obs = sample.observed
    cols = ["id", "X1", "X2", "X3", "A", "Y"] + (["X2_true"] if with_truth else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i in range(obs.n):
            x2 = obs.covariates["X2"][i]
            row = [i + 1, format_number(obs.covariates["X1"][i]), "NA" if np.isnan(x2) else format_number(x2),
                   int(obs.covariates["X3"][i]), int(obs.treatment[i]), format_number(obs.outcome[i])]
            if with_truth:
                row.append(format_number(sample.truth[i]))
            w.writerow(row)
    return tau0


SIM_ARGS = ["--treatment", "A", "--outcome", "Y", "--missing", "X2", "--covariates", "X1,X2,X3", "--id", "id",
            "--covariate-formula", "X1 + X3", "--propensity-formula", "X1 + X2 + X3",
            "--outcome-formula", "X1 + X2 + X3 + A + A:X1 + A:X2 + A:X3", "--update-alpha"]


def test_estimate_fi_with_jackknife(tmp_path):
    _sim_csv(tmp_path / "s.csv", 300, 8)
    code = main(["estimate", str(tmp_path / "s.csv"), *SIM_ARGS, "--m", "20", "--strategy", "FI",
                 "--method", "IPW", "--jackknife-d", "10", "--out-dir", str(tmp_path / "o")])
    assert code == 0
    rows = _rows(tmp_path / "o" / "estimates.csv")
    assert len(rows) == 1 and rows[0]["strategy"] == "FI"
    assert np.isfinite(float(rows[0]["tau_hat"])) and float(rows[0]["se"]) > 0
    assert len(_rows(tmp_path / "o" / "replicates.csv")) == 30
    assert "proposal:" in (tmp_path / "o" / "estimates.txt").read_text()


def test_estimate_baselines_run_no_em(tmp_path):
    _sim_csv(tmp_path / "s.csv", 200, 9)
    assert main(["estimate", str(tmp_path / "s.csv"), *SIM_ARGS, "--strategy", "CC,MEAN", "--method", "IPW",
                 "--out-dir", str(tmp_path / "o")]) == 0
    rows = _rows(tmp_path / "o" / "estimates.csv")
    assert [r["strategy"] for r in rows] == ["CC", "MEAN"]
    assert all(r["em_iterations"] == "NA" for r in rows)


def test_estimate_full_at_large_n_is_consistent(tmp_path):
    tau0 = _sim_csv(tmp_path / "s.csv", 100_000, 10, with_truth=True)
    assert main(["estimate", str(tmp_path / "s.csv"), *SIM_ARGS, "--strategy", "FULL", "--method", "AIPW",
                 "--truth", "X2_true", "--jackknife-d", "5000", "--out-dir", str(tmp_path / "o")]) == 0
    row = _rows(tmp_path / "o" / "estimates.csv")[0]
    assert abs(float(row["tau_hat"]) - tau0) < 3 * float(row["se"])


def test_estimate_exit_status_reflects_failures(tmp_path, capsys):
    _sim_csv(tmp_path / "s.csv", 100, 11)
    code = main(["estimate", str(tmp_path / "s.csv"), *SIM_ARGS, "--strategy", "FI,CC", "--method", "IPW",
                 "--covariate-formula", "X1 + Z", "--no-resampling", "--out-dir", str(tmp_path / "o")])
    assert code == 1
    rows = _rows(tmp_path / "o" / "estimates.csv")
    assert [r["strategy"] for r in rows] == ["CC"]
    assert main(["estimate", str(tmp_path / "nope.csv"), *SIM_ARGS]) == 2
    assert main(["estimate", str(tmp_path / "s.csv"), *SIM_ARGS, "--strategy", "FULL"]) == 2
    assert "truth" in capsys.readouterr().err


def test_config_file_values_are_overridden_by_flags(toy_files):
    d = toy_files
    assert main(["impute", str(d / "toy.csv"), "--config", str(d / "toy.yaml"), "--m", "3", "--seed", "2",
                 "--out-dir", str(d / "o")]) == 0
    config = json.loads(_header(d / "o" / "imputed.csv")[2].split("config=", 1)[1])
    assert config["fi"]["M"] == 3 and config["fi"]["tolerance"] == 1e-4 and config["seed"] == 2
    assert len(_rows(d / "o" / "imputed.csv")) == 8 + 2 * 3


def test_simulate_smoke_metrics_header(tmp_path):
    assert main(["simulate", "--preset", "smoke", "--replicates", "2", "--seed", "1",
                 "--out-dir", str(tmp_path)]) == 0
    with open(tmp_path / "simulation_metrics.csv") as fh:
        header = next(line for line in fh if not line.startswith("#")).strip().split(",")
    assert header == ["strategy", "method", "replicates", "bias", "MAD", "MSE", "mean_SE", "coverage",
                      "mean_runtime_s"]
    assert len(_rows(tmp_path / "simulation_replicates.csv")) == 2 * 6
    table = (tmp_path / "simulation_table.txt").read_text()
    assert "Average JackKnife SE" in table and "Coverage" in table


def test_sweep_smoke_has_rows_per_m(tmp_path):
    assert main(["sweep-m", "--preset", "smoke", "--replicates", "1", "--m-values", "5,100", "--strategy", "FI",
                 "--seed", "2", "--out-dir", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "sweep_metrics.csv")
    assert sorted({r["M"] for r in rows}) == ["100", "5"]
    assert {r["method"] for r in rows} == {"IPW", "AIPW"}
