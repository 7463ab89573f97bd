"""Command-line entry point: ``fracimp {impute,estimate,simulate,sweep-m}``.

Settings come from an optional YAML file (``--config``) and are overridden by
flags.  Every file written starts with ``#`` comment lines holding the hash of
the resolved settings, the seed and the settings themselves, so a run can be
repeated from its own output.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import __version__
from .data import Schema, format_number, load_csv
from .engine import FiConfig, iterate, run_em, stack_draws
from .estimators import FI, METHODS, STRATEGIES
from .pipeline import EstimateRow, estimate
from .proposal import fit_proposal
from .rng import PURPOSE_IMPUTE, StreamFactory
from .simulation import PRESETS, SimConfig, m_sensitivity_sweep, preset, run_replications
from .variance import BOOTSTRAP, JACKKNIFE, ResamplingConfig

log = logging.getLogger("fracimp")

DEFAULT_SEED = 20240101


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# settings


def _load_config(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise CliError(f"{path}: top level must be a mapping")
    return cfg


def _split_list(value: str | None) -> list[str] | None:
    if value is None:
        return None
    return [v.strip() for v in value.replace(",", " ").split() if v.strip()]


def _fi_settings(cfg: dict[str, Any], args) -> dict[str, Any]:
    fi = dict(cfg.get("fi") or {})
    overrides = {
        "M": args.m,
        "max_iterations": args.max_iter,
        "tolerance": args.tol,
        "outcome_formula": args.outcome_formula,
        "propensity_formula": args.propensity_formula,
        "covariate_formula": args.covariate_formula,
        "outcome_family": args.outcome_family,
        "covariate_family": args.covariate_family,
        "proposal_family": args.proposal,
        "scale_convention": args.scale_convention,
        "propensity_clip": args.propensity_clip,
    }
    fi.update({k: v for k, v in overrides.items() if v is not None})
    if args.update_alpha is not None:
        fi["update_alpha"] = args.update_alpha
    return fi


def _resampling_settings(cfg: dict[str, Any], args) -> dict[str, Any] | None:
    rs = cfg.get("resampling", {})
    if rs is None or args.no_resampling:
        return None
    rs = dict(rs)
    if args.jackknife_d is not None:
        rs.update(kind=JACKKNIFE, d=args.jackknife_d)
    if args.bootstrap_b is not None:
        rs.update(kind=BOOTSTRAP, B=args.bootstrap_b)
    if args.refit_scope is not None:
        rs["refit_scope"] = args.refit_scope
    return rs


def _schema_settings(cfg: dict[str, Any], args) -> dict[str, Any]:
    sc = dict(cfg.get("schema") or {})
    for key in ("treatment", "outcome", "missing", "id"):
        v = getattr(args, key)
        if v is not None:
            sc[key] = v
    if args.covariates is not None:
        sc["covariates"] = _split_list(args.covariates)
    if args.categorical is not None:
        sc["categorical"] = _split_list(args.categorical)
    for key in ("treatment", "outcome", "missing"):
        if not sc.get(key):
            raise CliError(f"schema needs a {key!r} column (flag --{key} or schema.{key} in the config)")
    return sc


def _choices(value, cfg_value, allowed, what) -> list[str]:
    items = _split_list(value) if value is not None else cfg_value
    if items is None:
        return None
    items = [str(v).upper() for v in items]
    bad = [v for v in items if v not in allowed]
    if bad:
        raise CliError(f"unknown {what}: {bad}; choose from {list(allowed)}")
    return items


def config_hash(resolved: dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest()[:16]


def header_lines(command: str, resolved: dict[str, Any]) -> list[str]:
    return [
        f"fracimp {__version__} {command}",
        f"config_sha256={config_hash(resolved)} seed={resolved.get('seed')}",
        "config=" + json.dumps(resolved, sort_keys=True),
    ]


def _write_table_csv(path: Path, header: list[str], columns: list[str], rows: list[dict[str, Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])


def _cell(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, float, np.integer, np.floating)):
        return format_number(v)
    return str(v)


def aligned_table(columns: list[str], rows: list[list[str]]) -> str:
    """Plain-text table with right-aligned columns."""
    widths = [max(len(c), *(len(r[k]) for r in rows)) if rows else len(c) for k, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(wd) for c, wd in zip(columns, widths))]
    lines.append("  ".join("-" * wd for wd in widths))
    lines.extend("  ".join(v.rjust(wd) for v, wd in zip(r, widths)) for r in rows)
    return "\n".join(lines) + "\n"


def _write_text(path: Path, header: list[str], body: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        fh.write(body)


def _fmt(v, spec=".4f") -> str:
    return "NA" if v is None else format(v, spec)


# ---------------------------------------------------------------------------
# commands


def _read_draws(path: str) -> dict[int, list[float]]:
    """Long-format draws file with columns ``unit_id,value``."""
    out: dict[int, list[float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or [c.strip() for c in rows[0][:2]] != ["unit_id", "value"]:
        raise CliError(f"{path}: expected header 'unit_id,value'")
    for r in rows[1:]:
        out.setdefault(int(r[0]), []).append(float(r[1]))
    return out


def cmd_impute(args, cfg) -> int:
    schema = _schema_settings(cfg, args)
    seed = args.seed if args.seed is not None else cfg.get("seed", DEFAULT_SEED)
    fi = _fi_settings(cfg, args)
    data = load_csv(args.input, Schema.from_dict(schema))
    config = FiConfig.from_dict(fi).resolved(data)
    resolved = {"seed": seed, "schema": schema, "fi": config.to_dict(), "input": str(args.input),
                "draws": args.draws}
    header = header_lines("impute", resolved)
    proposal = fit_proposal(data, config.covariate_formula, config.proposal_family, config.scale_convention)
    if args.draws:
        result = iterate(stack_draws(data, proposal, _read_draws(args.draws)), config)
    else:
        result = run_em(data, proposal, config, StreamFactory(seed).child(PURPOSE_IMPUTE))
    fd = result.fractional_data
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = fd.to_records()
    cols = ["unit_id", "imputation", *data.covariate_names, "A", "Y", "weight", "h"]
    _write_table_csv(out / "imputed.csv", header, cols, records)
    side = {
        "header": header,
        "params": result.params.to_dict(),
        "proposal": proposal.to_dict(),
        "iterations_used": result.iterations_used,
        "converged": result.converged,
        "loglik_trace": list(result.loglik_trace),
    }
    with open(out / "imputed_params.json", "w", encoding="utf-8") as fh:
        json.dump(side, fh, indent=2)
        fh.write("\n")
    if not result.converged:
        log.warning("EM stopped after %d iterations without meeting the tolerance", result.iterations_used)
    print(f"wrote {out / 'imputed.csv'} ({fd.n_rows} rows, {fd.n_units} units)")
    return 0


ESTIMATE_COLUMNS = ["strategy", "method", "tau_hat", "se", "ci_low", "ci_high", "runtime_s", "n_failed",
                    "em_iterations", "em_converged"]


def cmd_estimate(args, cfg) -> int:
    schema = _schema_settings(cfg, args)
    seed = args.seed if args.seed is not None else cfg.get("seed", DEFAULT_SEED)
    strategies = _choices(args.strategy, cfg.get("strategies"), STRATEGIES, "strategy") or [FI]
    methods = _choices(args.method, cfg.get("methods"), METHODS, "method") or list(METHODS)
    truth_col = args.truth or cfg.get("truth")
    if "FULL" in strategies and not truth_col:
        raise CliError("FULL needs a column of true covariate values (--truth)")
    data = load_csv(args.input, Schema.from_dict(schema))
    truth = None
    if truth_col:
        truth = load_csv(args.input, Schema(treatment=schema["treatment"], outcome=schema["outcome"],
                                            missing=truth_col, covariates=[truth_col])).covariates[truth_col]
        if not np.all(np.isfinite(truth)):
            raise CliError(f"truth column {truth_col!r} has missing values")
    config = FiConfig.from_dict(_fi_settings(cfg, args)).resolved(data)
    rs = _resampling_settings(cfg, args)
    rc = None if rs is None else ResamplingConfig(**rs)
    resolved = {"seed": seed, "schema": schema, "fi": config.to_dict(),
                "resampling": None if rc is None else rc.to_dict(),
                "strategies": strategies, "methods": methods, "input": str(args.input), "truth": truth_col}
    header = header_lines("estimate", resolved)
    streams = StreamFactory(seed)
    rows: list[EstimateRow] = []
    failed = []
    proposal = None
    for strategy in strategies:
        t0 = time.perf_counter()
        try:
            fi_fit = None
            if strategy == FI:
                proposal = fit_proposal(data, config.covariate_formula, config.proposal_family,
                                        config.scale_convention)
                fi_fit = (proposal, run_em(data, proposal, config, streams.child(PURPOSE_IMPUTE)))
            got = estimate(data, [strategy], methods, config, rc, streams, truth=truth, fi_fit=fi_fit)
        except Exception as exc:
            log.error("%s failed: %s", strategy, exc)
            failed.append(strategy)
            continue
        if fi_fit is not None:
            # runtime of the FI row covers the EM as well as the resampling
            for r in got:
                r.runtime_s = time.perf_counter() - t0
        rows.extend(got)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_table_csv(out / "estimates.csv", header, ESTIMATE_COLUMNS, [r.as_dict() for r in rows])
    rep_rows = [{"strategy": r.strategy, "method": r.method, "replicate": k, "tau_hat": float(v)}
                for r in rows if r.replicates is not None for k, v in enumerate(r.replicates)]
    if rep_rows:
        _write_table_csv(out / "replicates.csv", header, ["strategy", "method", "replicate", "tau_hat"], rep_rows)
    table = aligned_table(
        ["Strategy", "Method", "Est", "SE", "CI low", "CI high", "Time (s)"],
        [[r.strategy, r.method, _fmt(r.tau_hat), _fmt(r.se), _fmt(r.ci_low), _fmt(r.ci_high),
          _fmt(r.runtime_s, ".2f")] for r in rows])
    if proposal is not None:
        table += "\nproposal: " + json.dumps(proposal.to_dict()) + "\n"
    if failed:
        table += "\nfailed strategies: " + ", ".join(failed) + "\n"
    _write_text(out / "estimates.txt", header, table)
    sys.stdout.write(table)
    return 1 if failed else 0


def _sim_config(cfg, args, default_preset: str) -> SimConfig:
    sim = dict(cfg.get("simulation") or {})
    name = args.preset or sim.pop("preset", default_preset)
    sim.pop("preset", None)
    if name not in PRESETS:
        raise CliError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    base = preset(name)
    d = base.to_dict()
    d.update({k: v for k, v in sim.items() if k in ("n", "replicates", "strategies", "methods", "m_sweep")})
    d["fi_config"].update(_fi_settings(cfg, args))
    rs = _resampling_settings(cfg if "resampling" in cfg else {"resampling": d["resampling"]}, args)
    d["resampling"] = rs
    if args.n is not None:
        d["n"] = args.n
    if args.replicates is not None:
        d["replicates"] = args.replicates
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is not None:
        d["master_seed"] = seed
    strategies = _choices(args.strategy, d["strategies"], STRATEGIES, "strategy")
    methods = _choices(args.method, d["methods"], METHODS, "method")
    d["strategies"], d["methods"] = strategies, methods
    if getattr(args, "m_values", None):
        d["m_sweep"] = [int(v) for v in _split_list(args.m_values)]
    return SimConfig.from_dict(d)


def _progress(done: int, total: int) -> None:
    if done == total or done % max(1, total // 20) == 0:
        log.info("%d/%d replicates", done, total)


METRIC_COLUMNS = ["strategy", "method", "replicates", "bias", "MAD", "MSE", "mean_SE", "coverage",
                  "mean_runtime_s"]
RECORD_COLUMNS = ["replicate", "strategy", "method", "tau_hat", "tau0", "se", "ci_low", "ci_high", "covered",
                  "runtime_s", "em_iterations", "em_converged", "n_failed"]


def _metrics_table(rows, by_m=False) -> str:
    cols = (["M"] if by_m else []) + ["Strategy", "Method", "Bias", "MAD", "MSE", "Average JackKnife SE",
                                      "Coverage"]
    body = []
    for r in rows:
        cov = "NA" if r["coverage"] is None else f"{100 * r['coverage']:.1f}%"
        body.append(([str(r["M"])] if by_m else []) + [
            r["strategy"], r["method"], _fmt(r["bias"]), _fmt(r["MAD"]), _fmt(r["MSE"]),
            _fmt(r["mean_SE"]), cov])
    return aligned_table(cols, body)


def _run_study(args, cfg, sweep: bool) -> int:
    sim = _sim_config(cfg, args, "sweep" if sweep else "desk")
    resolved = {"seed": sim.master_seed, "simulation": sim.to_dict()}
    command = "sweep-m" if sweep else "simulate"
    header = header_lines(command, resolved)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runner = m_sensitivity_sweep if sweep else run_replications
    metrics = runner(sim, workers=args.threads, checkpoint=args.checkpoint, progress=_progress)
    stem = "sweep" if sweep else "simulation"
    mcols = (["M"] if sweep else []) + METRIC_COLUMNS
    _write_table_csv(out / f"{stem}_metrics.csv", header, mcols, metrics.rows)
    rcols = RECORD_COLUMNS + (["M"] if sweep else [])
    _write_table_csv(out / f"{stem}_replicates.csv", header, rcols, metrics.records)
    table = _metrics_table(metrics.rows, by_m=sweep)
    table += f"\nreplicates: {sim.replicates}  failed: {metrics.failures}\n"
    _write_text(out / f"{stem}_table.txt", header, table)
    sys.stdout.write(table)
    produced = {(r["strategy"], r["method"]) for r in metrics.rows}
    wanted = {(s, m) for s in sim.strategies for m in sim.methods}
    return 0 if wanted <= produced else 1


def cmd_simulate(args, cfg) -> int:
    return _run_study(args, cfg, sweep=False)


def cmd_sweep_m(args, cfg) -> int:
    return _run_study(args, cfg, sweep=True)


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML settings file; flags override its values")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out-dir", default=".", help="directory for output files")
    p.add_argument("--threads", type=int, default=1, help="worker processes for replicate loops")
    p.add_argument("-v", "--verbose", action="store_true")
    fi = p.add_argument_group("imputation model")
    fi.add_argument("--m", type=int, help="imputations per incomplete unit")
    fi.add_argument("--max-iter", type=int, help="maximum EM iterations")
    fi.add_argument("--tol", type=float, help="EM convergence tolerance (max abs parameter change)")
    fi.add_argument("--outcome-formula", help='e.g. "X1 + X2 + A + A:X1"')
    fi.add_argument("--propensity-formula")
    fi.add_argument("--covariate-formula", help="predictors of the missing covariate")
    fi.add_argument("--outcome-family", choices=["gaussian", "binary"])
    fi.add_argument("--covariate-family", choices=["gaussian", "binary"])
    fi.add_argument("--proposal", choices=["matched-t", "bernoulli-logistic"])
    fi.add_argument("--scale-convention", choices=["variance-matched", "sd-multiplied"])
    fi.add_argument("--propensity-clip", type=float)
    ua = fi.add_mutually_exclusive_group()
    ua.add_argument("--update-alpha", dest="update_alpha", action="store_true", default=None,
                    help="re-estimate the covariate model inside the EM")
    ua.add_argument("--fixed-alpha", dest="update_alpha", action="store_false",
                    help="keep the complete-case covariate model fixed")


def _add_estimation(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", help="IPW, AIPW or both (comma separated)")
    p.add_argument("--strategy", help="any of FI, CC, MEAN, FULL (comma separated)")
    rs = p.add_argument_group("resampling")
    rs.add_argument("--jackknife-d", type=int, help="delete-d jackknife group size")
    rs.add_argument("--bootstrap-b", type=int, help="use the bootstrap with this many resamples")
    rs.add_argument("--refit-scope", choices=["weights-only", "full-refit"])
    rs.add_argument("--no-resampling", action="store_true", help="point estimates only")


def _add_schema(p: argparse.ArgumentParser) -> None:
    p.add_argument("input", help="input CSV")
    sc = p.add_argument_group("columns")
    sc.add_argument("--treatment")
    sc.add_argument("--outcome")
    sc.add_argument("--missing", help="the covariate with missing values")
    sc.add_argument("--covariates", help="covariate columns (comma separated)")
    sc.add_argument("--id", help="unit id column")
    sc.add_argument("--categorical", help="categorical covariates to expand into dummies")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fracimp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("impute", help="write the fractionally imputed table")
    _add_schema(p)
    _add_common(p)
    p.add_argument("--draws", help="CSV of fixed imputed values (unit_id,value) instead of random draws")
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("estimate", help="treatment effect estimates with resampling SEs")
    _add_schema(p)
    _add_common(p)
    _add_estimation(p)
    p.add_argument("--truth", help="column with the true values of the missing covariate (FULL strategy)")
    p.set_defaults(func=cmd_estimate)

    for name, func, help_ in (("simulate", cmd_simulate, "Monte Carlo study"),
                              ("sweep-m", cmd_sweep_m, "Monte Carlo study over several M")):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        _add_estimation(p)
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--n", type=int, help="units per replicate")
        p.add_argument("--replicates", type=int)
        p.add_argument("--checkpoint", help="JSONL file of finished replicates; reruns resume from it")
        if name == "sweep-m":
            p.add_argument("--m-values", help="M values to sweep, e.g. 5,10,20,50,100")
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args.config)
        return args.func(args, cfg)
    except (CliError, ValueError, OSError, RuntimeError) as exc:
        print(f"fracimp: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
