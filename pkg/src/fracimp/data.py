"""Dataset containers, CSV ingestion and the stacked fractional table."""

from __future__ import annotations

import csv
import dataclasses
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MISSING_TOKENS = {"", "na"}
WEIGHT_TOL = 1e-12


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.flags.writeable:
        a = a.copy()
        a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ObservedDataset:
    """Units with covariates, binary treatment, outcome and one partly missing covariate.

    The designated covariate holds ``nan`` where it is unobserved; the response
    indicator ``R`` is derived from that mask.
    """

    unit_id: np.ndarray
    covariates: Mapping[str, np.ndarray]
    treatment: np.ndarray
    outcome: np.ndarray
    missing_covariate: str

    def __post_init__(self):
        uid = np.asarray(self.unit_id, dtype=np.int64)
        n = len(uid)
        cov = {}
        for name, col in self.covariates.items():
            col = np.asarray(col, dtype=float)
            if col.shape != (n,):
                raise ValueError(f"covariate {name!r} has shape {col.shape}, expected ({n},)")
            cov[name] = _frozen(col)
        if self.missing_covariate not in cov:
            raise ValueError(f"designated covariate {self.missing_covariate!r} is not among the covariates")
        a = np.asarray(self.treatment, dtype=float)
        y = np.asarray(self.outcome, dtype=float)
        if a.shape != (n,) or y.shape != (n,):
            raise ValueError("treatment and outcome must have one entry per unit")
        if len(np.unique(uid)) != n:
            raise ValueError("unit_id values must be unique")
        if not np.all((a == 0) | (a == 1)):
            bad = int(np.flatnonzero(~((a == 0) | (a == 1)))[0])
            raise ValueError(f"treatment must be 0/1 (unit_id {uid[bad]})")
        if not np.all(np.isfinite(y)):
            bad = int(np.flatnonzero(~np.isfinite(y))[0])
            raise ValueError(f"outcome missing or non-finite for unit_id {uid[bad]}")
        for name, col in cov.items():
            if name != self.missing_covariate and not np.all(np.isfinite(col)):
                bad = int(np.flatnonzero(~np.isfinite(col))[0])
                raise ValueError(f"covariate {name!r} missing for unit_id {uid[bad]}; only "
                                 f"{self.missing_covariate!r} may be missing")
        object.__setattr__(self, "unit_id", _frozen(uid))
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "treatment", _frozen(a))
        object.__setattr__(self, "outcome", _frozen(y))

    @property
    def n(self) -> int:
        return len(self.unit_id)

    @property
    def covariate_names(self) -> list[str]:
        return list(self.covariates)

    @property
    def observed_covariates(self) -> list[str]:
        return [c for c in self.covariates if c != self.missing_covariate]

    @property
    def response(self) -> np.ndarray:
        """R: 1 where the designated covariate is observed."""
        return np.isfinite(self.covariates[self.missing_covariate]).astype(np.int64)

    @property
    def complete(self) -> np.ndarray:
        return np.isfinite(self.covariates[self.missing_covariate])

    @property
    def n_missing(self) -> int:
        return int(self.n - self.complete.sum())

    def columns(self) -> dict[str, np.ndarray]:
        """Covariates plus ``A`` and ``Y`` keyed by name (designated column may hold nan)."""
        cols = dict(self.covariates)
        cols["A"] = self.treatment
        cols["Y"] = self.outcome
        return cols

    def take(self, positions: Sequence[int] | np.ndarray, renumber: bool = False) -> "ObservedDataset":
        pos = np.asarray(positions, dtype=np.int64)
        uid = np.arange(1, len(pos) + 1) if renumber else self.unit_id[pos]
        return ObservedDataset(
            unit_id=uid,
            covariates={k: v[pos] for k, v in self.covariates.items()},
            treatment=self.treatment[pos],
            outcome=self.outcome[pos],
            missing_covariate=self.missing_covariate,
        )

    def with_covariate(self, name: str, values: np.ndarray) -> "ObservedDataset":
        cov = dict(self.covariates)
        cov[name] = np.asarray(values, dtype=float)
        return dataclasses.replace(self, covariates=cov)

    def with_outcome(self, y: np.ndarray) -> "ObservedDataset":
        return dataclasses.replace(self, outcome=np.asarray(y, dtype=float))


@dataclass(frozen=True)
class ModelParams:
    """Nuisance parameters of the factorised likelihood.

    ``alpha`` is the covariate model for the missing covariate (with
    ``alpha_sigma`` when that model is Gaussian), ``beta``/``sigma`` the outcome
    model and ``theta`` the propensity model.
    """

    alpha: np.ndarray
    beta: np.ndarray
    theta: np.ndarray
    sigma: float | None = None
    alpha_sigma: float | None = None
    iteration: int = 0

    def __post_init__(self):
        for name in ("alpha", "beta", "theta"):
            v = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, _frozen(v))
        for name in ("sigma", "alpha_sigma"):
            s = getattr(self, name)
            if s is not None and not (np.isfinite(s) and s > 0):
                raise ValueError(f"{name} must be positive, got {s}")

    def vector(self, include_alpha: bool = True) -> np.ndarray:
        parts = []
        if include_alpha:
            parts.append(self.alpha)
            if self.alpha_sigma is not None:
                parts.append([self.alpha_sigma])
        parts.append(self.beta)
        if self.sigma is not None:
            parts.append([self.sigma])
        parts.append(self.theta)
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])

    def to_dict(self) -> dict[str, Any]:
        return {
            "alpha": self.alpha.tolist(),
            "alpha_sigma": self.alpha_sigma,
            "beta": self.beta.tolist(),
            "sigma": self.sigma,
            "theta": self.theta.tolist(),
            "iteration": self.iteration,
        }


@dataclass(frozen=True)
class FractionalDataset:
    """Stacked fractional table: one row per complete unit, ``M`` rows per incomplete unit.

    Rows of a unit are contiguous and units keep the order of ``source``.
    ``columns`` holds every row-level variable by name, with the designated
    covariate filled by its observed or imputed value.
    """

    source: ObservedDataset
    unit_index: np.ndarray
    imputation_index: np.ndarray
    imputed: np.ndarray
    weights: np.ndarray
    h_values: np.ndarray
    columns: Mapping[str, np.ndarray] = field(repr=False)
    starts: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != self.unit_index.shape:
            raise ValueError("weights must align with rows")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("fractional weights must be finite and non-negative")
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def n_units(self) -> int:
        return self.source.n

    @property
    def n_rows(self) -> int:
        return len(self.unit_index)

    @property
    def counts(self) -> np.ndarray:
        """m_i per unit."""
        return np.diff(np.append(self.starts, self.n_rows))

    @property
    def unit_id(self) -> np.ndarray:
        return self.source.unit_id[self.unit_index]

    @property
    def values(self) -> np.ndarray:
        return self.columns[self.source.missing_covariate]

    def unit_sums(self, x: np.ndarray | None = None) -> np.ndarray:
        x = self.weights if x is None else x
        return np.add.reduceat(np.asarray(x, dtype=float), self.starts)

    def check_weights(self, tol: float = WEIGHT_TOL) -> None:
        dev = np.abs(self.unit_sums() - 1.0)
        if dev.size and dev.max() > tol:
            k = int(np.argmax(dev))
            raise AssertionError(f"weights of unit_id {self.source.unit_id[k]} sum to "
                                 f"{1 - dev[k] if self.unit_sums()[k] < 1 else 1 + dev[k]!r}")

    def with_weights(self, weights: np.ndarray) -> "FractionalDataset":
        return dataclasses.replace(self, weights=np.asarray(weights, dtype=float))

    def take_units(self, positions: Sequence[int] | np.ndarray, renumber: bool = False) -> "FractionalDataset":
        """Sub-table for the given unit positions (repeats allowed), keeping the imputed draws."""
        pos = np.asarray(positions, dtype=np.int64)
        m = self.counts[pos]
        new_starts = np.concatenate([[0], np.cumsum(m)[:-1]]).astype(np.int64)
        total = int(m.sum())
        rows = np.repeat(self.starts[pos] - new_starts, m) + np.arange(total)
        src = self.source.take(pos, renumber=renumber)
        new_unit_index = np.repeat(np.arange(len(pos)), m)
        return FractionalDataset(
            source=src,
            unit_index=_frozen(new_unit_index),
            imputation_index=_frozen(self.imputation_index[rows]),
            imputed=_frozen(self.imputed[rows]),
            weights=self.weights[rows],
            h_values=_frozen(self.h_values[rows]),
            columns={k: _frozen(v[rows]) for k, v in self.columns.items()},
            starts=_frozen(new_starts),
        )

    def to_records(self) -> list[dict[str, Any]]:
        """Rows in the layout of a fractionally completed table."""
        out = []
        uid = self.unit_id
        names = self.source.covariate_names
        for r in range(self.n_rows):
            rec = {"unit_id": int(uid[r]), "imputation": int(self.imputation_index[r])}
            for c in names:
                rec[c] = float(self.columns[c][r])
            rec["A"] = float(self.columns["A"][r])
            rec["Y"] = float(self.columns["Y"][r])
            rec["weight"] = float(self.weights[r])
            rec["h"] = float(self.h_values[r]) if self.imputed[r] else None
            out.append(rec)
        return out


def stack(data: ObservedDataset, draws, h_values) -> FractionalDataset:
    """Expand incomplete units into ``M`` imputed rows with weights ``1/M``.

    Parameters
    ----------
    data : ObservedDataset
    draws : mapping unit_id -> sequence, or array of shape (n_missing, M)
        Imputed values for every unit with ``R = 0``.  Array rows follow the
        order of the incomplete units in ``data``.
    h_values : same layout as ``draws``
        Proposal density of each draw; must be strictly positive.
    """
    miss_pos = np.flatnonzero(~data.complete)
    if isinstance(draws, Mapping):
        ids = set(int(k) for k in draws)
        expected = set(int(u) for u in data.unit_id[miss_pos])
        if ids != expected:
            raise ValueError(f"draws given for units {sorted(ids)}, expected exactly {sorted(expected)}")
        lengths = {len(draws[k]) for k in draws}
        if len(lengths) > 1:
            raise ValueError("every incomplete unit needs the same number of draws")
        order = [int(u) for u in data.unit_id[miss_pos]]
        key = {int(k): k for k in draws}
        draws_arr = np.array([list(draws[key[u]]) for u in order], dtype=float)
        h_arr = np.array([list(h_values[key[u]]) for u in order], dtype=float)
    else:
        draws_arr = np.asarray(draws, dtype=float)
        h_arr = np.asarray(h_values, dtype=float)
    if len(miss_pos) == 0:
        draws_arr = np.empty((0, 1))
        h_arr = np.empty((0, 1))
    if draws_arr.ndim != 2 or draws_arr.shape[0] != len(miss_pos):
        raise ValueError(f"need draws for {len(miss_pos)} incomplete units, got shape {draws_arr.shape}")
    if h_arr.shape != draws_arr.shape:
        raise ValueError("h_values must match draws")
    M = draws_arr.shape[1]
    if M < 1:
        raise ValueError("M must be at least 1")
    if np.any(~(h_arr > 0)):
        raise ValueError("proposal densities must be strictly positive")
    if not np.all(np.isfinite(draws_arr)):
        raise ValueError("imputed values must be finite")

    complete = data.complete
    counts = np.where(complete, 1, M)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    n_rows = int(counts.sum())
    unit_index = np.repeat(np.arange(data.n), counts)
    imp_index = np.arange(n_rows) - np.repeat(starts, counts) + 1
    imputed = ~complete[unit_index]

    name = data.missing_covariate
    values = data.covariates[name][unit_index].copy()
    h = np.ones(n_rows)
    weights = np.ones(n_rows)
    if len(miss_pos):
        imp_rows = (starts[miss_pos][:, None] + np.arange(M)[None, :])
        values[imp_rows] = draws_arr
        h[imp_rows] = h_arr
        weights[imp_rows] = 1.0 / M

    cols = {k: v[unit_index] for k, v in data.columns().items()}
    cols[name] = values
    return FractionalDataset(
        source=data,
        unit_index=_frozen(unit_index),
        imputation_index=_frozen(imp_index),
        imputed=_frozen(imputed),
        weights=weights,
        h_values=_frozen(h),
        columns={k: _frozen(v) for k, v in cols.items()},
        starts=_frozen(starts),
    )


def missingness_summary(data: ObservedDataset) -> dict[str, dict[str, float]]:
    """Joint proportions of (complete, missing) x (control, treatment) with margins."""
    n = data.n
    comp = data.complete
    treated = data.treatment == 1
    table = {}
    for row, mask in (("complete", comp), ("missing", ~comp)):
        c = float(np.sum(mask & ~treated)) / n
        t = float(np.sum(mask & treated)) / n
        table[row] = {"control": c, "treatment": t, "total": c + t}
    table["total"] = {
        "control": table["complete"]["control"] + table["missing"]["control"],
        "treatment": table["complete"]["treatment"] + table["missing"]["treatment"],
        "total": 1.0 if n else 0.0,
    }
    return table


# ---------------------------------------------------------------------------
# CSV


@dataclass
class Schema:
    """Column roles for CSV ingestion.

    ``categorical`` maps a categorical covariate to its reference level
    (``None`` picks the lexicographically first level).
    """

    treatment: str
    outcome: str
    missing: str
    covariates: list[str] = field(default_factory=list)
    id: str | None = None
    categorical: dict[str, str | None] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Schema":
        cat = d.get("categorical") or {}
        if isinstance(cat, (list, tuple)):
            cat = {c: None for c in cat}
        return cls(
            treatment=d["treatment"],
            outcome=d["outcome"],
            missing=d["missing"],
            covariates=list(d.get("covariates") or []),
            id=d.get("id"),
            categorical=dict(cat),
        )


def _is_missing(cell: str) -> bool:
    return cell.strip().lower() in MISSING_TOKENS


def _parse_float(cell: str, col: str, row: int) -> float:
    try:
        return float(cell)
    except ValueError:
        raise ValueError(f"row {row}: column {col!r} has non-numeric value {cell!r}") from None


def load_csv(path: str | Path, schema: Schema | Mapping[str, Any]) -> ObservedDataset:
    """Read a CSV into an :class:`ObservedDataset`.

    Empty cells and ``NA`` (any case) are missing.  Only the designated
    column may contain missing cells; row numbers in errors count data rows
    from 1.  Categorical covariates are expanded into ``<col>_<level>``
    dummies with the reference level dropped.
    """
    if not isinstance(schema, Schema):
        schema = Schema.from_dict(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r) and not r[0].startswith("#")]
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    index = {h: k for k, h in enumerate(header)}
    needed = [schema.treatment, schema.outcome, schema.missing, *schema.covariates]
    if schema.id:
        needed.append(schema.id)
    for col in needed:
        if col not in index:
            raise ValueError(f"{path}: column {col!r} not found in header")
    for r, rec in enumerate(body, start=1):
        if len(rec) != len(header):
            raise ValueError(f"row {r}: expected {len(header)} fields, got {len(rec)}")

    def column(col: str, allow_missing: bool = False) -> np.ndarray:
        out = np.empty(len(body))
        k = index[col]
        for r, rec in enumerate(body, start=1):
            cell = rec[k]
            if _is_missing(cell):
                if not allow_missing:
                    raise ValueError(f"row {r}: missing value in column {col!r}")
                out[r - 1] = np.nan
            else:
                out[r - 1] = _parse_float(cell, col, r)
        return out

    a = column(schema.treatment)
    bad = np.flatnonzero((a != 0) & (a != 1))
    if bad.size:
        raise ValueError(f"row {bad[0] + 1}: treatment column {schema.treatment!r} must be 0/1, "
                         f"got {a[bad[0]]!r}")
    y = column(schema.outcome)
    if schema.id:
        uid = column(schema.id)
        if np.any(uid != np.round(uid)):
            raise ValueError("unit ids must be integers")
        uid = uid.astype(np.int64)
    else:
        uid = np.arange(1, len(body) + 1)

    covs: dict[str, np.ndarray] = {}
    for col in schema.covariates:
        if col == schema.missing:
            continue
        if col in schema.categorical:
            k = index[col]
            cells = []
            for r, rec in enumerate(body, start=1):
                if _is_missing(rec[k]):
                    raise ValueError(f"row {r}: missing value in column {col!r}")
                cells.append(rec[k].strip())
            levels = sorted(set(cells))
            ref = schema.categorical[col]
            if ref is None:
                ref = levels[0]
            if ref not in levels:
                raise ValueError(f"reference level {ref!r} not present in column {col!r}")
            for lev in levels:
                if lev == ref:
                    continue
                covs[f"{col}_{lev}"] = np.array([1.0 if c == lev else 0.0 for c in cells])
        else:
            covs[col] = column(col)
    covs[schema.missing] = column(schema.missing, allow_missing=True)
    return ObservedDataset(unit_id=uid, covariates=covs, treatment=a, outcome=y,
                           missing_covariate=schema.missing)


def format_number(x: float) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return "NA"
    if float(x) == int(x) and abs(x) < 1e15:
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(data: ObservedDataset, path: str | Path, header_lines: Sequence[str] = ()) -> None:
    """Write a dataset back out; floats use 17 significant digits so values round-trip."""
    names = data.covariate_names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *names, "A", "Y"])
        for i in range(data.n):
            w.writerow([int(data.unit_id[i]), *(format_number(data.covariates[c][i]) for c in names),
                        format_number(data.treatment[i]), format_number(data.outcome[i])])
