"""Tiny formula language for design matrices.

A formula is a list of terms.  A term is a column name (``"X1"``, ``"A"``) or
a product of names joined by ``":"`` (``"A:X1"``).  An intercept column is
always placed first.  Strings like ``"X1 + X2 + A + A:X1"`` are accepted too.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence

import numpy as np


def parse_terms(formula: str | Sequence[str]) -> tuple[str, ...]:
    if isinstance(formula, str):
        parts = [p.strip() for p in formula.replace("~", "+").split("+")]
    else:
        parts = [str(p).strip() for p in formula]
    terms = []
    for p in parts:
        if not p or p == "1":
            continue
        factors = [f.strip() for f in p.split(":")]
        if any(not f for f in factors):
            raise ValueError(f"malformed term {p!r}")
        term = ":".join(factors)
        if term not in terms:
            terms.append(term)
    return tuple(terms)


def term_factors(term: str) -> list[str]:
    return term.split(":")


def variables(terms: Sequence[str]) -> set[str]:
    out: set[str] = set()
    for t in terms:
        out.update(term_factors(t))
    return out


def column_names(terms: Sequence[str]) -> list[str]:
    return ["(Intercept)", *terms]


def design_matrix(terms: Sequence[str], columns: Mapping[str, np.ndarray], n: int | None = None) -> np.ndarray:
    """Build ``[1, term_1, ..., term_k]`` from named column arrays."""
    if n is None:
        n = len(next(iter(columns.values())))
    X = np.empty((n, len(terms) + 1))
    X[:, 0] = 1.0
    for k, term in enumerate(terms, start=1):
        col = np.ones(n)
        for f in term_factors(term):
            try:
                col = col * np.asarray(columns[f], dtype=float)
            except KeyError:
                raise KeyError(f"formula refers to unknown column {f!r}") from None
        X[:, k] = col
    return X


def terms_involving(terms: Sequence[str], name: str) -> list[int]:
    """Design-column indices (intercept = 0) whose term contains ``name``."""
    return [k for k, t in enumerate(terms, start=1) if name in term_factors(t)]
