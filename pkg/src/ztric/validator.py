"""Checks the KDC runs on a first-layer weight matrix before issuing keys.

Two countermeasures against input recovery from the issued inner products:

* key budget: fewer functional keys than inputs, leaving 256^(l - n)
  candidate plaintexts;
* no standard basis vector e_k in the column space of W, otherwise some
  combination of issued keys reveals x_k directly.

The basis check uses exact integer arithmetic. Residual: W may still
reveal linear combinations of several inputs; that leakage is not scored.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import gcd

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class KeyBudgetReport:
    l: int
    n: int
    solution_space_bits: int
    passed: bool

    def to_dict(self) -> dict:
        return {"l": self.l, "n": self.n, "solution_space_bits": self.solution_space_bits,
                "passed": self.passed}


@dataclass(frozen=True)
class BasisCheckReport:
    passed: bool
    offending_basis_index: int | None = None
    rank: int = 0

    def to_dict(self) -> dict:
        return {"passed": self.passed, "offending_basis_index": self.offending_basis_index,
                "rank": self.rank}


@dataclass(frozen=True)
class IssuanceReport:
    budget: KeyBudgetReport
    basis: BasisCheckReport
    passed: bool = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "passed", self.budget.passed and self.basis.passed)

    def summary(self) -> str:
        parts = []
        if not self.budget.passed:
            parts.append(f"key budget: {self.budget.n} keys >= {self.budget.l} inputs")
        if not self.basis.passed:
            parts.append(f"standard basis vector e_{self.basis.offending_basis_index} in column space")
        return "; ".join(parts) or "passed"

    def to_dict(self) -> dict:
        return {"passed": self.passed, "key_budget": self.budget.to_dict(),
                "basis_check": self.basis.to_dict(), "summary": self.summary()}


def check_key_budget(l: int, n: int) -> KeyBudgetReport:
    passed = n < l
    return KeyBudgetReport(l, n, 8 * (l - n) if passed else 0, passed)


def _as_int_matrix(W) -> list[list[int]]:
    rows = [[int(v) for v in row] for row in np.asarray(W).tolist()]
    if not rows or not rows[0]:
        raise ShapeError("weight matrix is empty")
    if any(len(r) != len(rows[0]) for r in rows):
        raise ShapeError("weight matrix is ragged")
    return rows


def reduced_row_pattern(M: list[list[int]]) -> tuple[list[list[int]], list[int]]:
    """Fraction-free Gauss-Jordan elimination over the integers.

    Returns rows that are positive multiples of the reduced row echelon
    form of ``M`` (so their zero pattern is exact) and the pivot columns.
    Rows are divided by their content after every update to keep entries
    small; each step is exact.
    """
    A = [list(r) for r in M]
    n_rows, n_cols = len(A), len(A[0])
    pivots: list[int] = []
    r = 0
    for c in range(n_cols):
        if r == n_rows:
            break
        piv = next((i for i in range(r, n_rows) if A[i][c] != 0), None)
        if piv is None:
            continue
        A[r], A[piv] = A[piv], A[r]
        prow = A[r]
        p = prow[c]
        for i in range(n_rows):
            if i == r or A[i][c] == 0:
                continue
            f = A[i][c]
            row = [p * a - f * b for a, b in zip(A[i], prow)]
            g = 0
            for v in row:
                g = gcd(g, v)
            if g > 1:
                row = [v // g for v in row]
            A[i] = row
        pivots.append(c)
        r += 1
    return A[:r], pivots


def check_no_standard_basis(W) -> BasisCheckReport:
    """Does span(columns of W) contain any e_k?

    The column space of W is the row space of W^T; e_k lies in that row
    space exactly when one row of its reduced echelon form is e_k itself
    (a multiple of it, fraction-free), i.e. the pivot row for column k has
    no other nonzero entry.
    """
    rows = _as_int_matrix(W)
    Wt = [list(col) for col in zip(*rows)]
    R, pivots = reduced_row_pattern(Wt)
    offending = None
    for row, c in zip(R, pivots):
        if all(v == 0 for j, v in enumerate(row) if j != c):
            offending = c if offending is None else min(offending, c)
    return BasisCheckReport(offending is None, offending, len(pivots))


def validate_for_issuance(W, l: int | None = None, n: int | None = None) -> IssuanceReport:
    """Both checks on an l x n first-layer matrix; the KDC issues keys only on a pass."""
    rows = _as_int_matrix(W)
    shape = (len(rows), len(rows[0]))
    if (l is not None and l != shape[0]) or (n is not None and n != shape[1]):
        raise ShapeError(f"matrix shape {shape} does not match l={l}, n={n}")
    return IssuanceReport(check_key_budget(*shape), check_no_standard_basis(rows))
