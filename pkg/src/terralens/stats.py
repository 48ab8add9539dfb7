"""Rank and linear correlation engine: midranks, Spearman/Pearson, the
64x26 correlation matrix, primary-variable assignment, and cross-method
concordance."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DIM_NAMES, EMBEDDING_DIM, VariableCatalog, load_catalog

METHOD_SPEARMAN = "spearman"
METHOD_RF = "rf_importance"
METHOD_EXTERNAL = "external_importance"
_METHODS = (METHOD_SPEARMAN, METHOD_RF, METHOD_EXTERNAL)


class UndefinedCorrelation(ValueError):
    """Signals a correlation that cannot be computed (too few complete
    pairs, or zero variance on one side)."""


def average_ranks(x) -> np.ndarray:
    """Midranks of x: ranks in [1, n], ties receive the mean of their span.

    Sum of ranks is always n(n+1)/2. Raises ValueError on empty or
    non-finite input.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"expected 1-D input, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("cannot rank an empty array")
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot rank non-finite values")
    return _midranks(arr)


def _midranks(arr: np.ndarray) -> np.ndarray:
    """Midranks without validation (internal fast path)."""
    n = arr.size
    order = np.argsort(arr, kind="stable")
    sx = arr[order]
    # group index per sorted position; groups are runs of tied values
    grp = np.cumsum(np.concatenate(([True], sx[1:] != sx[:-1]))) - 1
    counts = np.bincount(grp)
    ends = np.cumsum(counts).astype(np.float64)
    mid = ends - (counts - 1) / 2.0  # mean rank of each tie group, 1-based
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = mid[grp]
    return ranks


def _complete_pairs(x, y) -> tuple[np.ndarray, np.ndarray]:
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise ValueError(f"inputs must be equal-length 1-D arrays, got {xa.shape} and {ya.shape}")
    mask = np.isfinite(xa) & np.isfinite(ya)
    return xa[mask], ya[mask]


def _pearson_of(x: np.ndarray, y: np.ndarray) -> float:
    xd = x - x.mean()
    yd = y - y.mean()
    sxx = float(np.dot(xd, xd))
    syy = float(np.dot(yd, yd))
    if sxx <= 0.0 or syy <= 0.0:
        raise UndefinedCorrelation("zero variance")
    r = float(np.dot(xd, yd)) / np.sqrt(sxx * syy)
    # guard against rounding overshoot just past the closed interval
    return min(1.0, max(-1.0, r))


def pearson_r(x, y) -> float:
    """Pearson correlation over pairwise-complete observations.

    Raises UndefinedCorrelation with fewer than 3 complete pairs or zero
    variance on either side.
    """
    xc, yc = _complete_pairs(x, y)
    if xc.size < 3:
        raise UndefinedCorrelation(f"only {xc.size} complete pairs (need >= 3)")
    return _pearson_of(xc, yc)


def spearman_rho(x, y) -> float:
    """Spearman rank correlation: Pearson correlation of midranks.

    Pairs with a missing (non-finite) member are dropped first. Exact under
    ties; invariant under strictly monotone transforms of either input.
    """
    xc, yc = _complete_pairs(x, y)
    if xc.size < 3:
        raise UndefinedCorrelation(f"only {xc.size} complete pairs (need >= 3)")
    return _pearson_of(_midranks(xc), _midranks(yc))


@dataclass(frozen=True)
class CorrelationMatrix:
    """64x26 matrix of Spearman rho or importance scores.

    Undefined cells are NaN in `rho` with their pairwise-complete sample
    count still recorded in `n_used`.
    """

    rho: np.ndarray
    n_used: np.ndarray
    method_tag: str
    variables: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.method_tag not in _METHODS:
            raise ValueError(f"unknown method_tag {self.method_tag!r}")
        if self.rho.shape != (EMBEDDING_DIM, len(self.variables)):
            raise ValueError(f"matrix shape {self.rho.shape} does not match 64 x {len(self.variables)}")
        if self.n_used.shape != self.rho.shape:
            raise ValueError("n_used shape must match rho shape")
        finite = self.rho[np.isfinite(self.rho)]
        if self.method_tag == METHOD_SPEARMAN:
            if finite.size and (finite.min() < -1.0 or finite.max() > 1.0):
                raise ValueError("spearman entries must lie in [-1, 1]")
        else:
            if finite.size and finite.min() < 0.0:
                raise ValueError("importance entries must be nonnegative")

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.rho)


def correlation_matrix(dataset, method: str = METHOD_SPEARMAN) -> CorrelationMatrix:
    """Spearman rho between every embedding dimension and every variable.

    Deletion is pairwise-complete per cell; embeddings are always complete,
    so completeness is driven by each variable's missing pattern. Cells with
    fewer than 3 complete pairs or zero rank variance are NaN.
    """
    if method != METHOD_SPEARMAN:
        raise ValueError(f"unsupported method {method!r}")
    if dataset.n == 0:
        raise ValueError("dataset is empty")
    emb = dataset.embeddings
    env = dataset.env
    n_vars = env.shape[1]
    rho = np.full((EMBEDDING_DIM, n_vars), np.nan)
    n_used = np.zeros((EMBEDDING_DIM, n_vars), dtype=np.int64)

    # Variables sharing a missing-value pattern share the embedding ranks;
    # cache standardized dim ranks per unique mask.
    rank_cache: dict[bytes, tuple[np.ndarray, np.ndarray, int]] = {}
    for j in range(n_vars):
        col = env[:, j]
        mask = np.isfinite(col)
        m = int(mask.sum())
        n_used[:, j] = m
        if m < 3:
            continue
        key = mask.tobytes()
        if key not in rank_cache:
            sub = emb[mask]
            ranks = np.empty((m, EMBEDDING_DIM))
            for d in range(EMBEDDING_DIM):
                ranks[:, d] = _midranks(sub[:, d])
            ranks -= ranks.mean(axis=0)
            norms = np.sqrt(np.einsum("ij,ij->j", ranks, ranks))
            rank_cache[key] = (ranks, norms, m)
        ranks, norms, _ = rank_cache[key]
        ry = _midranks(col[mask])
        ry = ry - ry.mean()
        ny = float(np.sqrt(np.dot(ry, ry)))
        if ny <= 0.0:
            continue
        valid = norms > 0.0
        r = np.full(EMBEDDING_DIM, np.nan)
        r[valid] = (ranks[:, valid].T @ ry) / (norms[valid] * ny)
        rho[:, j] = np.clip(r, -1.0, 1.0)
    return CorrelationMatrix(rho=rho, n_used=n_used, method_tag=METHOD_SPEARMAN, variables=dataset.catalog.names)


def importance_matrix(columns: dict[str, np.ndarray], catalog: VariableCatalog,
                      method_tag: str = METHOD_RF, normalize: bool = True) -> CorrelationMatrix:
    """Assemble per-variable 64-entry importance columns into a matrix.

    Negative importances are clipped to zero here (the raw vectors keep
    them); columns are normalized to sum 1 when requested.
    """
    rho = np.full((EMBEDDING_DIM, 26), np.nan)
    n_used = np.zeros((EMBEDDING_DIM, 26), dtype=np.int64)
    for name, values in columns.items():
        j = catalog.index(name)
        col = np.clip(np.asarray(values, dtype=np.float64), 0.0, None)
        if col.shape != (EMBEDDING_DIM,):
            raise ValueError(f"importance column for {name!r} must have 64 entries")
        if normalize:
            total = col.sum()
            if total <= 0.0:
                raise ValueError(f"importance column for {name!r} sums to zero; cannot normalize")
            col = col / total
        rho[:, j] = col
    return CorrelationMatrix(rho=rho, n_used=n_used, method_tag=method_tag, variables=catalog.names)


@dataclass(frozen=True)
class PrimaryCell:
    """Primary variable for one dimension: None when the whole row is
    undefined."""

    variable: str | None
    score: float
    category: str | None


@dataclass(frozen=True)
class PrimaryAssignment:
    cells: tuple[PrimaryCell, ...]
    method_tag: str

    def variable(self, dim: int) -> str | None:
        return self.cells[dim].variable


def assign_primary(matrix: CorrelationMatrix, catalog: VariableCatalog | None = None) -> PrimaryAssignment:
    """Per dimension, the variable with the largest |score|.

    Ties break toward the lowest variable index in catalog order. A row with
    no defined cells yields an unassigned marker (variable None, score NaN).
    """
    if catalog is None:
        catalog = load_catalog()
    if catalog.names != matrix.variables:
        raise ValueError("catalog order does not match matrix variables")
    scores = np.abs(matrix.rho)
    cells = []
    for d in range(EMBEDDING_DIM):
        row = scores[d]
        if not np.any(np.isfinite(row)):
            cells.append(PrimaryCell(variable=None, score=float("nan"), category=None))
            continue
        j = int(np.nanargmax(row))  # first occurrence wins: catalog-order tie break
        name = matrix.variables[j]
        cells.append(PrimaryCell(variable=name, score=float(row[j]), category=catalog.get(name).category))
    return PrimaryAssignment(cells=tuple(cells), method_tag=matrix.method_tag)


@dataclass(frozen=True)
class ConcordanceEntry:
    dim: int
    spearman_variable: str | None
    rf_variable: str | None
    external_variable: str | None
    two_way: bool
    three_way: bool


@dataclass(frozen=True)
class ConcordanceReport:
    entries: tuple[ConcordanceEntry, ...]
    pair_level_r: float
    n_pairs: int

    @property
    def two_way_count(self) -> int:
        return sum(e.two_way for e in self.entries)

    @property
    def three_way_count(self) -> int:
        return sum(e.three_way for e in self.entries)


def concordance(spearman: PrimaryAssignment, rf: PrimaryAssignment,
                external: PrimaryAssignment | None,
                m_spearman: CorrelationMatrix, m_rf: CorrelationMatrix) -> ConcordanceReport:
    """Cross-method agreement on primary variables, plus the pair-level
    Pearson correlation between |rho| and importance over all 1,664 cells
    defined in both matrices."""
    entries = []
    for d in range(EMBEDDING_DIM):
        sv = spearman.cells[d].variable
        rv = rf.cells[d].variable
        ev = external.cells[d].variable if external is not None else None
        two = sv is not None and sv == rv
        three = two and ev is not None and ev == sv
        entries.append(ConcordanceEntry(dim=d, spearman_variable=sv, rf_variable=rv,
                                        external_variable=ev, two_way=two, three_way=three))
    both = m_spearman.defined & m_rf.defined
    n_pairs = int(both.sum())
    if n_pairs >= 3:
        pair_r = pearson_r(np.abs(m_spearman.rho[both]), m_rf.rho[both])
    else:
        pair_r = float("nan")
    return ConcordanceReport(entries=tuple(entries), pair_level_r=pair_r, n_pairs=n_pairs)


def save_matrix_csv(matrix: CorrelationMatrix, path: str | Path) -> None:
    """Write the 64x26 matrix with a header row/column; NaN cells are empty."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["dim", *matrix.variables])
        for d in range(EMBEDDING_DIM):
            row = [DIM_NAMES[d]]
            for v in matrix.rho[d]:
                row.append("" if not np.isfinite(v) else f"{v:.12g}")
            writer.writerow(row)


def load_matrix_csv(path: str | Path, method_tag: str, catalog: VariableCatalog | None = None) -> CorrelationMatrix:
    """Load a 64x26 matrix CSV written by save_matrix_csv.

    Hard errors on shape or header mismatches; n_used is unknown for
    imported matrices and recorded as zero.
    """
    if catalog is None:
        catalog = load_catalog()
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise ValueError(f"{path}: empty matrix file")
    header = rows[0]
    expected = ["dim", *catalog.names]
    if header != expected:
        extra = [h for h in header if h not in expected]
        missing = [h for h in expected if h not in header]
        detail = []
        if extra:
            detail.append(f"unexpected columns {extra}")
        if missing:
            detail.append(f"missing columns {missing}")
        raise ValueError(f"{path}: bad header ({'; '.join(detail) or 'wrong column order'})")
    if len(rows) - 1 != EMBEDDING_DIM:
        raise ValueError(f"{path}: expected {EMBEDDING_DIM} data rows, got {len(rows) - 1}")
    rho = np.full((EMBEDDING_DIM, 26), np.nan)
    for d, row in enumerate(rows[1:]):
        if len(row) != 27:
            raise ValueError(f"{path}: row {d + 2} has {len(row)} cells, expected 27")
        if row[0] != DIM_NAMES[d]:
            raise ValueError(f"{path}: row {d + 2} labeled {row[0]!r}, expected {DIM_NAMES[d]!r}")
        for j, cell in enumerate(row[1:]):
            if cell != "":
                rho[d, j] = float(cell)
    n_used = np.zeros((EMBEDDING_DIM, 26), dtype=np.int64)
    return CorrelationMatrix(rho=rho, n_used=n_used, method_tag=method_tag, variables=catalog.names)


def assignment_to_json(assignment: PrimaryAssignment) -> dict:
    return {
        "method": assignment.method_tag,
        "dimensions": [
            {"dim": DIM_NAMES[d], "variable": c.variable, "score": None if np.isnan(c.score) else c.score,
             "category": c.category}
            for d, c in enumerate(assignment.cells)
        ],
    }


def concordance_to_json(report: ConcordanceReport) -> dict:
    return {
        "two_way_count": report.two_way_count,
        "three_way_count": report.three_way_count,
        "pair_level_r": None if np.isnan(report.pair_level_r) else report.pair_level_r,
        "n_pairs": report.n_pairs,
        "dimensions": [
            {"dim": DIM_NAMES[e.dim], "spearman": e.spearman_variable, "rf": e.rf_variable,
             "external": e.external_variable, "two_way": e.two_way, "three_way": e.three_way}
            for e in report.entries
        ],
    }


def save_json(obj: dict, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False)
        fh.write("\n")
