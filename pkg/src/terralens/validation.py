"""Spatial block cross-validation (grouped folds, generalization gaps) and
temporal stability of annual correlation profiles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CONUS, EMBEDDING_DIM, Bounds
from .data import Dataset, subsample
from .forest import ForestParams, ModelScore, kfold_r2, random_fold_ids
from .stats import CorrelationMatrix, UndefinedCorrelation, correlation_matrix, pearson_r

BLOCK_DEG = 2.0


@dataclass(frozen=True)
class BlockId:
    bx: int
    by: int


def block_id(lon: float, lat: float, bounds: Bounds = CONUS, block_deg: float = BLOCK_DEG) -> BlockId:
    """Block column/row of a point in a block_deg lattice anchored at the
    bounds origin. Out-of-bounds points are rejected."""
    if not bounds.contains(lon, lat):
        raise ValueError(f"point ({lon}, {lat}) outside bounds")
    return BlockId(bx=int(np.floor((lon - bounds.lon_min) / block_deg)),
                   by=int(np.floor((lat - bounds.lat_min) / block_deg)))


def block_keys(lons, lats, bounds: Bounds = CONUS, block_deg: float = BLOCK_DEG) -> np.ndarray:
    """Vectorized block key (single integer) per row."""
    lons = np.asarray(lons, dtype=np.float64)
    lats = np.asarray(lats, dtype=np.float64)
    inside = ((lons >= bounds.lon_min) & (lons <= bounds.lon_max)
              & (lats >= bounds.lat_min) & (lats <= bounds.lat_max))
    if not np.all(inside):
        bad = int(np.flatnonzero(~inside)[0])
        raise ValueError(f"point ({lons[bad]}, {lats[bad]}) outside bounds")
    bx = np.floor((lons - bounds.lon_min) / block_deg).astype(np.int64)
    by = np.floor((lats - bounds.lat_min) / block_deg).astype(np.int64)
    return by * 100_000 + bx


def grouped_folds(blocks, k: int = 5, seed: int = 0) -> np.ndarray:
    """Per-row fold ids with every block confined to a single fold.

    Blocks are shuffled with the seed, stably sorted by row count
    (largest first), and greedily assigned to the currently lightest fold,
    which balances fold sizes. The result is a function of the block
    multiset, k, and seed only; row order does not matter.
    """
    blocks = np.asarray(blocks)
    if blocks.ndim == 2 and blocks.shape[1] == 2:
        blocks = blocks[:, 1] * 100_000 + blocks[:, 0]
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    uniq, inverse, counts = np.unique(blocks, return_inverse=True, return_counts=True)
    if uniq.size < k:
        raise ValueError(f"need at least {k} distinct blocks, got {uniq.size}")
    rng = np.random.default_rng(seed)
    shuffled = rng.permutation(uniq.size)
    # stable sort by count descending over the shuffled order
    order = shuffled[np.argsort(-counts[shuffled], kind="stable")]
    fold_rows = np.zeros(k, dtype=np.int64)
    block_fold = np.empty(uniq.size, dtype=np.int64)
    for b in order:
        f = int(np.argmin(fold_rows))
        block_fold[b] = f
        fold_rows[f] += counts[b]
    return block_fold[inverse]


@dataclass(frozen=True)
class GeneralizationGap:
    """Random-fold vs spatial-fold R2 for one target variable."""

    r2_random: float
    r2_spatial: float
    delta: float
    random_score: ModelScore
    spatial_score: ModelScore
    variable: str | None = None


def spatial_cv_gap(X, y, coords, params: ForestParams = ForestParams(), k: int = 5,
                   seed: int = 0, bounds: Bounds = CONUS, block_deg: float = BLOCK_DEG,
                   variable: str | None = None) -> GeneralizationGap:
    """Run k-fold twice, with random folds and with grouped spatial folds,
    using the same forest params and seed; delta = r2_random - r2_spatial."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError("coords must be (n, 2) lon/lat")
    n = coords.shape[0]
    folds_random = random_fold_ids(n, k, seed)
    folds_spatial = grouped_folds(block_keys(coords[:, 0], coords[:, 1], bounds, block_deg), k, seed)
    score_random = kfold_r2(X, y, k, params, fold_assignment=folds_random)
    score_spatial = kfold_r2(X, y, k, params, fold_assignment=folds_spatial)
    return GeneralizationGap(
        r2_random=score_random.r2_mean,
        r2_spatial=score_spatial.r2_mean,
        delta=score_random.r2_mean - score_spatial.r2_mean,
        random_score=score_random,
        spatial_score=score_spatial,
        variable=variable,
    )


@dataclass(frozen=True)
class TemporalProfiles:
    years: tuple[int, ...]
    matrices: dict[int, CorrelationMatrix]
    skipped_years: tuple[int, ...] = ()


def temporal_profiles(dataset: Dataset, n_per_year: int, seed: int,
                      years: tuple[int, ...] | None = None) -> TemporalProfiles:
    """Independent per-year subsample and correlation matrix.

    Requested years absent from the dataset are listed in skipped_years.
    Output years are sorted ascending.
    """
    present = set(dataset.years_present)
    requested = tuple(sorted(years)) if years is not None else dataset.years_present
    skipped = tuple(y for y in requested if y not in present)
    matrices: dict[int, CorrelationMatrix] = {}
    for year in requested:
        if year not in present:
            continue
        child_seed = int(np.random.SeedSequence((seed, year)).generate_state(1)[0])
        sub = subsample(dataset, n_per_year, seed=child_seed, year_filter=year)
        matrices[year] = correlation_matrix(sub)
    return TemporalProfiles(years=tuple(sorted(matrices)), matrices=matrices, skipped_years=skipped)


@dataclass(frozen=True)
class StabilityReport:
    """Per-dimension mean pairwise Pearson correlation of annual profiles,
    plus the year-by-year whole-profile correlation matrix."""

    years: tuple[int, ...]
    per_dimension: np.ndarray          # (64,) NaN = unassessed
    year_matrix: np.ndarray            # (Y, Y) symmetric, unit diagonal
    mean_r: float
    unassessed: tuple[int, ...]

    MIN_COMMON_CELLS = 5


def temporal_stability(profiles: TemporalProfiles | dict[int, CorrelationMatrix]) -> StabilityReport:
    """Stability of dimension interpretations across years.

    For each dimension, Pearson correlation of its 26-value profile between
    every pair of years (cells defined in both years; pairs with fewer than
    5 common cells are skipped), averaged over pairs. Also correlates the
    flattened 64x26 profiles for every year pair.
    """
    if isinstance(profiles, TemporalProfiles):
        matrices = profiles.matrices
    else:
        matrices = profiles
    years = tuple(sorted(matrices))
    if len(years) < 2:
        raise ValueError("need at least 2 yearly matrices")
    y_count = len(years)
    stacks = np.stack([matrices[y].rho for y in years])  # (Y, 64, 26)

    per_dim = np.full(EMBEDDING_DIM, np.nan)
    for d in range(EMBEDDING_DIM):
        pair_values = []
        for i in range(y_count):
            for j in range(i + 1, y_count):
                a = stacks[i, d]
                b = stacks[j, d]
                both = np.isfinite(a) & np.isfinite(b)
                if int(both.sum()) < StabilityReport.MIN_COMMON_CELLS:
                    continue
                try:
                    pair_values.append(pearson_r(a[both], b[both]))
                except UndefinedCorrelation:
                    continue
        if pair_values:
            per_dim[d] = float(np.mean(pair_values))

    year_matrix = np.eye(y_count)
    flat = stacks.reshape(y_count, -1)
    for i in range(y_count):
        for j in range(i + 1, y_count):
            both = np.isfinite(flat[i]) & np.isfinite(flat[j])
            if int(both.sum()) < StabilityReport.MIN_COMMON_CELLS:
                r = np.nan
            else:
                try:
                    r = pearson_r(flat[i][both], flat[j][both])
                except UndefinedCorrelation:
                    r = np.nan
            year_matrix[i, j] = r
            year_matrix[j, i] = r

    unassessed = tuple(int(d) for d in np.flatnonzero(~np.isfinite(per_dim)))
    mean_r = float(np.nanmean(per_dim)) if np.any(np.isfinite(per_dim)) else float("nan")
    return StabilityReport(years=years, per_dimension=per_dim, year_matrix=year_matrix,
                           mean_r=mean_r, unassessed=unassessed)
