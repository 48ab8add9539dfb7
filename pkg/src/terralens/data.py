"""Dataset ingestion, CONUS grid generation, seeded subsampling, and the
synthetic ground-truth generator used as the acceptance oracle."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats as sp_stats

from .core import (
    CONUS,
    DIM_NAMES,
    EMBEDDING_DIM,
    Bounds,
    SampleRecord,
    VariableCatalog,
    load_catalog,
)

TRANSFORMS = ("linear", "monotone-cubic", "noisy-linear")


@dataclass(frozen=True)
class LoadReport:
    n_rows: int
    n_skipped: int
    errors: tuple[str, ...] = ()


class Dataset:
    """Columnar store of location-year samples.

    Arrays are aligned by row: ids, lon, lat, year, embeddings (n, 64), and
    env (n, 26) with NaN for missing values. Treat instances as immutable
    after construction; loaders and the generator produce dense ids [0, n),
    while subsampling preserves source ids for provenance.
    """

    def __init__(self, ids, lon, lat, year, embeddings, env,
                 catalog: VariableCatalog, load_report: LoadReport | None = None) -> None:
        self.ids = np.asarray(ids, dtype=np.int64)
        self.lon = np.asarray(lon, dtype=np.float64)
        self.lat = np.asarray(lat, dtype=np.float64)
        self.year = np.asarray(year, dtype=np.int32)
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        self.env = np.asarray(env, dtype=np.float64)
        self.catalog = catalog
        self.load_report = load_report
        n = self.ids.shape[0]
        if len({self.lon.shape[0], self.lat.shape[0], self.year.shape[0],
                self.embeddings.shape[0], self.env.shape[0], n}) != 1:
            raise ValueError("column lengths differ")
        if self.embeddings.shape[1:] != (EMBEDDING_DIM,):
            raise ValueError(f"embeddings must be (n, {EMBEDDING_DIM})")
        if self.env.shape[1:] != (len(catalog.names),):
            raise ValueError("env width must match catalog")
        if len(np.unique(self.ids)) != n:
            raise ValueError("ids must be unique")
        self._id_rows: dict[int, int] | None = None

    @property
    def n(self) -> int:
        return int(self.ids.shape[0])

    @property
    def years_present(self) -> tuple[int, ...]:
        return tuple(int(y) for y in np.unique(self.year))

    def env_column(self, name: str) -> np.ndarray:
        return self.env[:, self.catalog.index(name)]

    def row_for_id(self, record_id: int) -> int:
        if self._id_rows is None:
            self._id_rows = {int(i): r for r, i in enumerate(self.ids)}
        return self._id_rows[int(record_id)]

    def record(self, row: int) -> SampleRecord:
        env = {}
        for j, name in enumerate(self.catalog.names):
            v = self.env[row, j]
            env[name] = None if not np.isfinite(v) else float(v)
        return SampleRecord(id=int(self.ids[row]), lon=float(self.lon[row]), lat=float(self.lat[row]),
                            year=int(self.year[row]), embedding=self.embeddings[row].copy(), env=env)

    def take(self, rows: np.ndarray) -> "Dataset":
        return Dataset(self.ids[rows], self.lon[rows], self.lat[rows], self.year[rows],
                       self.embeddings[rows], self.env[rows], self.catalog)


def generate_grid(bounds: Bounds, step: float) -> np.ndarray:
    """Regular lon/lat lattice over bounds as an (n, 2) array of (lon, lat).

    Row-major with latitude as the outer loop and longitude inner. Point
    counts are (floor(extent/step) + 1) per axis, tolerant of floating-point
    representation of the step.
    """
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")
    n_lon = int(np.floor((bounds.lon_max - bounds.lon_min) / step + 1e-9)) + 1
    n_lat = int(np.floor((bounds.lat_max - bounds.lat_min) / step + 1e-9)) + 1
    lon = bounds.lon_min + step * np.arange(n_lon)
    lat = bounds.lat_min + step * np.arange(n_lat)
    pts = np.empty((n_lat * n_lon, 2), dtype=np.float64)
    pts[:, 0] = np.tile(lon, n_lat)
    pts[:, 1] = np.repeat(lat, n_lon)
    return pts


_HEADER_FIXED = ("id", "lon", "lat", "year")


def expected_header(catalog: VariableCatalog) -> list[str]:
    return [*_HEADER_FIXED, *DIM_NAMES, *catalog.names]


def load_dataset(path: str | Path, catalog: VariableCatalog | None = None,
                 cache_dir: str | Path | None = None) -> Dataset:
    """Load a dataset CSV (header-checked, UTF-8, LF).

    Malformed rows are skipped and counted in the load report; a malformed
    header is a hard error naming the offending column. With cache_dir set,
    a binary columnar cache keyed by the file's content hash is used.
    """
    if catalog is None:
        catalog = load_catalog()
    path = Path(path)
    if cache_dir is not None:
        digest = hashlib.sha256(path.read_bytes()).hexdigest()[:16]
        cache_path = Path(cache_dir) / f"{digest}.npz"
        if cache_path.exists():
            return _load_cache(cache_path, catalog)

    expected = expected_header(catalog)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if header != expected:
            unknown = [h for h in header if h not in expected]
            missing = [h for h in expected if h not in header]
            if unknown:
                raise ValueError(f"{path}: unknown column(s) {unknown}")
            if missing:
                raise ValueError(f"{path}: missing column(s) {missing}")
            raise ValueError(f"{path}: columns out of canonical order")
        n_cols = len(expected)
        ids, lons, lats, years = [], [], [], []
        embs, envs = [], []
        errors: list[str] = []
        n_skipped = 0
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_cols:
                n_skipped += 1
                if len(errors) < 20:
                    errors.append(f"line {line_no}: expected {n_cols} cells, got {len(row)}")
                continue
            try:
                rid = int(row[0])
                lon = float(row[1])
                lat = float(row[2])
                year = int(row[3])
                emb = np.array(row[4:4 + EMBEDDING_DIM], dtype=np.float64)
                if not np.all(np.isfinite(emb)):
                    raise ValueError("non-finite embedding value")
            except ValueError as exc:
                n_skipped += 1
                if len(errors) < 20:
                    errors.append(f"line {line_no}: {exc}")
                continue
            env_row = np.full(len(catalog.names), np.nan)
            try:
                for j, cell in enumerate(row[4 + EMBEDDING_DIM:]):
                    if cell != "":
                        env_row[j] = float(cell)
            except ValueError as exc:
                n_skipped += 1
                if len(errors) < 20:
                    errors.append(f"line {line_no}: {exc}")
                continue
            ids.append(rid)
            lons.append(lon)
            lats.append(lat)
            years.append(year)
            embs.append(emb)
            envs.append(env_row)

    n = len(ids)
    report = LoadReport(n_rows=n, n_skipped=n_skipped, errors=tuple(errors))
    dataset = Dataset(
        np.array(ids, dtype=np.int64),
        np.array(lons), np.array(lats), np.array(years, dtype=np.int32),
        np.vstack(embs) if n else np.empty((0, EMBEDDING_DIM)),
        np.vstack(envs) if n else np.empty((0, len(catalog.names))),
        catalog, load_report=report,
    )
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        _save_cache(dataset, cache_path)
    return dataset


def _save_cache(dataset: Dataset, path: Path) -> None:
    np.savez_compressed(path, ids=dataset.ids, lon=dataset.lon, lat=dataset.lat,
                        year=dataset.year, embeddings=dataset.embeddings, env=dataset.env,
                        variables=np.array(dataset.catalog.names))


def _load_cache(path: Path, catalog: VariableCatalog) -> Dataset:
    with np.load(path, allow_pickle=False) as z:
        if tuple(z["variables"]) != catalog.names:
            raise ValueError(f"{path}: cache variable set does not match catalog")
        return Dataset(z["ids"], z["lon"], z["lat"], z["year"], z["embeddings"], z["env"], catalog)


def write_dataset_csv(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset in the canonical CSV interchange layout."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(expected_header(dataset.catalog))
        for i in range(dataset.n):
            row = [int(dataset.ids[i]), f"{dataset.lon[i]:.10g}", f"{dataset.lat[i]:.10g}", int(dataset.year[i])]
            row.extend(f"{v:.10g}" for v in dataset.embeddings[i])
            row.extend("" if not np.isfinite(v) else f"{v:.10g}" for v in dataset.env[i])
            writer.writerow(row)


def subsample(dataset: Dataset, n: int, seed: int, year_filter: int | None = None) -> Dataset:
    """Uniform sample of min(n, available) records without replacement.

    The selection uses a seeded PCG64 permutation (numpy default_rng) and the
    output is ordered by ascending id, so results are byte-for-byte
    reproducible for a fixed seed. Source ids are preserved.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rows = np.arange(dataset.n)
    if year_filter is not None:
        rows = rows[dataset.year == year_filter]
    rng = np.random.default_rng(seed)
    take = min(n, rows.size)
    chosen = rng.permutation(rows.size)[:take]
    picked = rows[chosen]
    picked = picked[np.argsort(dataset.ids[picked])]
    return dataset.take(picked)


@dataclass(frozen=True)
class PlantedPair:
    """One planted relationship in a synthetic dataset.

    dim and var may each be None: a dim-only pair injects a latent field into
    an embedding dimension without tying it to a variable, and a var-only
    pair drives a variable from a latent that no dimension carries. `spatial`
    selects a smooth low-frequency field of lon/lat instead of white noise
    for the latent.
    """

    dim: int | None
    var: str | None
    sign: int = 1
    transform: str = "linear"
    spatial: bool = False

    def __post_init__(self) -> None:
        if self.dim is None and self.var is None:
            raise ValueError("planted pair needs a dim, a var, or both")
        if self.dim is not None and not 0 <= self.dim < EMBEDDING_DIM:
            raise ValueError(f"planted dim {self.dim} out of range")
        if self.sign not in (1, -1):
            raise ValueError(f"sign must be +1 or -1, got {self.sign}")
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}")


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic dataset with known planted relationships.

    n is the sample count per year. A regime shift (shift_year/shift_dims)
    negates the listed dimensions' latent loadings in that year only, which
    breaks their dimension-variable relationships for stability analysis.
    """

    n: int
    seed: int
    planted: tuple[PlantedPair, ...] = ()
    noise_sd: float = 0.0
    years: tuple[int, ...] = (2023,)
    missing_rate: float = 0.0
    shift_year: int | None = None
    shift_dims: tuple[int, ...] = ()
    bounds: Bounds = CONUS
    plant_duplicate: bool = False

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must be in [0, 1)")
        dims = [p.dim for p in self.planted if p.dim is not None]
        if len(dims) != len(set(dims)):
            raise ValueError("planted dims must be unique")
        planted_dims = set(dims)
        for d in self.shift_dims:
            if d not in planted_dims:
                raise ValueError(f"shift dim {d} is not a planted dim")


def _smooth_field(u: np.ndarray, v: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Sum of low-frequency sinusoids of normalized lon/lat, standardized.

    u and v are coordinates rescaled to [0, 1]; the result has strong spatial
    autocorrelation at the 2-degree block scale.
    """
    out = np.zeros_like(u)
    for _ in range(6):
        fx, fy = rng.uniform(0.3, 2.5, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.normal()
        out += amp * np.sin(2.0 * np.pi * (fx * u + fy * v) + phase)
    sd = out.std()
    if sd > 0:
        out = (out - out.mean()) / sd
    return out


def _brute_spearman(x: np.ndarray, y: np.ndarray) -> float:
    """Independent reference Spearman (scipy), used for the oracle table."""
    return float(sp_stats.spearmanr(x, y).statistic)


def generate_synthetic(spec: SyntheticSpec, catalog: VariableCatalog | None = None
                       ) -> tuple[Dataset, dict[tuple[int, str], float]]:
    """Generate a synthetic dataset and the oracle table of planted rho.

    Non-planted dimensions are independent white noise; non-planted
    variables are white noise with optional missingness. Every (dim, var)
    planted pair is recorded in the oracle table with the Spearman rho
    measured on the generated columns by an independent reference
    implementation.
    """
    if catalog is None:
        catalog = load_catalog()
    for p in spec.planted:
        if p.var is not None and p.var not in catalog:
            raise ValueError(f"planted variable {p.var!r} not in catalog")

    years = tuple(sorted(spec.years))
    n = spec.n
    total = n * len(years)
    bounds = spec.bounds
    n_vars = len(catalog.names)

    lon = np.empty(total)
    lat = np.empty(total)
    year_col = np.empty(total, dtype=np.int32)
    emb = np.empty((total, EMBEDDING_DIM))
    env = np.empty((total, n_vars))

    # group pairs by variable: the first pair targeting a var defines its
    # transform; every dim on that var loads the same latent
    var_pairs: dict[str, list[PlantedPair]] = {}
    for p in spec.planted:
        if p.var is not None:
            var_pairs.setdefault(p.var, []).append(p)
    dim_only = [p for p in spec.planted if p.var is None]
    planted_dims = {p.dim for p in spec.planted if p.dim is not None}
    planted_vars = {catalog.index(v) for v in var_pairs}

    for yi, year in enumerate(years):
        rng = np.random.default_rng((spec.seed, year))
        sl = slice(yi * n, (yi + 1) * n)
        lon[sl] = rng.uniform(bounds.lon_min, bounds.lon_max, n)
        lat[sl] = rng.uniform(bounds.lat_min, bounds.lat_max, n)
        year_col[sl] = year
        u = (lon[sl] - bounds.lon_min) / (bounds.lon_max - bounds.lon_min)
        v = (lat[sl] - bounds.lat_min) / (bounds.lat_max - bounds.lat_min)

        block = rng.standard_normal((n, EMBEDDING_DIM))
        env_block = rng.standard_normal((n, n_vars))

        shifted = set(spec.shift_dims) if spec.shift_year == year else set()

        for var, pairs in sorted(var_pairs.items()):
            lead = pairs[0]
            latent = _smooth_field(u, v, rng) if lead.spatial else rng.standard_normal(n)
            if lead.transform == "monotone-cubic":
                target = latent ** 3 + latent
            else:
                target = latent
            j = catalog.index(var)
            env_block[:, j] = target + spec.noise_sd * rng.standard_normal(n)
            for p in pairs:
                if p.dim is None:
                    continue
                sign = -p.sign if p.dim in shifted else p.sign
                x = sign * latent
                # noisy-linear perturbs the embedding side too; the other
                # transforms keep the dimension an exact (signed) latent copy
                if p.transform == "noisy-linear" and spec.noise_sd > 0:
                    x = x + spec.noise_sd * rng.standard_normal(n)
                block[:, p.dim] = x

        for p in dim_only:
            latent = _smooth_field(u, v, rng) if p.spatial else rng.standard_normal(n)
            sign = -p.sign if p.dim in shifted else p.sign
            x = sign * latent
            if p.transform == "noisy-linear" and spec.noise_sd > 0:
                x = x + spec.noise_sd * rng.standard_normal(n)
            block[:, p.dim] = x

        if spec.missing_rate > 0:
            miss = rng.random((n, n_vars)) < spec.missing_rate
            for j in planted_vars:
                miss[:, j] = False
            env_block[miss] = np.nan

        emb[sl] = block
        env[sl] = env_block

    ids = np.arange(total, dtype=np.int64)

    if spec.plant_duplicate and total >= 2:
        # copy the embedding of the first record onto the geographically
        # farthest record so similarity search has a known best hit
        d2 = (lon - lon[0]) ** 2 + (lat - lat[0]) ** 2
        far = int(np.argmax(d2))
        emb[far] = emb[0]

    dataset = Dataset(ids, lon, lat, year_col, emb, env, catalog)
    oracle: dict[tuple[int, str], float] = {}
    for p in spec.planted:
        if p.dim is not None and p.var is not None:
            j = catalog.index(p.var)
            col = env[:, j]
            oracle[(p.dim, p.var)] = _brute_spearman(emb[:, p.dim], col)
    return dataset, oracle
