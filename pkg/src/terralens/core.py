"""Shared domain types: embedding vectors, sample records, geographic bounds,
and the fixed catalog of 26 environmental variables."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

EMBEDDING_DIM = 64
DIM_NAMES: tuple[str, ...] = tuple(f"A{i:02d}" for i in range(EMBEDDING_DIM))

YEAR_MIN = 2017
YEAR_MAX = 2023
YEARS: tuple[int, ...] = tuple(range(YEAR_MIN, YEAR_MAX + 1))

CATEGORIES: tuple[str, ...] = (
    "terrain",
    "soil",
    "vegetation",
    "radiation",
    "temperature",
    "climate",
    "hydrology",
    "urban",
)


class CatalogError(ValueError):
    """Raised when a variable catalog definition violates its contract."""


@dataclass(frozen=True)
class Bounds:
    """Rectangular lon/lat extent in degrees."""

    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float

    def __post_init__(self) -> None:
        if not self.lon_min < self.lon_max:
            raise ValueError(f"lon_min {self.lon_min} must be < lon_max {self.lon_max}")
        if not self.lat_min < self.lat_max:
            raise ValueError(f"lat_min {self.lat_min} must be < lat_max {self.lat_max}")

    def contains(self, lon: float, lat: float) -> bool:
        return (self.lon_min <= lon <= self.lon_max) and (self.lat_min <= lat <= self.lat_max)


#: Continental United States study bounds (125.0W-66.5W, 24.5N-49.5N).
CONUS = Bounds(-125.0, -66.5, 24.5, 49.5)


def dequantize(q):
    """Convert signed 8-bit embedding values to floats in [-1, 1].

    Uses q / 127 with clamping, so +127 -> 1.0 and -128 clamps to -1.0.
    Accepts scalars or arrays; monotone nondecreasing over [-128, 127].
    """
    arr = np.asarray(q, dtype=np.float64) / 127.0
    out = np.clip(arr, -1.0, 1.0)
    if np.ndim(q) == 0:
        return float(out)
    return out


def as_embedding(values) -> np.ndarray:
    """Validate and return a 64-entry float64 embedding vector.

    Raises ValueError when the length is wrong or any entry is non-finite.
    """
    vec = np.asarray(values, dtype=np.float64)
    if vec.shape != (EMBEDDING_DIM,):
        raise ValueError(f"embedding must have exactly {EMBEDDING_DIM} entries, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ValueError("embedding contains non-finite values")
    return vec


@dataclass(frozen=True)
class VariableDef:
    name: str
    category: str
    unit: str
    static: bool


@dataclass(frozen=True)
class VariableCatalog:
    """Ordered catalog of the 26 environmental variables.

    The order is canonical: it fixes CSV column order, correlation-matrix
    column order, and argmax tie-breaking everywhere downstream.
    """

    entries: tuple[VariableDef, ...]

    def __post_init__(self) -> None:
        if len(self.entries) != 26:
            raise CatalogError(f"catalog must have exactly 26 variables, got {len(self.entries)}")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise CatalogError("catalog variable names must be unique")
        for e in self.entries:
            if e.category not in CATEGORIES:
                raise CatalogError(f"unknown category {e.category!r} for variable {e.name!r}")
            if e.category in ("terrain", "soil") and not e.static:
                raise CatalogError(f"{e.category} variable {e.name!r} must be flagged static")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.entries)

    def index(self, name: str) -> int:
        for i, e in enumerate(self.entries):
            if e.name == name:
                return i
        raise KeyError(f"unknown variable {name!r}")

    def get(self, name: str) -> VariableDef:
        return self.entries[self.index(name)]

    def __contains__(self, name: str) -> bool:
        return any(e.name == name for e in self.entries)


def load_catalog(path: str | Path | None = None) -> VariableCatalog:
    """Load the variable catalog from a CSV file (name,category,unit,static).

    With no path, loads the packaged default catalog.
    """
    if path is None:
        text = resources.files("terralens.assets").joinpath("catalog.csv").read_text(encoding="utf-8")
        rows = list(csv.reader(text.splitlines()))
    else:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    if not rows or rows[0] != ["name", "category", "unit", "static"]:
        raise CatalogError("catalog header must be exactly: name,category,unit,static")
    entries = []
    for row in rows[1:]:
        if not row:
            continue
        if len(row) != 4:
            raise CatalogError(f"malformed catalog row: {row!r}")
        name, category, unit, static = row
        if static not in ("true", "false"):
            raise CatalogError(f"static flag for {name!r} must be 'true' or 'false', got {static!r}")
        entries.append(VariableDef(name, category, unit, static == "true"))
    return VariableCatalog(tuple(entries))


def save_catalog(catalog: VariableCatalog, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["name", "category", "unit", "static"])
        for e in catalog.entries:
            writer.writerow([e.name, e.category, e.unit, "true" if e.static else "false"])


@dataclass(frozen=True)
class SampleRecord:
    """One location-year sample: coordinates, year, embedding, and
    environmental values (None = missing)."""

    id: int
    lon: float
    lat: float
    year: int
    embedding: np.ndarray
    env: dict[str, float | None]


def validate_record(record: SampleRecord, catalog: VariableCatalog, bounds: Bounds = CONUS) -> list[str]:
    """Check a record against its invariants; returns a list of violations.

    An empty list means the record is valid. Each violation names the
    offending field and the reason.
    """
    violations: list[str] = []
    if record.id < 0:
        violations.append(f"id out of bounds: {record.id} < 0")
    if not bounds.lon_min <= record.lon <= bounds.lon_max:
        violations.append(f"lon out of bounds: {record.lon}")
    if not bounds.lat_min <= record.lat <= bounds.lat_max:
        violations.append(f"lat out of bounds: {record.lat}")
    if not YEAR_MIN <= record.year <= YEAR_MAX:
        violations.append(f"year out of bounds: {record.year}")
    try:
        as_embedding(record.embedding)
    except ValueError as exc:
        violations.append(f"embedding invalid: {exc}")
    for key, value in record.env.items():
        if key not in catalog:
            violations.append(f"unknown variable: {key!r}")
        elif value is not None and not np.isfinite(value):
            violations.append(f"non-finite value for {key!r}: {value}")
    return violations
