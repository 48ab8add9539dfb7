"""Dimension dictionary: compiles correlation and importance matrices into
per-dimension interpretations used at query time."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DIM_NAMES, EMBEDDING_DIM, VariableCatalog, load_catalog
from .stats import (
    METHOD_EXTERNAL,
    CorrelationMatrix,
    assign_primary,
    concordance,
    load_matrix_csv,
)

SCHEMA_VERSION = 1

#: Interpretability threshold on the primary Spearman strength.
INTERPRETABLE_RHO = 0.5

POLARITY_POSITIVE = "high-value-means-high-variable"
POLARITY_NEGATIVE = "high-value-means-low-variable"

#: Human-readable variable labels used in interpretations and prompts.
VARIABLE_LABELS = {
    "elevation_m": "Elevation",
    "slope_deg": "Slope",
    "aspect_deg": "Aspect",
    "flow_accum_log": "Flow accumulation (log)",
    "clay_frac_pct": "Clay fraction",
    "soil_organic_carbon": "Soil organic carbon",
    "soil_ph": "Soil pH",
    "soil_water_capacity": "Soil water capacity",
    "ndvi_mean": "NDVI (mean)",
    "ndvi_max": "NDVI (max)",
    "evi_mean": "EVI",
    "lai_mean": "LAI",
    "tree_cover_pct": "Tree cover",
    "albedo": "Albedo",
    "lst_day_c": "LST daytime",
    "lst_night_c": "LST nighttime",
    "tmean_c": "Mean air temperature",
    "temp_range_c": "Dew point temperature",
    "precip_annual_mm": "Precipitation",
    "precip_max_month_mm": "Max monthly precipitation",
    "soil_moisture": "Soil moisture",
    "runoff_mm": "Runoff",
    "et_mm": "Evapotranspiration",
    "impervious_pct": "Impervious surface",
    "nightlights": "Nighttime lights",
    "pop_density": "Population density",
}

#: (variable-high phrase, variable-low phrase) per catalog category.
DIRECTION_PHRASES = {
    "terrain": ("higher, more rugged terrain", "lower, flatter terrain"),
    "soil": ("finer, more organic soils", "coarser, less organic soils"),
    "vegetation": ("more vegetated conditions", "less vegetated conditions"),
    "radiation": ("more reflective surface", "less reflective surface"),
    "temperature": ("warmer conditions", "cooler conditions"),
    "climate": ("wetter climate regime", "drier climate regime"),
    "hydrology": ("wetter soils and stronger water cycling", "drier soils and weaker water cycling"),
    "urban": ("more developed land", "less developed land"),
}


@dataclass(frozen=True)
class DimensionEntry:
    """One dimension's interpretive record."""

    dim: int
    spearman_variable: str | None
    spearman_rho: float
    rf_variable: str | None
    rf_importance: float
    external_variable: str | None
    external_importance: float | None
    category: str | None
    interpretable: bool
    two_way: bool
    three_way: bool
    positive: bool
    value_high_cut: float

    @property
    def dim_name(self) -> str:
        return DIM_NAMES[self.dim]


@dataclass(frozen=True)
class Interpretation:
    dim: int
    text: str
    strength: float
    polarity: str


def compile_dictionary(m_spearman: CorrelationMatrix, m_rf: CorrelationMatrix,
                       m_external: CorrelationMatrix | None = None,
                       catalog: VariableCatalog | None = None,
                       embeddings: np.ndarray | None = None) -> tuple[DimensionEntry, ...]:
    """Build the 64-entry dimension dictionary.

    Primary assignments come from assign_primary on each matrix; concordance
    flags match stats.concordance; a dimension is interpretable when its
    primary |rho| exceeds 0.5. When a dataset's embedding matrix is supplied,
    the per-dimension "high value" cutoff (upper tercile of |value|) is
    computed from it; otherwise the cutoff is 0 and every value counts as a
    strong signal.
    """
    if catalog is None:
        catalog = load_catalog()
    a_s = assign_primary(m_spearman, catalog)
    a_rf = assign_primary(m_rf, catalog)
    a_ext = assign_primary(m_external, catalog) if m_external is not None else None
    report = concordance(a_s, a_rf, a_ext, m_spearman, m_rf)

    if embeddings is not None:
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[1] != EMBEDDING_DIM:
            raise ValueError(f"embeddings must be (n, {EMBEDDING_DIM})")
        cuts = np.quantile(np.abs(emb), 2.0 / 3.0, axis=0)
    else:
        cuts = np.zeros(EMBEDDING_DIM)

    entries = []
    for d in range(EMBEDDING_DIM):
        sc = a_s.cells[d]
        rc = a_rf.cells[d]
        ec = a_ext.cells[d] if a_ext is not None else None
        if sc.variable is not None:
            rho = float(m_spearman.rho[d, catalog.index(sc.variable)])
        else:
            rho = float("nan")
        entries.append(DimensionEntry(
            dim=d,
            spearman_variable=sc.variable,
            spearman_rho=rho,
            rf_variable=rc.variable,
            rf_importance=float(rc.score) if rc.variable is not None else float("nan"),
            external_variable=ec.variable if ec is not None else None,
            external_importance=(float(ec.score) if ec is not None and ec.variable is not None else None),
            category=sc.category,
            interpretable=bool(sc.variable is not None and abs(rho) > INTERPRETABLE_RHO),
            two_way=report.entries[d].two_way,
            three_way=report.entries[d].three_way,
            positive=bool(np.isfinite(rho) and rho > 0),
            value_high_cut=float(cuts[d]),
        ))
    return tuple(entries)


def direction_phrase(entry: DimensionEntry, value: float) -> str:
    """Phrase describing what this embedding value implies for the primary
    variable: combines sign(value) with sign(rho)."""
    high_phrase, low_phrase = DIRECTION_PHRASES[entry.category]
    variable_goes_high = (value > 0) == entry.positive
    return high_phrase if variable_goes_high else low_phrase


def interpret_dimension(entry: DimensionEntry, value: float) -> Interpretation | None:
    """Value-specific interpretation line; absent for non-interpretable
    entries."""
    if not entry.interpretable or entry.spearman_variable is None:
        return None
    label = VARIABLE_LABELS.get(entry.spearman_variable, entry.spearman_variable)
    level = "high" if value > 0 else "low"
    text = (f"{entry.dim_name} → {label} (ρ = {entry.spearman_rho:+.2f}): "
            f"{level} value indicates {direction_phrase(entry, value)}")
    return Interpretation(dim=entry.dim, text=text, strength=abs(entry.spearman_rho),
                          polarity=POLARITY_POSITIVE if entry.positive else POLARITY_NEGATIVE)


def import_external_importance(path: str | Path, catalog: VariableCatalog | None = None) -> CorrelationMatrix:
    """Load a 64x26 externally computed importance matrix (e.g. gradient
    importances from a separately trained model) and normalize each variable
    column to sum 1. Wrong shape or headers is a hard error."""
    if catalog is None:
        catalog = load_catalog()
    raw = load_matrix_csv(path, METHOD_EXTERNAL, catalog)
    rho = raw.rho.copy()
    if not np.all(np.isfinite(rho)):
        raise ValueError(f"{path}: external importance matrix has missing cells")
    if rho.min() < 0:
        raise ValueError(f"{path}: external importances must be nonnegative")
    sums = rho.sum(axis=0)
    zero = np.flatnonzero(sums <= 0)
    if zero.size:
        raise ValueError(f"{path}: column {catalog.names[int(zero[0])]!r} sums to zero")
    rho /= sums[None, :]
    return CorrelationMatrix(rho=rho, n_used=raw.n_used, method_tag=METHOD_EXTERNAL,
                             variables=catalog.names)


def dictionary_to_json(entries: tuple[DimensionEntry, ...]) -> dict:
    def _num(x):
        return None if x is None or (isinstance(x, float) and not np.isfinite(x)) else x

    return {
        "schema_version": SCHEMA_VERSION,
        "interpretable_rho": INTERPRETABLE_RHO,
        "entries": [
            {
                "dim": e.dim,
                "name": e.dim_name,
                "spearman": {"variable": e.spearman_variable, "rho": _num(e.spearman_rho)},
                "rf": {"variable": e.rf_variable, "importance": _num(e.rf_importance)},
                "external": ({"variable": e.external_variable, "importance": _num(e.external_importance)}
                             if e.external_variable is not None else None),
                "category": e.category,
                "interpretable": e.interpretable,
                "two_way": e.two_way,
                "three_way": e.three_way,
                "positive": e.positive,
                "value_high_cut": e.value_high_cut,
            }
            for e in entries
        ],
    }


def dictionary_from_json(doc: dict) -> tuple[DimensionEntry, ...]:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported dictionary schema version {doc.get('schema_version')!r}")
    entries = []
    for item in doc["entries"]:
        ext = item.get("external") or {}
        rho = item["spearman"]["rho"]
        rf_imp = item["rf"]["importance"]
        entries.append(DimensionEntry(
            dim=item["dim"],
            spearman_variable=item["spearman"]["variable"],
            spearman_rho=float("nan") if rho is None else float(rho),
            rf_variable=item["rf"]["variable"],
            rf_importance=float("nan") if rf_imp is None else float(rf_imp),
            external_variable=ext.get("variable"),
            external_importance=ext.get("importance"),
            category=item["category"],
            interpretable=item["interpretable"],
            two_way=item["two_way"],
            three_way=item["three_way"],
            positive=item["positive"],
            value_high_cut=item["value_high_cut"],
        ))
    if len(entries) != EMBEDDING_DIM:
        raise ValueError(f"dictionary must have {EMBEDDING_DIM} entries, got {len(entries)}")
    return tuple(entries)


def save_dictionary(entries: tuple[DimensionEntry, ...], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dictionary_to_json(entries), fh, indent=2)
        fh.write("\n")


def load_dictionary(path: str | Path) -> tuple[DimensionEntry, ...]:
    with open(path, encoding="utf-8") as fh:
        return dictionary_from_json(json.load(fh))


def dictionary_markdown(entries: tuple[DimensionEntry, ...]) -> str:
    """Human-readable table of the dictionary."""
    lines = [
        "# Dimension dictionary",
        "",
        "| dim | primary (Spearman) | rho | RF primary | category | interpretable | 2-way | 3-way |",
        "| --- | --- | --- | --- | --- | --- | --- | --- |",
    ]
    for e in entries:
        rho = "" if not np.isfinite(e.spearman_rho) else f"{e.spearman_rho:+.2f}"
        lines.append(
            f"| {e.dim_name} | {e.spearman_variable or '-'} | {rho} | {e.rf_variable or '-'} "
            f"| {e.category or '-'} | {'yes' if e.interpretable else 'no'} "
            f"| {'yes' if e.two_way else 'no'} | {'yes' if e.three_way else 'no'} |"
        )
    lines.append("")
    return "\n".join(lines)
