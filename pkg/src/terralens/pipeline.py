"""Location-first query pipeline: resolve a location, fetch the nearest
record, interpret dimensions, classify intent, retrieve similar locations,
and assemble a deterministic context document for the LLM."""

from __future__ import annotations

import csv
import json
import re
import threading
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from importlib import resources
from pathlib import Path

import numpy as np

from .core import CONUS, YEAR_MAX, YEAR_MIN, Bounds, SampleRecord, load_catalog
from .data import Dataset
from .dictionary import VARIABLE_LABELS, DimensionEntry, interpret_dimension
from .llm import ChatMessage, ChatRequest, LlmError, build_system_prompt
from .vindex import GeoGrid, IvfIndex, nearest_geo, search


class ResolutionError(ValueError):
    """A location reference could not be resolved to coordinates."""


class QueryIntent(Enum):
    FLOOD_RISK = "flood_risk"
    DROUGHT_VULNERABILITY = "drought_vulnerability"
    VEGETATION_HEALTH = "vegetation_health"
    AGRICULTURAL_SUITABILITY = "agricultural_suitability"
    CLIMATE_CHARACTERIZATION = "climate_characterization"
    TERRAIN_ANALYSIS = "terrain_analysis"
    HYDROLOGY = "hydrology"
    URBAN_DEVELOPMENT = "urban_development"
    LOCATION_COMPARISON = "location_comparison"
    GENERAL_PROFILE = "general_profile"


INTENT_NAMES = tuple(i.value for i in QueryIntent)

US_STATES = {
    "AL": "alabama", "AZ": "arizona", "AR": "arkansas", "CA": "california",
    "CO": "colorado", "CT": "connecticut", "DE": "delaware", "FL": "florida",
    "GA": "georgia", "ID": "idaho", "IL": "illinois", "IN": "indiana",
    "IA": "iowa", "KS": "kansas", "KY": "kentucky", "LA": "louisiana",
    "ME": "maine", "MD": "maryland", "MA": "massachusetts", "MI": "michigan",
    "MN": "minnesota", "MS": "mississippi", "MO": "missouri", "MT": "montana",
    "NE": "nebraska", "NV": "nevada", "NH": "new hampshire", "NJ": "new jersey",
    "NM": "new mexico", "NY": "new york", "NC": "north carolina", "ND": "north dakota",
    "OH": "ohio", "OK": "oklahoma", "OR": "oregon", "PA": "pennsylvania",
    "RI": "rhode island", "SC": "south carolina", "SD": "south dakota",
    "TN": "tennessee", "TX": "texas", "UT": "utah", "VT": "vermont",
    "VA": "virginia", "WA": "washington", "WV": "west virginia",
    "WI": "wisconsin", "WY": "wyoming",
}

VARIABLE_GLOSS = {
    "elevation_m": "terrain elevation above sea level",
    "slope_deg": "terrain slope steepness",
    "aspect_deg": "downslope facing direction",
    "flow_accum_log": "log upstream drainage accumulation",
    "clay_frac_pct": "soil clay content",
    "soil_organic_carbon": "soil organic carbon content",
    "soil_ph": "soil acidity/alkalinity",
    "soil_water_capacity": "soil water holding capacity",
    "ndvi_mean": "annual mean vegetation greenness",
    "ndvi_max": "peak-season vegetation greenness",
    "evi_mean": "annual mean enhanced vegetation index",
    "lai_mean": "annual mean leaf area index",
    "tree_cover_pct": "tree canopy cover",
    "albedo": "shortwave surface reflectance",
    "lst_day_c": "daytime land surface temperature",
    "lst_night_c": "nighttime land surface temperature",
    "tmean_c": "mean air temperature",
    "temp_range_c": "mean dew point temperature",
    "precip_annual_mm": "annual precipitation total",
    "precip_max_month_mm": "wettest-month precipitation",
    "soil_moisture": "surface volumetric soil moisture",
    "runoff_mm": "annual surface runoff",
    "et_mm": "annual evapotranspiration",
    "impervious_pct": "impervious surface fraction",
    "nightlights": "nighttime light radiance",
    "pop_density": "population density",
}


@dataclass(frozen=True)
class GazetteerRow:
    name: str
    admin: str
    lon: float
    lat: float

    @property
    def display(self) -> str:
        return f"{self.name}, {self.admin}"


def load_gazetteer(path: str | Path | None = None) -> tuple[GazetteerRow, ...]:
    if path is None:
        text = resources.files("terralens.assets").joinpath("gazetteer.csv").read_text(encoding="utf-8")
        rows = list(csv.reader(text.splitlines()))
    else:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    if not rows or rows[0] != ["name", "admin", "lon", "lat"]:
        raise ValueError("gazetteer header must be: name,admin,lon,lat")
    return tuple(GazetteerRow(r[0], r[1], float(r[2]), float(r[3])) for r in rows[1:] if r)


@dataclass(frozen=True)
class IntentSpec:
    intent: QueryIntent
    keywords: tuple[str, ...]
    variables: tuple[str, ...]


@dataclass(frozen=True)
class IntentTaxonomy:
    specs: tuple[IntentSpec, ...]

    def __post_init__(self) -> None:
        names = [s.intent.value for s in self.specs]
        if names != list(INTENT_NAMES):
            raise ValueError("taxonomy must define all ten intents in canonical order")

    def spec_for(self, intent: QueryIntent) -> IntentSpec:
        for s in self.specs:
            if s.intent is intent:
                return s
        raise KeyError(intent)


def load_taxonomy(path: str | Path | None = None) -> IntentTaxonomy:
    if path is None:
        text = resources.files("terralens.assets").joinpath("taxonomy.json").read_text(encoding="utf-8")
        doc = json.loads(text)
    else:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    specs = tuple(
        IntentSpec(intent=QueryIntent(item["name"]), keywords=tuple(item["keywords"]),
                   variables=tuple(item["variables"]))
        for item in doc["intents"]
    )
    return IntentTaxonomy(specs=specs)


@dataclass(frozen=True)
class ResolvedLocation:
    display_name: str
    lon: float
    lat: float
    source: str  # "gazetteer" | "literal-coordinates"
    match_score: float


# literal coordinates must carry decimal points, so year lists such as
# "2019, 2020" never parse as a lat/lon pair
_COORD_RE = re.compile(r"(?<![\d.])(-?\d{1,3}\.\d+)\s*,\s*(-?\d{1,3}\.\d+)(?![\d.])")
_TOKEN_RE = re.compile(r"[a-z]+")


@lru_cache(maxsize=1)
def _default_catalog():
    return load_catalog()


def _tokens(text: str) -> set[str]:
    return set(_TOKEN_RE.findall(text.lower()))


def _row_name_tokens(row: GazetteerRow) -> set[str]:
    return set(_TOKEN_RE.findall(row.name.lower()))


def _row_admin_tokens(row: GazetteerRow) -> set[str]:
    toks = {row.admin.lower()}
    full = US_STATES.get(row.admin.upper())
    if full:
        toks |= set(full.split())
    return toks


def resolve_location(text: str, gazetteer: tuple[GazetteerRow, ...],
                     bounds: Bounds = CONUS) -> ResolvedLocation:
    """Resolve a location reference inside free text.

    Cascade: literal "lat, lon" coordinates, then exact normalized
    "name, admin" substring match, then token-subset match ranked by
    coverage. Out-of-bounds results are rejected; no match raises
    ResolutionError listing the top-3 near misses.
    """
    m = _COORD_RE.search(text)
    if m:
        lat, lon = float(m.group(1)), float(m.group(2))
        if not bounds.contains(lon, lat):
            raise ResolutionError(f"literal coordinates ({lat}, {lon}) are outside the study bounds")
        return ResolvedLocation(display_name=f"{lat:.4f}, {lon:.4f}", lon=lon, lat=lat,
                                source="literal-coordinates", match_score=1.0)

    norm = re.sub(r"\s+", " ", text.lower())

    # exact "name, admin" (or "name, full state") substring
    exact_hits = []
    for i, row in enumerate(gazetteer):
        name = row.name.lower()
        patterns = [f"{name}, {row.admin.lower()}", f"{name} {row.admin.lower()}"]
        full = US_STATES.get(row.admin.upper())
        if full:
            patterns += [f"{name}, {full}", f"{name} {full}"]
        if any(p in norm for p in patterns):
            exact_hits.append((len(name), -i, row))
    if exact_hits:
        exact_hits.sort(reverse=True)  # longest name wins, then gazetteer order
        row = exact_hits[0][2]
        if not bounds.contains(row.lon, row.lat):
            raise ResolutionError(f"{row.display} lies outside the study bounds")
        return ResolvedLocation(display_name=row.display, lon=row.lon, lat=row.lat,
                                source="gazetteer", match_score=1.0)

    # token-subset match: all name tokens must appear; admin tokens add coverage
    query_tokens = _tokens(text)
    best: tuple[float, int, int] | None = None  # (score, n_name_tokens, -index)
    best_row: GazetteerRow | None = None
    for i, row in enumerate(gazetteer):
        name_toks = _row_name_tokens(row)
        if not name_toks or not name_toks <= query_tokens:
            continue
        admin_toks = _row_admin_tokens(row)
        matched_admin = len(admin_toks & query_tokens)
        score = (len(name_toks) + matched_admin) / (len(name_toks) + len(admin_toks))
        key = (score, len(name_toks), -i)
        if best is None or key > best:
            best = key
            best_row = row
    if best_row is not None:
        if not bounds.contains(best_row.lon, best_row.lat):
            raise ResolutionError(f"{best_row.display} lies outside the study bounds")
        return ResolvedLocation(display_name=best_row.display, lon=best_row.lon, lat=best_row.lat,
                                source="gazetteer", match_score=float(best[0]))

    near = sorted(
        gazetteer,
        key=lambda r: -(len(_row_name_tokens(r) & query_tokens) / max(1, len(_row_name_tokens(r)))),
    )[:3]
    raise ResolutionError(
        "could not resolve a location from the query; nearest name matches: "
        + ", ".join(r.display for r in near)
    )


_YEAR_RE = re.compile(r"\d{4}")


def extract_year(text: str) -> tuple[int, str | None]:
    """First standalone 4-digit year in [2017, 2023]; defaults to 2023.

    Returns (year, warning). Digit runs embedded in decimal numbers (e.g.
    coordinates) are not years; a standalone out-of-range 4-digit token
    produces the default year plus a warning.
    """
    saw_out_of_range = None
    for m in _YEAR_RE.finditer(text):
        a, b = m.start(), m.end()
        before = text[a - 1] if a > 0 else ""
        after = text[b] if b < len(text) else ""
        if before.isdigit() or before == ".":
            continue
        if after.isdigit():
            continue
        if after == "." and b + 1 < len(text) and text[b + 1].isdigit():
            continue
        year = int(m.group(0))
        if YEAR_MIN <= year <= YEAR_MAX:
            return year, None
        saw_out_of_range = year
    if saw_out_of_range is not None:
        return YEAR_MAX, f"year {saw_out_of_range} outside [{YEAR_MIN}, {YEAR_MAX}]; using {YEAR_MAX}"
    return YEAR_MAX, None


def classify_intent(text: str, taxonomy: IntentTaxonomy) -> QueryIntent:
    """Intent with the most keyword occurrences (case-insensitive, word
    boundaries); ties break by taxonomy order; zero hits falls back to
    general_profile."""
    lowered = text.lower()
    best_intent = QueryIntent.GENERAL_PROFILE
    best_hits = 0
    for spec in taxonomy.specs:
        hits = 0
        for kw in spec.keywords:
            hits += len(re.findall(rf"\b{re.escape(kw)}\b", lowered))
        if hits > best_hits:
            best_hits = hits
            best_intent = spec.intent
    return best_intent


def fmt_value(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.4g}"


@dataclass(frozen=True)
class SimilarRow:
    rank: int
    id: int
    lon: float
    lat: float
    year: int
    distance: float
    headline: tuple[tuple[str, float | None], tuple[str, float | None]]


@dataclass(frozen=True)
class DimensionLine:
    dim_name: str
    value: float
    text: str
    weak_signal: bool


@dataclass(frozen=True)
class ContextDocument:
    """Structured retrieval context. Every number it renders comes from a
    typed field copied out of retrieved data; the renderer adds no free-form
    numerics."""

    location_name: str
    location_lon: float
    location_lat: float
    location_source: str
    record_id: int
    record_lon: float
    record_lat: float
    record_year: int
    intent: QueryIntent
    variables: tuple[tuple[str, float | None, str, str], ...]  # (name, value, unit, gloss)
    dimensions: tuple[DimensionLine, ...]
    synthesis: str
    similar: tuple[SimilarRow, ...]
    similar_unavailable: bool = False

    def render(self) -> str:
        lines = ["LOCATION"]
        lines.append(f"  name: {self.location_name}")
        lines.append(f"  query_lon: {self.location_lon:.4f}")
        lines.append(f"  query_lat: {self.location_lat:.4f}")
        lines.append(f"  source: {self.location_source}")
        lines.append(f"  record_id: {self.record_id}")
        lines.append(f"  record_lon: {self.record_lon:.4f}")
        lines.append(f"  record_lat: {self.record_lat:.4f}")
        lines.append(f"  year: {self.record_year}")
        lines.append(f"  intent: {self.intent.value}")
        lines.append("VARIABLES")
        for name, value, unit, gloss in self.variables:
            lines.append(f"  {name} = {fmt_value(value)} {unit} | {gloss}")
        lines.append("DIMENSIONS")
        for d in self.dimensions:
            tag = " (weak signal)" if d.weak_signal else ""
            lines.append(f"  {d.text} [value={d.value:+.4f}]{tag}")
        lines.append("SYNTHESIS")
        lines.append(f"  {self.synthesis}")
        lines.append("SIMILAR")
        if self.similar_unavailable:
            lines.append("  unavailable")
        else:
            for s in self.similar:
                (n1, v1), (n2, v2) = s.headline
                lines.append(
                    f"  {s.rank}. lon={s.lon:.4f} lat={s.lat:.4f} year={s.year} "
                    f"distance={s.distance:.6g} {n1}={fmt_value(v1)} {n2}={fmt_value(v2)}"
                )
        return "\n".join(lines) + "\n"


_SYNTHESIS_LEADS = {
    QueryIntent.FLOOD_RISK: "Flood exposure signals",
    QueryIntent.DROUGHT_VULNERABILITY: "Drought exposure signals",
    QueryIntent.VEGETATION_HEALTH: "Vegetation condition signals",
    QueryIntent.AGRICULTURAL_SUITABILITY: "Agricultural suitability signals",
    QueryIntent.CLIMATE_CHARACTERIZATION: "Climate regime signals",
    QueryIntent.TERRAIN_ANALYSIS: "Terrain signals",
    QueryIntent.HYDROLOGY: "Hydrological signals",
    QueryIntent.URBAN_DEVELOPMENT: "Urban development signals",
    QueryIntent.LOCATION_COMPARISON: "Comparison baseline",
    QueryIntent.GENERAL_PROFILE: "Environmental profile",
}


def build_context(record: SampleRecord, entries: tuple[DimensionEntry, ...],
                  intent: QueryIntent, similar: tuple[SimilarRow, ...],
                  taxonomy: IntentTaxonomy, resolved: ResolvedLocation,
                  m: int = 8) -> ContextDocument:
    """Assemble the context document.

    Variables are ordered by the intent's priority list and then catalog
    order; dimensions are the top-m interpretable dimensions ranked by
    absolute embedding value, tagged "weak signal" below the dimension's
    stored tercile cutoff. Deterministic for fixed inputs.
    """
    spec = taxonomy.spec_for(intent)
    priority = [v for v in spec.variables if v in record.env]
    ordered_names = priority + [v for v in record.env if v not in priority]

    variables = []
    catalog = _default_catalog()
    for name in ordered_names:
        unit = catalog.get(name).unit if name in catalog else ""
        variables.append((name, record.env.get(name), unit, VARIABLE_GLOSS.get(name, "")))

    interpretable = [e for e in entries if e.interpretable]
    ranked = sorted(interpretable, key=lambda e: (-abs(float(record.embedding[e.dim])), e.dim))
    dims = []
    for e in ranked[:m]:
        value = float(record.embedding[e.dim])
        interp = interpret_dimension(e, value)
        if interp is None:
            continue
        dims.append(DimensionLine(dim_name=e.dim_name, value=value, text=interp.text,
                                  weak_signal=abs(value) < e.value_high_cut))

    lead = _SYNTHESIS_LEADS[intent]
    frags = []
    for name in priority[:4]:
        value = record.env.get(name)
        frags.append(f"{VARIABLE_LABELS.get(name, name)} {fmt_value(value)} {catalog.get(name).unit}".rstrip())
    strong = [d.dim_name for d in dims if not d.weak_signal]
    dim_note = ("strong embedding signals on " + ", ".join(strong)) if strong \
        else "no embedding dimension above its strong-signal cutoff"
    synthesis = (f"{lead} for {resolved.display_name} in {record.year}: "
                 + "; ".join(frags) + f". Dimension evidence: {dim_note}.")

    return ContextDocument(
        location_name=resolved.display_name,
        location_lon=resolved.lon,
        location_lat=resolved.lat,
        location_source=resolved.source,
        record_id=record.id,
        record_lon=record.lon,
        record_lat=record.lat,
        record_year=record.year,
        intent=intent,
        variables=tuple(variables),
        dimensions=tuple(dims),
        synthesis=synthesis,
        similar=similar,
        similar_unavailable=not similar,
    )


@dataclass(frozen=True)
class QueryAnswer:
    document: ContextDocument
    response: str | None
    error: str | None
    intent: QueryIntent
    location: ResolvedLocation
    year_used: int
    year_warning: str | None = None


class QueryEngine:
    """Stateless query answering over immutable components; safe for
    concurrent use."""

    def __init__(self, dataset: Dataset, entries: tuple[DimensionEntry, ...],
                 index: IvfIndex, backend, model: str = "default",
                 gazetteer: tuple[GazetteerRow, ...] | None = None,
                 taxonomy: IntentTaxonomy | None = None,
                 bounds: Bounds = CONUS, k: int = 10, m_dims: int = 8,
                 nprobe: int | None = None, temperature: float = 0.2) -> None:
        self.dataset = dataset
        self.entries = entries
        self.index = index
        self.backend = backend
        self.model = model
        self.gazetteer = gazetteer if gazetteer is not None else load_gazetteer()
        self.taxonomy = taxonomy if taxonomy is not None else load_taxonomy()
        self.bounds = bounds
        self.k = k
        self.m_dims = m_dims
        self.nprobe = nprobe
        self.temperature = temperature
        self.system_prompt = build_system_prompt(entries)
        self._grids: dict[int, GeoGrid] = {}
        for year in dataset.years_present:
            rows = np.flatnonzero(dataset.year == year)
            self._grids[year] = GeoGrid(dataset.lon[rows], dataset.lat[rows], dataset.ids[rows])

    def _grid_for(self, year: int) -> tuple[int, GeoGrid]:
        if year in self._grids:
            return year, self._grids[year]
        candidates = [y for y in sorted(self._grids) if y <= year]
        chosen = candidates[-1] if candidates else sorted(self._grids)[-1]
        return chosen, self._grids[chosen]

    def _similar_rows(self, record: SampleRecord, intent: QueryIntent) -> tuple[SimilarRow, ...]:
        result = search(self.index, record.embedding, self.k + 1, nprobe=self.nprobe)
        spec = self.taxonomy.spec_for(intent)
        headline_names = (spec.variables + ("elevation_m", "tmean_c"))[:2]
        rows = []
        rank = 0
        for rid, dist in result.pairs():
            if rid == record.id:
                continue
            if rank >= self.k:
                break
            rank += 1
            row = self.dataset.row_for_id(rid)
            rec = self.dataset.record(row)
            headline = tuple((n, rec.env.get(n)) for n in headline_names)
            rows.append(SimilarRow(rank=rank, id=rid, lon=rec.lon, lat=rec.lat, year=rec.year,
                                   distance=dist, headline=headline))
        return tuple(rows)

    def answer_query(self, text: str, year: int | None = None) -> QueryAnswer:
        """Run the five pipeline stages and one LLM call.

        Resolution failures propagate as ResolutionError; backend failures
        still return the context document with a structured error string.
        """
        resolved = resolve_location(text, self.gazetteer, self.bounds)
        if year is None:
            year, year_warning = extract_year(text)
        else:
            year_warning = None
        year_used, grid = self._grid_for(year)
        rid = nearest_geo(grid, resolved.lon, resolved.lat)
        record = self.dataset.record(self.dataset.row_for_id(rid))
        intent = classify_intent(text, self.taxonomy)
        similar = self._similar_rows(record, intent)
        document = build_context(record, self.entries, intent, similar,
                                 self.taxonomy, resolved, m=self.m_dims)
        request = ChatRequest(
            model=self.model,
            messages=(
                ChatMessage("system", self.system_prompt),
                ChatMessage("user", document.render() + "\nUser query: " + text),
            ),
            temperature=self.temperature,
        )
        response: str | None = None
        error: str | None = None
        try:
            response = self.backend.complete(request)
        except LlmError as exc:
            error = f"{type(exc).__name__}: {exc}"
        return QueryAnswer(document=document, response=response, error=error, intent=intent,
                           location=resolved, year_used=record.year, year_warning=year_warning)


class _QueryHandler(BaseHTTPRequestHandler):
    engine: QueryEngine = None  # type: ignore[assignment]

    def log_message(self, fmt, *args):  # silence default stderr chatter
        pass

    def _reply(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self) -> None:  # noqa: N802 (http.server API)
        if self.path != "/query":
            self._reply(404, {"error": f"unknown path {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            doc = json.loads(self.rfile.read(length).decode("utf-8"))
            text = doc["text"]
            year = doc.get("year")
        except (ValueError, KeyError) as exc:
            self._reply(400, {"error": f"bad request body: {exc}"})
            return
        try:
            answer = self.engine.answer_query(text, year=year)
        except ResolutionError as exc:
            self._reply(404, {"error": str(exc)})
            return
        payload = {
            "context": answer.document.render(),
            "answer": answer.response,
            "intent": answer.intent.value,
            "location": {
                "name": answer.location.display_name,
                "lon": answer.location.lon,
                "lat": answer.location.lat,
            },
            "year": answer.year_used,
        }
        if answer.error:
            payload["error"] = answer.error
        self._reply(200, payload)


def make_http_server(engine: QueryEngine, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """HTTP server exposing POST /query; port 0 binds an ephemeral port."""
    handler = type("BoundQueryHandler", (_QueryHandler,), {"engine": engine})
    return ThreadingHTTPServer((host, port), handler)


def serve_forever_in_thread(server: ThreadingHTTPServer) -> threading.Thread:
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return thread
