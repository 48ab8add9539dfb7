"""LLM-as-Judge evaluation harness: rotating-role schedules, templated
query generation over random CONUS locations, rubric judging, weighted
scoring, and aggregation."""

from __future__ import annotations

import csv
import json
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from .core import CONUS, YEAR_MAX, YEAR_MIN, Bounds
from .llm import ChatMessage, ChatRequest
from .pipeline import INTENT_NAMES, QueryIntent
from .stats import UndefinedCorrelation, pearson_r

CRITERIA = ("grounding", "accuracy", "completeness", "coherence", "utility")
WEIGHTS = {"grounding": 0.25, "accuracy": 0.25, "completeness": 0.20,
           "coherence": 0.15, "utility": 0.15}

JUDGE_TEMPERATURE = 0.0


class JudgeFailure(RuntimeError):
    """The judge reply could not be parsed even after one re-prompt."""


@dataclass(frozen=True)
class RoleConfig:
    system_model: str
    generator_model: str
    judge_model: str
    queries_per_config: int

    def __post_init__(self) -> None:
        if self.generator_model == self.system_model or self.judge_model == self.system_model:
            raise ValueError("generator and judge must differ from the system model")


def rotation_schedule(models: list[str] | tuple[str, ...], queries_per_config: int = 30) -> list[RoleConfig]:
    """One configuration per (system model, other model) pair, with the
    other model serving as both generator and judge; n models yield
    n*(n-1) configurations (4 models -> 12)."""
    models = list(models)
    if len(models) < 2:
        raise ValueError("need at least 2 distinct models")
    if len(set(models)) != len(models):
        raise ValueError("duplicate model names")
    if queries_per_config < 1:
        raise ValueError("queries_per_config must be >= 1")
    schedule = []
    for system in models:
        for other in models:
            if other == system:
                continue
            schedule.append(RoleConfig(system_model=system, generator_model=other,
                                       judge_model=other, queries_per_config=queries_per_config))
    return schedule


@dataclass(frozen=True)
class GeneratedQuery:
    config_index: int
    cycle_id: int
    text: str
    lon: float
    lat: float
    year: int
    intent: QueryIntent


def load_templates(path: str | Path | None = None) -> dict[str, list[str]]:
    if path is None:
        text = resources.files("terralens.assets").joinpath("templates.json").read_text(encoding="utf-8")
        doc = json.loads(text)
    else:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    for name in INTENT_NAMES:
        if name not in doc or len(doc[name]) < 3:
            raise ValueError(f"template pool for intent {name!r} must have at least 3 entries")
    return doc


def load_rubrics(path: str | Path | None = None) -> dict[str, str]:
    if path is None:
        text = resources.files("terralens.assets").joinpath("rubrics.json").read_text(encoding="utf-8")
        doc = json.loads(text)
    else:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    missing = [c for c in CRITERIA if c not in doc]
    if missing:
        raise ValueError(f"rubrics missing criteria: {missing}")
    return doc


def generate_queries(schedule: list[RoleConfig], bounds: Bounds = CONUS, seed: int = 0,
                     gazetteer=None, templates: dict[str, list[str]] | None = None
                     ) -> list[GeneratedQuery]:
    """Deterministic query list: locations uniform in bounds, intents
    assigned round-robin over the ten categories across the whole run, text
    drawn from the per-intent template pool with seeded variation.

    Locations are embedded in the text as literal "lat, lon" so the
    pipeline resolves exactly the sampled point; the gazetteer parameter is
    accepted for interface completeness but not used for sampling.
    """
    del gazetteer
    if templates is None:
        templates = load_templates()
    rng = np.random.default_rng(seed)
    queries = []
    cycle_id = 0
    intents = list(QueryIntent)
    for config_index, config in enumerate(schedule):
        for _ in range(config.queries_per_config):
            lon = float(rng.uniform(bounds.lon_min, bounds.lon_max))
            lat = float(rng.uniform(bounds.lat_min, bounds.lat_max))
            intent = intents[cycle_id % len(intents)]
            pool = templates[intent.value]
            template = pool[int(rng.integers(0, len(pool)))]
            location = f"{lat:.4f}, {lon:.4f}"
            text = template.format(location=location)
            if rng.random() < 0.5:
                year = int(rng.integers(YEAR_MIN, YEAR_MAX + 1))
                text = (text[:-1] + f" in {year}" + text[-1]) if text[-1] in ".?" else f"{text} in {year}"
            else:
                year = YEAR_MAX
            queries.append(GeneratedQuery(config_index=config_index, cycle_id=cycle_id,
                                          text=text, lon=lon, lat=lat, year=year, intent=intent))
            cycle_id += 1
    return queries


@dataclass(frozen=True)
class JudgmentScores:
    grounding: int
    accuracy: int
    completeness: int
    coherence: int
    utility: int
    weighted: float
    reasoning: str
    clamped: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {"grounding": self.grounding, "accuracy": self.accuracy,
                "completeness": self.completeness, "coherence": self.coherence,
                "utility": self.utility, "weighted": self.weighted,
                "reasoning": self.reasoning, "clamped": list(self.clamped)}


def weighted_score(g: float, a: float, c: float, h: float, u: float) -> float:
    """0.25*G + 0.25*A + 0.20*C + 0.15*H + 0.15*U; arguments must lie in
    [1, 5]."""
    for name, v in zip(CRITERIA, (g, a, c, h, u)):
        if not 1 <= v <= 5:
            raise ValueError(f"{name} score {v} outside [1, 5]")
    return 0.25 * g + 0.25 * a + 0.20 * c + 0.15 * h + 0.15 * u


def _extract_json_object(text: str) -> dict | None:
    try:
        obj = json.loads(text)
        if isinstance(obj, dict):
            return obj
    except ValueError:
        pass
    start = text.find("{")
    end = text.rfind("}")
    if start != -1 and end > start:
        try:
            obj = json.loads(text[start:end + 1])
            if isinstance(obj, dict):
                return obj
        except ValueError:
            return None
    return None


def _scores_from_reply(text: str) -> tuple[dict[str, int], tuple[str, ...], str] | None:
    obj = _extract_json_object(text)
    if obj is None:
        return None
    scores: dict[str, int] = {}
    clamped: list[str] = []
    for crit in CRITERIA:
        if crit not in obj:
            return None
        value = obj[crit]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return None
        iv = int(round(value))
        if iv < 1 or iv > 5:
            clamped.append(f"{crit}: {value} clamped to [1, 5]")
            iv = min(5, max(1, iv))
        scores[crit] = iv
    reasoning = obj.get("reasoning", "")
    if not isinstance(reasoning, str):
        reasoning = str(reasoning)
    return scores, tuple(clamped), reasoning


def judge_prompt(query_text: str, lon: float, lat: float, year: int, intent: QueryIntent,
                 response_text: str, rubrics: dict[str, str]) -> tuple[ChatMessage, ChatMessage]:
    system = (
        "You are an evaluation judge for a land surface intelligence system. "
        "Score the system response on five criteria using the rubrics below. "
        "Reply with a single JSON object with integer scores 1-5: "
        '{"grounding": n, "accuracy": n, "completeness": n, "coherence": n, '
        '"utility": n, "reasoning": "brief justification"}.\n\n'
        + "\n\n".join(rubrics[c] for c in CRITERIA)
    )
    user = (
        f"QUERY: {query_text}\n"
        f"LOCATION: lat={lat:.4f}, lon={lon:.4f}, year={year}, intent={intent.value}\n"
        f"SYSTEM RESPONSE:\n{response_text}"
    )
    return ChatMessage("system", system), ChatMessage("user", user)


def judge_response(backend, judge_model: str, query: GeneratedQuery, response_text: str,
                   rubrics: dict[str, str] | None = None) -> JudgmentScores:
    """Request rubric scores from the judge backend; one re-prompt on parse
    failure, then JudgeFailure."""
    if not response_text:
        raise ValueError("response text must be nonempty")
    if rubrics is None:
        rubrics = load_rubrics()
    sys_msg, user_msg = judge_prompt(query.text, query.lon, query.lat, query.year,
                                     query.intent, response_text, rubrics)
    request = ChatRequest(model=judge_model, messages=(sys_msg, user_msg),
                          temperature=JUDGE_TEMPERATURE)
    reply = backend.complete(request)
    parsed = _scores_from_reply(reply)
    if parsed is None:
        retry_user = ChatMessage(
            "user",
            "Your previous reply could not be parsed. Reply with ONLY the JSON object "
            "described in the instructions.\n\n" + user_msg.content,
        )
        request2 = ChatRequest(model=judge_model, messages=(sys_msg, retry_user),
                               temperature=JUDGE_TEMPERATURE)
        reply = backend.complete(request2)
        parsed = _scores_from_reply(reply)
    if parsed is None:
        raise JudgeFailure(f"judge reply unparseable after retry: {reply[:200]!r}")
    scores, clamped, reasoning = parsed
    weighted = weighted_score(scores["grounding"], scores["accuracy"], scores["completeness"],
                              scores["coherence"], scores["utility"])
    return JudgmentScores(grounding=scores["grounding"], accuracy=scores["accuracy"],
                          completeness=scores["completeness"], coherence=scores["coherence"],
                          utility=scores["utility"], weighted=weighted,
                          reasoning=reasoning, clamped=clamped)


@dataclass(frozen=True)
class EvaluationCycle:
    cycle_id: int
    system_model: str
    generator_model: str
    judge_model: str
    query_text: str
    lon: float
    lat: float
    year: int
    intent: str
    response: str | None
    context_text: str
    scores: JudgmentScores | None
    judge_failed: bool
    started_at: str
    finished_at: str

    def __post_init__(self) -> None:
        if self.intent not in INTENT_NAMES:
            raise ValueError(f"unknown intent {self.intent!r}")
        if not CONUS.contains(self.lon, self.lat):
            raise ValueError(f"cycle location ({self.lon}, {self.lat}) outside CONUS bounds")

    def to_json(self) -> dict:
        return {
            "cycle_id": self.cycle_id,
            "system_model": self.system_model,
            "generator_model": self.generator_model,
            "judge_model": self.judge_model,
            "query_text": self.query_text,
            "lon": self.lon, "lat": self.lat, "year": self.year,
            "intent": self.intent,
            "response": self.response,
            "context_text": self.context_text,
            "scores": self.scores.as_dict() if self.scores else None,
            "judge_failed": self.judge_failed,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }

    @staticmethod
    def from_json(doc: dict) -> "EvaluationCycle":
        raw = doc.get("scores")
        scores = None
        if raw is not None:
            scores = JudgmentScores(grounding=raw["grounding"], accuracy=raw["accuracy"],
                                    completeness=raw["completeness"], coherence=raw["coherence"],
                                    utility=raw["utility"], weighted=raw["weighted"],
                                    reasoning=raw["reasoning"], clamped=tuple(raw.get("clamped", ())))
        return EvaluationCycle(
            cycle_id=doc["cycle_id"], system_model=doc["system_model"],
            generator_model=doc["generator_model"], judge_model=doc["judge_model"],
            query_text=doc["query_text"], lon=doc["lon"], lat=doc["lat"], year=doc["year"],
            intent=doc["intent"], response=doc["response"], context_text=doc["context_text"],
            scores=scores, judge_failed=doc["judge_failed"],
            started_at=doc["started_at"], finished_at=doc["finished_at"],
        )


def write_cycle_log(cycles: list[EvaluationCycle], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in sorted(cycles, key=lambda c: c.cycle_id):
            fh.write(json.dumps(c.to_json(), ensure_ascii=False) + "\n")


def read_cycle_log(path: str | Path) -> list[EvaluationCycle]:
    cycles = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                cycles.append(EvaluationCycle.from_json(json.loads(line)))
    cycles.sort(key=lambda c: c.cycle_id)
    return cycles


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def run_evaluation(schedule: list[RoleConfig], engine_for_system, judge_backend_for,
                   bounds: Bounds = CONUS, seed: int = 0,
                   log_path: str | Path | None = None,
                   rubrics: dict[str, str] | None = None,
                   progress=None) -> list[EvaluationCycle]:
    """Run every cycle of the schedule through the pipeline and judge.

    engine_for_system(model) must return a QueryEngine whose backend is that
    system model; judge_backend_for(model) returns the judge's chat backend.
    Judge parse failures flag the cycle and exclude it from aggregates.
    """
    if rubrics is None:
        rubrics = load_rubrics()
    queries = generate_queries(schedule, bounds=bounds, seed=seed)
    cycles: list[EvaluationCycle] = []
    lock = threading.Lock()
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for q in queries:
            config = schedule[q.config_index]
            started = _now()
            engine = engine_for_system(config.system_model)
            answer = engine.answer_query(q.text, year=q.year)
            response = answer.response
            scores = None
            judge_failed = False
            if response:
                try:
                    scores = judge_response(judge_backend_for(config.judge_model),
                                            config.judge_model, q, response, rubrics)
                except JudgeFailure:
                    judge_failed = True
            else:
                judge_failed = True
            cycle = EvaluationCycle(
                cycle_id=q.cycle_id, system_model=config.system_model,
                generator_model=config.generator_model, judge_model=config.judge_model,
                query_text=q.text, lon=q.lon, lat=q.lat, year=q.year, intent=q.intent.value,
                response=response, context_text=answer.document.render(),
                scores=scores, judge_failed=judge_failed,
                started_at=started, finished_at=_now(),
            )
            with lock:
                cycles.append(cycle)
                if log_fh:
                    log_fh.write(json.dumps(cycle.to_json(), ensure_ascii=False) + "\n")
            if progress and (q.cycle_id + 1) % 50 == 0:
                progress(q.cycle_id + 1, len(queries))
    finally:
        if log_fh:
            log_fh.close()
    return cycles


@dataclass(frozen=True)
class EvaluationReport:
    n_cycles: int
    n_scored: int
    judge_failures: int
    criterion_mean: dict[str, float]
    criterion_std: dict[str, float]
    per_system: dict[str, dict[str, float]]
    per_intent: dict[str, float]
    correlation: np.ndarray          # 6x6 over CRITERIA + weighted
    correlation_labels: tuple[str, ...]


def aggregate_report(cycles: list[EvaluationCycle]) -> EvaluationReport:
    """Aggregate scored cycles: per-criterion mean/std (population), per
    system model and per intent means, and the criteria+weighted Pearson
    correlation matrix."""
    scored = [c for c in cycles if c.scores is not None]
    if not scored:
        raise ValueError("no successfully scored cycles")
    labels = CRITERIA + ("weighted",)
    columns = {
        label: np.array([getattr(c.scores, label) for c in scored], dtype=np.float64)
        for label in labels
    }
    criterion_mean = {k: float(v.mean()) for k, v in columns.items()}
    criterion_std = {k: float(v.std()) for k, v in columns.items()}

    per_system: dict[str, dict[str, float]] = {}
    for c in scored:
        per_system.setdefault(c.system_model, {})
    for model in sorted(per_system):
        rows = [c for c in scored if c.system_model == model]
        per_system[model] = {
            label: float(np.mean([getattr(c.scores, label) for c in rows])) for label in labels
        }

    per_intent: dict[str, float] = {}
    for name in INTENT_NAMES:
        rows = [c for c in scored if c.intent == name]
        if rows:
            per_intent[name] = float(np.mean([c.scores.weighted for c in rows]))

    k = len(labels)
    corr = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            try:
                r = pearson_r(columns[labels[i]], columns[labels[j]])
            except UndefinedCorrelation:
                r = float("nan")
            corr[i, j] = r
            corr[j, i] = r

    return EvaluationReport(
        n_cycles=len(cycles),
        n_scored=len(scored),
        judge_failures=sum(1 for c in cycles if c.judge_failed),
        criterion_mean=criterion_mean,
        criterion_std=criterion_std,
        per_system=per_system,
        per_intent=per_intent,
        correlation=corr,
        correlation_labels=labels,
    )


def report_to_json(report: EvaluationReport) -> dict:
    def _clean(x: float) -> float | None:
        return None if not np.isfinite(x) else x

    return {
        "n_cycles": report.n_cycles,
        "n_scored": report.n_scored,
        "judge_failures": report.judge_failures,
        "criterion_mean": report.criterion_mean,
        "criterion_std": report.criterion_std,
        "per_system": report.per_system,
        "per_intent": report.per_intent,
        "correlation": {
            "labels": list(report.correlation_labels),
            "matrix": [[_clean(float(v)) for v in row] for row in report.correlation],
        },
    }


def save_report(report: EvaluationReport, out_dir: str | Path) -> None:
    """Write report.json plus per-table CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report_to_json(report), fh, indent=2)
        fh.write("\n")
    with open(out / "per_criterion.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["criterion", "mean", "std"])
        for label in report.correlation_labels:
            writer.writerow([label, f"{report.criterion_mean[label]:.6g}",
                             f"{report.criterion_std[label]:.6g}"])
    with open(out / "per_system.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["system_model", *report.correlation_labels])
        for model, row in sorted(report.per_system.items()):
            writer.writerow([model, *(f"{row[label]:.6g}" for label in report.correlation_labels)])
    with open(out / "per_intent.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["intent", "weighted_mean"])
        for name, value in report.per_intent.items():
            writer.writerow([name, f"{value:.6g}"])
    with open(out / "correlations.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["", *report.correlation_labels])
        for label, row in zip(report.correlation_labels, report.correlation):
            writer.writerow([label, *(f"{float(v):.6g}" for v in row)])
