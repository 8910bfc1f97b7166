"""Core domain types: questions, forecasts, transcripts, and their JSONL forms.

Everything downstream (agents, scoring, the CLI) moves data through the types
in this module. Serialization is line-delimited JSON with UTC timestamps at
seconds precision, chosen so that re-encoding a parsed file reproduces it
byte for byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator


class ValidationError(ValueError):
    """A record violated a domain invariant. Always names the offending field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name


class Category(Enum):
    """Topic buckets for curated questions."""

    ECONOMICS_BUSINESS = "Economics & Business"
    POLITICS_GOVERNANCE = "Politics & Governance"
    SCIENCE_TECH = "Science & Tech"
    ARTS_RECREATION = "Arts & Recreation"
    SPORTS = "Sports"
    SECURITY_DEFENSE = "Security & Defense"
    HEALTHCARE_BIOLOGY = "Healthcare & Biology"
    ENVIRONMENT_ENERGY = "Environment & Energy"
    SOCIAL_SCIENCES = "Social Sciences"
    UNKNOWN = "Unknown"

    @classmethod
    def labels(cls) -> tuple[str, ...]:
        """All assignable labels, excluding the Unknown fallback."""
        return tuple(c.value for c in cls if c is not cls.UNKNOWN)

    @classmethod
    def from_label(cls, label: str) -> "Category":
        """Map a label to a Category; anything unrecognized becomes UNKNOWN."""
        normalized = " ".join(str(label).split()).lower().replace(" and ", " & ")
        for member in cls:
            if member.value.lower() == normalized:
                return member
        return cls.UNKNOWN


# --- timestamps ---------------------------------------------------------

_EPOCH_MS_THRESHOLD = 100_000_000_000  # epoch values above this are milliseconds


def parse_timestamp(value: Any, field_name: str = "timestamp") -> datetime:
    """Parse an ISO-8601 string or epoch number into a UTC datetime.

    Fractional seconds are truncated; epoch values large enough to be
    milliseconds are divided down. Raises ValidationError on anything else.
    """
    if isinstance(value, datetime):
        return normalize_timestamp(value)
    if isinstance(value, bool):
        raise ValidationError(field_name, f"malformed timestamp {value!r}")
    if isinstance(value, (int, float)):
        if not math.isfinite(value):
            raise ValidationError(field_name, f"malformed timestamp {value!r}")
        seconds = value / 1000.0 if abs(value) >= _EPOCH_MS_THRESHOLD else value
        return datetime.fromtimestamp(int(seconds), tz=timezone.utc)
    if isinstance(value, str):
        text = value.strip()
        if text.endswith("Z"):
            text = text[:-1] + "+00:00"
        try:
            parsed = datetime.fromisoformat(text)
        except ValueError:
            raise ValidationError(field_name, f"malformed timestamp {value!r}") from None
        return normalize_timestamp(parsed)
    raise ValidationError(field_name, f"malformed timestamp {value!r}")


def normalize_timestamp(dt: datetime) -> datetime:
    """Coerce to UTC and drop sub-second precision. Naive datetimes are read as UTC."""
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc).replace(microsecond=0)


def format_timestamp(dt: datetime) -> str:
    return normalize_timestamp(dt).strftime("%Y-%m-%dT%H:%M:%SZ")


def utc_now() -> datetime:
    return normalize_timestamp(datetime.now(timezone.utc))


# --- forecasts ----------------------------------------------------------


@dataclass(frozen=True)
class Forecast:
    """A probability that the question resolves YES, in [0, 1]."""

    value: float

    def __post_init__(self):
        v = self.value
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValidationError("value", f"forecast must be a number, got {v!r}")
        if not math.isfinite(v) or not 0.0 <= v <= 1.0:
            raise ValidationError("value", f"forecast must lie in [0, 1], got {v!r}")
        object.__setattr__(self, "value", float(v))


@dataclass(frozen=True)
class Declined:
    """The agent produced no usable probability. Distinct from any forecast value."""

    reason: str = ""


# --- questions ----------------------------------------------------------


@dataclass(frozen=True)
class Question:
    """One binary question, as curated from a prediction market.

    crowd_prob is the market price at fetch time; outcome is filled in by the
    resolve step (1 = YES, 0 = NO) and stays absent until then. excluded marks
    markets that resolved to something other than YES/NO.
    """

    id: str
    title: str
    close_time: datetime
    fetched_at: datetime
    background: str | None = None
    resolution_criteria: str | None = None
    category: Category = Category.UNKNOWN
    crowd_prob: float | None = None
    outcome: int | None = None
    source: str = ""
    excluded: bool = False

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id.strip():
            raise ValidationError("id", "missing or empty question id")
        if not isinstance(self.title, str) or not self.title.strip():
            raise ValidationError("title", "missing or empty title")
        for name in ("close_time", "fetched_at"):
            value = getattr(self, name)
            if not isinstance(value, datetime):
                raise ValidationError(name, f"expected a datetime, got {value!r}")
            object.__setattr__(self, name, normalize_timestamp(value))
        if self.fetched_at > self.close_time:
            raise ValidationError(
                "fetched_at",
                f"fetched_at {format_timestamp(self.fetched_at)} is after "
                f"close_time {format_timestamp(self.close_time)}",
            )
        if not isinstance(self.category, Category):
            raise ValidationError("category", f"expected a Category, got {self.category!r}")
        if self.crowd_prob is not None:
            p = self.crowd_prob
            if isinstance(p, bool) or not isinstance(p, (int, float)):
                raise ValidationError("crowd_prob", f"expected a number, got {p!r}")
            if not math.isfinite(p) or not 0.0 <= p <= 1.0:
                raise ValidationError("crowd_prob", f"out of range [0, 1]: {p!r}")
            object.__setattr__(self, "crowd_prob", float(p))
        if self.outcome is not None:
            o = self.outcome
            if isinstance(o, bool) or o not in (0, 1, 0.0, 1.0):
                raise ValidationError("outcome", f"outcome must be 0 or 1, got {o!r}")
            object.__setattr__(self, "outcome", int(o))

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"id": self.id, "title": self.title}
        if self.background is not None:
            d["background"] = self.background
        if self.resolution_criteria is not None:
            d["resolution_criteria"] = self.resolution_criteria
        d["close_time"] = format_timestamp(self.close_time)
        d["category"] = self.category.value
        if self.crowd_prob is not None:
            d["crowd_prob"] = self.crowd_prob
        if self.outcome is not None:
            d["outcome"] = self.outcome
        if self.source:
            d["source"] = self.source
        d["fetched_at"] = format_timestamp(self.fetched_at)
        if self.excluded:
            d["excluded"] = True
        return d


def validate_question(raw: dict) -> Question:
    """Build a Question from a raw dict, raising ValidationError on bad fields."""
    if not isinstance(raw, dict):
        raise ValidationError("record", f"expected an object, got {type(raw).__name__}")
    if "id" not in raw:
        raise ValidationError("id", "missing question id")
    if "title" not in raw:
        raise ValidationError("title", "missing title")
    if "close_time" not in raw:
        raise ValidationError("close_time", "missing close_time")
    close_time = parse_timestamp(raw["close_time"], "close_time")
    fetched_raw = raw.get("fetched_at")
    fetched_at = close_time if fetched_raw is None else parse_timestamp(fetched_raw, "fetched_at")
    category = raw.get("category")
    return Question(
        id=raw["id"],
        title=raw["title"],
        close_time=close_time,
        fetched_at=fetched_at,
        background=raw.get("background"),
        resolution_criteria=raw.get("resolution_criteria"),
        category=Category.from_label(category) if category is not None else Category.UNKNOWN,
        crowd_prob=raw.get("crowd_prob"),
        outcome=raw.get("outcome"),
        source=raw.get("source", ""),
        excluded=bool(raw.get("excluded", False)),
    )


# --- transcripts --------------------------------------------------------


@dataclass(frozen=True)
class AgentStep:
    """One emission/observation pair. Malformed emissions keep the raw text in
    `thought` with an empty action; well-formed tool calls fill all four."""

    thought: str
    action: str
    action_input: str
    observation: str


FINAL_KINDS = ("final", "truncated", "truncated_finalized")


@dataclass(frozen=True)
class FinalState:
    """How a run ended: a clean final answer, a forced finalization after the
    iteration cap, or a truncation with no answer at all."""

    kind: str
    answer_text: str = ""

    def __post_init__(self):
        if self.kind not in FINAL_KINDS:
            raise ValidationError("kind", f"unknown final kind {self.kind!r}")


@dataclass(frozen=True)
class Transcript:
    agent_id: str
    steps: tuple[AgentStep, ...]
    final: FinalState

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))


# --- forecast records ---------------------------------------------------

AGGREGATORS = ("mean", "median", "sampled")


@dataclass(frozen=True)
class MemberForecast:
    """One ensemble member's output plus a pointer to its saved transcript."""

    member_index: int
    forecast: Forecast | Declined
    transcript_ref: str = ""

    def __post_init__(self):
        if not isinstance(self.forecast, (Forecast, Declined)):
            raise ValidationError("forecast", f"expected Forecast or Declined, got {self.forecast!r}")


@dataclass(frozen=True)
class ForecastRecord:
    """Aggregated output of one ensemble run over one question.

    declined is true iff any member declined; in that case there is no
    aggregate and the question is excluded from scoring everywhere.
    """

    question_id: str
    members: tuple[MemberForecast, ...]
    aggregator: str
    aggregate: Forecast | None = None

    def __post_init__(self):
        if not isinstance(self.question_id, str) or not self.question_id.strip():
            raise ValidationError("question_id", "missing question_id")
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise ValidationError("members", "ensemble has no members")
        if self.aggregator not in AGGREGATORS:
            raise ValidationError("aggregator", f"unknown aggregator {self.aggregator!r}")
        if self.declined:
            if self.aggregate is not None:
                raise ValidationError("aggregate", "declined record cannot carry an aggregate")
        else:
            if self.aggregate is None:
                raise ValidationError("aggregate", "missing aggregate for a completed ensemble")
            values = [m.forecast.value for m in self.members if isinstance(m.forecast, Forecast)]
            lo, hi = min(values), max(values)
            if not lo <= self.aggregate.value <= hi:
                raise ValidationError(
                    "aggregate",
                    f"aggregate {self.aggregate.value!r} outside member range [{lo!r}, {hi!r}]",
                )

    @property
    def declined(self) -> bool:
        return any(isinstance(m.forecast, Declined) for m in self.members)

    def to_dict(self) -> dict:
        members = []
        for m in self.members:
            entry: dict[str, Any] = {"member_index": m.member_index}
            if isinstance(m.forecast, Forecast):
                entry["forecast"] = m.forecast.value
            else:
                entry["declined"] = True
                if m.forecast.reason:
                    entry["reason"] = m.forecast.reason
            if m.transcript_ref:
                entry["transcript_ref"] = m.transcript_ref
            members.append(entry)
        d: dict[str, Any] = {
            "question_id": self.question_id,
            "aggregator": self.aggregator,
            "members": members,
            "declined": self.declined,
        }
        if self.aggregate is not None:
            d["aggregate"] = self.aggregate.value
        return d


def validate_record(raw: dict) -> ForecastRecord:
    """Build a ForecastRecord from a raw dict, raising ValidationError on bad fields."""
    if not isinstance(raw, dict):
        raise ValidationError("record", f"expected an object, got {type(raw).__name__}")
    if "question_id" not in raw:
        raise ValidationError("question_id", "missing question_id")
    members_raw = raw.get("members")
    if not isinstance(members_raw, list):
        raise ValidationError("members", "missing members list")
    members = []
    for entry in members_raw:
        if not isinstance(entry, dict) or "member_index" not in entry:
            raise ValidationError("members", f"malformed member entry {entry!r}")
        if entry.get("declined"):
            fc: Forecast | Declined = Declined(entry.get("reason", ""))
        elif "forecast" in entry:
            fc = Forecast(entry["forecast"])
        else:
            raise ValidationError("members", f"member entry has neither forecast nor declined: {entry!r}")
        members.append(
            MemberForecast(
                member_index=entry["member_index"],
                forecast=fc,
                transcript_ref=entry.get("transcript_ref", ""),
            )
        )
    aggregate = raw.get("aggregate")
    return ForecastRecord(
        question_id=raw["question_id"],
        members=tuple(members),
        aggregator=raw.get("aggregator", "median"),
        aggregate=Forecast(aggregate) if aggregate is not None else None,
    )


# --- JSONL IO -----------------------------------------------------------


def dump_json_line(d: dict) -> str:
    return json.dumps(d, ensure_ascii=False)


def write_jsonl(path: str | Path, dicts: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for d in dicts:
            fh.write(dump_json_line(d) + "\n")


def read_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    """Yield (line_number, parsed_object) pairs; blank lines are skipped.

    Malformed JSON raises ValidationError naming the file and line.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError("line", f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


def write_questions(path: str | Path, questions: Iterable[Question]) -> None:
    write_jsonl(path, (q.to_dict() for q in questions))


def read_questions(path: str | Path) -> list[Question]:
    questions = []
    for lineno, raw in read_jsonl(path):
        try:
            questions.append(validate_question(raw))
        except ValidationError as exc:
            raise ValidationError(exc.field_name, f"{Path(path)}:{lineno}: {exc}") from None
    return questions


def write_records(path: str | Path, records: Iterable[ForecastRecord]) -> None:
    write_jsonl(path, (r.to_dict() for r in records))


def read_records(path: str | Path) -> list[ForecastRecord]:
    records = []
    for lineno, raw in read_jsonl(path):
        try:
            records.append(validate_record(raw))
        except ValidationError as exc:
            raise ValidationError(exc.field_name, f"{Path(path)}:{lineno}: {exc}") from None
    return records
