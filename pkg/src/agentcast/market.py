"""Prediction-market ingestion: fetch binary markets over a close-date
window, filter them with an LLM judge, classify topics, snapshot the crowd
price, and backfill resolutions later.

The wire format follows the public Manifold-style REST API (ids, question
text, closeTime in epoch milliseconds, probability, isResolved/resolution,
before-cursor pagination); a fixture client serves the same shapes from disk
so nothing here needs a network in tests.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from collections import Counter
from dataclasses import dataclass
from datetime import date, datetime
from pathlib import Path
from typing import Callable, Iterable, Protocol

import requests

from .llm import AuthError, Backend, BackendError, ChatRequest, Message
from .models import (
    Category,
    Question,
    ValidationError,
    parse_timestamp,
    read_questions,
    write_questions,
)

logger = logging.getLogger(__name__)

DEFAULT_MARKET_BASE_URL = "https://api.manifold.markets/v0"
DEFAULT_PAGE_SIZE = 500


class MarketError(Exception):
    """Market API failure."""


class MarketSchemaError(MarketError):
    """A market payload was missing required fields."""


@dataclass(frozen=True, eq=False)
class MarketRecord:
    """One binary market as fetched, before curation."""

    market_id: str
    question_text: str
    close_time: datetime
    probability: float
    is_resolved: bool
    resolution: str | None
    raw: dict

    def __post_init__(self):
        if self.is_resolved and self.resolution is None:
            raise MarketSchemaError(f"market {self.market_id}: resolved without a resolution")
        if not 0.0 <= self.probability <= 1.0:
            raise MarketSchemaError(f"market {self.market_id}: probability {self.probability!r} out of range")

    @classmethod
    def from_api(cls, raw: dict) -> "MarketRecord":
        for key in ("id", "question", "closeTime", "probability"):
            if key not in raw:
                raise MarketSchemaError(f"market payload missing {key!r}: {str(raw)[:120]}")
        try:
            close_time = parse_timestamp(raw["closeTime"], "closeTime")
        except ValidationError as exc:
            raise MarketSchemaError(f"market {raw['id']}: {exc}") from None
        return cls(
            market_id=str(raw["id"]),
            question_text=str(raw["question"]),
            close_time=close_time,
            probability=float(raw["probability"]),
            is_resolved=bool(raw.get("isResolved", False)),
            resolution=raw.get("resolution"),
            raw=raw,
        )


class MarketClient(Protocol):
    def list_markets(self, before_id: str | None, limit: int) -> list[dict]: ...

    def get_market(self, market_id: str) -> dict: ...


class LiveMarketClient:
    """Thin REST adapter with simple retry on transient failures."""

    def __init__(
        self,
        base_url: str = DEFAULT_MARKET_BASE_URL,
        *,
        max_attempts: int = 5,
        sleep: Callable[[float], None] = time.sleep,
        timeout: float = 30.0,
    ):
        self._base_url = base_url.rstrip("/")
        self._max_attempts = max_attempts
        self._sleep = sleep
        self._timeout = timeout

    def _get(self, path: str, params: dict | None = None):
        last_error = "no attempts made"
        for attempt in range(self._max_attempts):
            try:
                resp = requests.get(self._base_url + path, params=params, timeout=self._timeout)
            except requests.RequestException as exc:
                last_error = str(exc)
            else:
                if resp.status_code == 200:
                    return resp.json()
                if 400 <= resp.status_code < 500 and resp.status_code != 429:
                    raise MarketError(f"market API rejected {path}: status {resp.status_code}")
                last_error = f"status {resp.status_code}"
            if attempt + 1 < self._max_attempts:
                self._sleep(min(30.0, 2.0**attempt))
        raise MarketError(f"market API failed after {self._max_attempts} attempts: {last_error}")

    def list_markets(self, before_id: str | None, limit: int) -> list[dict]:
        params = {"limit": str(limit)}
        if before_id is not None:
            params["before"] = before_id
        payload = self._get("/markets", params)
        if not isinstance(payload, list):
            raise MarketError(f"expected a market list, got {type(payload).__name__}")
        return payload

    def get_market(self, market_id: str) -> dict:
        payload = self._get(f"/market/{market_id}")
        if not isinstance(payload, dict):
            raise MarketError(f"expected a market object, got {type(payload).__name__}")
        return payload


class FixtureMarketClient:
    """Serves canned market payloads with real cursor pagination semantics.

    Page requests are logged on `.page_requests` as (before_id, limit) so
    tests can assert the cursor sequence.
    """

    def __init__(self, markets: list[dict]):
        self._markets = list(markets)
        self._by_id = {str(m.get("id")): m for m in markets}
        self.page_requests: list[tuple[str | None, int]] = []

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureMarketClient":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        markets = payload["markets"] if isinstance(payload, dict) else payload
        return cls(markets)

    def list_markets(self, before_id: str | None, limit: int) -> list[dict]:
        self.page_requests.append((before_id, limit))
        start = 0
        if before_id is not None:
            ids = [str(m.get("id")) for m in self._markets]
            if before_id not in ids:
                return []
            start = ids.index(before_id) + 1
        return self._markets[start : start + limit]

    def get_market(self, market_id: str) -> dict:
        if market_id not in self._by_id:
            raise MarketError(f"no such market {market_id!r}")
        return self._by_id[market_id]


def fetch_window(
    client: MarketClient,
    from_date: date,
    to_date: date,
    page_size: int = DEFAULT_PAGE_SIZE,
) -> list[MarketRecord]:
    """Fetch every binary market closing inside [from_date, to_date].

    Pages through the whole listing with the before-cursor; malformed payloads
    are skipped with a warning, non-binary markets silently. Duplicates across
    page boundaries are dropped, keeping the first occurrence.
    """
    if from_date > to_date:
        raise ValueError(f"empty window: {from_date} > {to_date}")
    seen: set[str] = set()
    records: list[MarketRecord] = []
    cursor: str | None = None
    while True:
        page = client.list_markets(before_id=cursor, limit=page_size)
        if not page:
            break
        for raw in page:
            if raw.get("outcomeType") != "BINARY":
                continue
            try:
                record = MarketRecord.from_api(raw)
            except MarketSchemaError as exc:
                logger.warning("skipping malformed market: %s", exc)
                continue
            if record.market_id in seen:
                continue
            seen.add(record.market_id)
            if from_date <= record.close_time.date() <= to_date:
                records.append(record)
        if len(page) < page_size:
            break
        cursor = str(page[-1]["id"])
    return records


# --- LLM curation -------------------------------------------------------------


@dataclass(frozen=True)
class FilterVerdict:
    verdict: str  # "keep" | "drop"
    judge_reply: str

    @property
    def keep(self) -> bool:
        return self.verdict == "keep"


FILTER_PROMPT = (
    "You are screening questions for a forecasting study. Answer with exactly "
    "one word, Yes or No. Answer Yes only if both conditions hold:\n"
    "1. The question can be answered with a definite yes or no once it resolves.\n"
    "2. The question is about an external event, not something personal or "
    "self-referential for the people trading on it.\n\n"
    "Question: {question}"
)


def _first_word(text: str) -> str:
    for token in text.replace(",", " ").replace(".", " ").split():
        return token.strip("\"'()[]:;!").casefold()
    return ""


def llm_filter(backend: Backend, question_text: str, *, model_id: str = "default") -> FilterVerdict:
    """Ask the judge whether a market belongs in the dataset.

    Keep iff the reply normalizes to "Yes". An unparsable reply is retried
    once, then dropped with a warning. Backend failures drop the market
    (auth failures propagate; they mean the whole run is misconfigured).
    """
    request = ChatRequest(
        model_id=model_id,
        messages=(Message("user", FILTER_PROMPT.format(question=question_text)),),
    )
    replies = []
    for _ in range(2):
        try:
            reply = backend.complete(request).content
        except AuthError:
            raise
        except BackendError as exc:
            logger.warning("judge backend error for %r: %s", question_text[:60], exc)
            return FilterVerdict("drop", f"[backend error: {exc}]")
        replies.append(reply)
        word = _first_word(reply)
        if word == "yes":
            return FilterVerdict("keep", reply)
        if word == "no":
            return FilterVerdict("drop", reply)
    logger.warning("judge reply unparsable after retry for %r: %r", question_text[:60], replies[-1])
    return FilterVerdict("drop", replies[-1])


CATEGORY_PROMPT = (
    "Assign the following question to exactly one of these categories. "
    "Reply with the category name only.\n\n"
    "Categories:\n{labels}\n\n"
    "Question: {question}"
)


def classify_category(backend: Backend, question_text: str, *, model_id: str = "default") -> Category:
    """Classify a question into one of the fixed topic buckets.

    Replies that are not an exact label (after whitespace/case normalization)
    come back as Unknown, as do backend failures.
    """
    request = ChatRequest(
        model_id=model_id,
        messages=(
            Message(
                "user",
                CATEGORY_PROMPT.format(labels="\n".join(Category.labels()), question=question_text),
            ),
        ),
    )
    try:
        reply = backend.complete(request).content
    except AuthError:
        raise
    except BackendError as exc:
        logger.warning("classifier backend error for %r: %s", question_text[:60], exc)
        return Category.UNKNOWN
    category = Category.from_label(reply.strip())
    if category is Category.UNKNOWN:
        logger.warning("unrecognized category reply %r for %r", reply.strip()[:40], question_text[:60])
    return category


def category_frequencies(questions: Iterable[Question]) -> list[tuple[Category, int]]:
    """Category counts, most frequent first (ties by label)."""
    counts = Counter(q.category for q in questions)
    return sorted(counts.items(), key=lambda item: (-item[1], item[0].value))


def render_category_table(frequencies: list[tuple[Category, int]]) -> str:
    width = max([len("Category")] + [len(c.value) for c, _ in frequencies])
    lines = [f"{'Category'.ljust(width)}  Count"]
    for category, count in frequencies:
        lines.append(f"{category.value.ljust(width)}  {count}")
    return "\n".join(lines) + "\n"


# --- snapshot and resolution ----------------------------------------------------


def snapshot(
    records: Iterable[MarketRecord],
    at: datetime,
    out_path: str | Path,
    *,
    categories: dict[str, Category] | None = None,
    source: str = "market",
) -> list[Question]:
    """Freeze fetched markets into dataset Questions as of one instant.

    The crowd probability is the market price in the record; fetched_at is
    `at` for every question, so the snapshot is honest about when the crowd
    was read.
    """
    categories = categories or {}
    questions = []
    for record in records:
        questions.append(
            Question(
                id=record.market_id,
                title=record.question_text,
                close_time=record.close_time,
                fetched_at=at,
                category=categories.get(record.market_id, Category.UNKNOWN),
                crowd_prob=record.probability,
                source=source,
            )
        )
    write_questions(out_path, questions)
    return questions


@dataclass(frozen=True)
class BackfillSummary:
    resolved: int
    pending: int
    excluded: int


def backfill_resolutions(client: MarketClient, dataset_path: str | Path) -> BackfillSummary:
    """Fill in outcomes for a dataset in place.

    YES -> 1, NO -> 0; anything else a market resolved to (cancelled,
    ambiguous, numeric) marks the question excluded. Unresolved markets stay
    pending and are retried on the next run.
    """
    questions = read_questions(dataset_path)
    updated: list[Question] = []
    resolved = pending = excluded = 0
    for question in questions:
        if question.outcome is not None or question.excluded:
            resolved += question.outcome is not None
            excluded += question.excluded
            updated.append(question)
            continue
        raw = client.get_market(question.id)
        if not raw.get("isResolved", False):
            pending += 1
            updated.append(question)
            continue
        resolution = str(raw.get("resolution", "")).upper()
        if resolution == "YES":
            resolved += 1
            updated.append(dataclasses.replace(question, outcome=1))
        elif resolution == "NO":
            resolved += 1
            updated.append(dataclasses.replace(question, outcome=0))
        else:
            excluded += 1
            logger.warning("market %s resolved %r; excluding from scoring", question.id, resolution)
            updated.append(dataclasses.replace(question, excluded=True))
    write_questions(dataset_path, updated)
    return BackfillSummary(resolved=resolved, pending=pending, excluded=excluded)
