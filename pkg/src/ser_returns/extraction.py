"""Prompting a chat-completion model for event triplets, with parse/validate/retry."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import httpx

from .events import EventTriplet, is_valid_url, tokenize

log = logging.getLogger(__name__)

REQUIRED_KEYS = ("subject", "action", "object", "context")
LINK_KEYS = ("subject_link", "object_link")
DEFAULT_MAX_ATTEMPTS = 3


class ParseError(ValueError):
    pass


class SchemaError(ParseError):
    def __init__(self, index: int, key: str, message: str = ""):
        self.index = index
        self.key = key
        super().__init__(message or f"event {index}: bad or missing {key!r}")


class ProviderError(RuntimeError):
    """Transport or protocol failure talking to the completion endpoint."""


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    user_text: str
    few_shot_examples: tuple[tuple[str, str], ...] = ()
    article: str = ""
    date: str = ""


@dataclass(frozen=True)
class Diagnostic:
    index: int
    code: str
    message: str
    fatal: bool = True


@dataclass
class ExtractionOutcome:
    status: str  # "ok" or "discarded"
    events: list[EventTriplet] = field(default_factory=list)
    attempts: int = 0
    diagnostics: list[Diagnostic | str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _data(name: str) -> str:
    return resources.files("ser_returns").joinpath(f"data/{name}").read_text(encoding="utf-8")


@lru_cache(maxsize=1)
def default_examples() -> tuple[tuple[str, str], ...]:
    ex = json.loads(_data("example.json"))
    return ((f"{ex['date']}, {ex['article']}", json.dumps(ex["events"], indent=2, ensure_ascii=False)),)


def _format_examples(examples: Sequence[tuple[str, str]]) -> str:
    return "\n\n".join(f"INPUT: {inp}\n\nOUTPUT:\n{out}" for inp, out in examples)


def render_prompt(article: str, when: date | str, examples: Sequence[tuple[str, str]] | None = None) -> PromptBundle:
    """Build system and user messages for one article.

    ``examples`` defaults to the shipped worked example; pass ``[]`` for a
    zero-shot prompt.
    """
    if not article or not article.strip():
        raise ValueError("article is empty")
    examples = default_examples() if examples is None else tuple(tuple(e) for e in examples)
    day = when.isoformat() if isinstance(when, date) else str(when)
    system = _data("prompt_system.txt").rstrip("\n")
    if examples:
        user = _data("prompt_user.txt").rstrip("\n")
        user = user.replace("{examples}", _format_examples(examples))
    else:
        user = _data("prompt_user_noexamples.txt").rstrip("\n")
    user = user.replace("{date}", day).replace("{article}", article.strip())
    return PromptBundle(system, user, examples, article, day)


# ------------------------------------------------------------------ parsing

_FENCE = re.compile(r"```[a-zA-Z]*\s*\n?(.*?)```", re.S)


def _strip_trailing_commas(text: str) -> str:
    out = []
    in_str = escaped = False
    for i, ch in enumerate(text):
        if in_str:
            out.append(ch)
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"':
            in_str = True
        elif ch == ",":
            rest = text[i + 1 :].lstrip()
            if rest[:1] in ("]", "}"):
                continue
        out.append(ch)
    return "".join(out)


def parse_events(raw_completion: str) -> list[EventTriplet]:
    """Parse a completion holding a JSON array of event objects.

    A surrounding markdown code fence and trailing commas are tolerated.
    """
    text = raw_completion.strip()
    fenced = _FENCE.search(text)
    if fenced:
        text = fenced.group(1).strip()
    text = _strip_trailing_commas(text)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"completion is not valid JSON: {exc}") from None
    if isinstance(data, dict) and isinstance(data.get("events"), list):
        data = data["events"]
    if not isinstance(data, list):
        raise ParseError("expected a JSON array of events")
    events = []
    for i, item in enumerate(data):
        if not isinstance(item, dict):
            raise SchemaError(i, "<event>", f"event {i} is not an object")
        for key in REQUIRED_KEYS:
            value = item.get(key)
            if not isinstance(value, str) or not value.strip():
                raise SchemaError(i, key)
        for key in LINK_KEYS:
            value = item.get(key)
            if value is not None and not isinstance(value, str):
                raise SchemaError(i, key)
        events.append(EventTriplet.from_dict(item))
    return events


def serialize_events(events: Sequence[EventTriplet]) -> str:
    return json.dumps([e.to_dict() for e in events], ensure_ascii=False, indent=2)


def validate_events(
    events: Sequence[EventTriplet],
    article: str,
    min_context: int = 3,
    max_context: int = 2000,
) -> list[Diagnostic]:
    """Structural checks; an empty list means the events pass.

    A context sharing no token with the article is reported as a non-fatal
    ``context-mismatch``.
    """
    diags = []
    article_tokens = set(tokenize(article))
    for i, ev in enumerate(events):
        for key in REQUIRED_KEYS:
            if not getattr(ev, key, "").strip():
                diags.append(Diagnostic(i, "empty-field", f"event {i}: {key} is blank"))
        n = len(ev.context.strip())
        if ev.context.strip() and not min_context <= n <= max_context:
            diags.append(Diagnostic(i, "context-length", f"event {i}: context has {n} characters"))
        for key in LINK_KEYS:
            link = getattr(ev, key)
            if link and not is_valid_url(link):
                diags.append(Diagnostic(i, "bad-link", f"event {i}: {key} {link!r} is not a URL"))
        if ev.context.strip() and not article_tokens & set(tokenize(ev.context)):
            diags.append(Diagnostic(i, "context-mismatch", f"event {i}: context shares no words with article", fatal=False))
    return diags


# ---------------------------------------------------------------- providers

Provider = Callable[[PromptBundle], str]


def article_key(article: str) -> str:
    return hashlib.sha256(article.encode("utf-8")).hexdigest()


class ChatCompletionProvider:
    """POSTs OpenAI-style chat-completion requests."""

    def __init__(self, url: str, model: str, temperature: float = 0.0, timeout: float = 60.0,
                 api_key: str | None = None, client: httpx.Client | None = None):
        self.url = url
        self.model = model
        self.temperature = temperature
        self.api_key = api_key if api_key is not None else os.environ.get("SER_API_KEY", "")
        self.client = client or httpx.Client(timeout=timeout)

    def request_body(self, bundle: PromptBundle) -> dict:
        return {
            "model": self.model,
            "messages": [
                {"role": "system", "content": bundle.system_text},
                {"role": "user", "content": bundle.user_text},
            ],
            "temperature": self.temperature,
        }

    def __call__(self, bundle: PromptBundle) -> str:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = self.client.post(self.url, json=self.request_body(bundle), headers=headers)
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProviderError(f"chat completion failed: {exc}") from exc


class ReplayProvider:
    """Serves stored completions keyed by sha256 of the article text."""

    def __init__(self, fixtures: dict[str, str | list[str]]):
        self.fixtures = fixtures
        self.calls = 0
        self._served: dict[str, int] = {}

    @classmethod
    def from_file(cls, path: str | Path) -> "ReplayProvider":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def __call__(self, bundle: PromptBundle) -> str:
        self.calls += 1
        key = article_key(bundle.article)
        if key not in self.fixtures:
            raise ProviderError(f"no replay fixture for article {key[:12]}")
        entry = self.fixtures[key]
        if isinstance(entry, list):
            n = self._served.get(key, 0)
            self._served[key] = n + 1
            return entry[min(n, len(entry) - 1)]
        return entry


def extract_with_retry(
    article: str,
    when: date | str,
    provider: Provider,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
    examples: Sequence[tuple[str, str]] | None = None,
    judge: Callable[[Sequence[EventTriplet], str], bool] | None = None,
) -> ExtractionOutcome:
    """Render, call, parse and validate, re-prompting until a pass or exhaustion."""
    if max_attempts < 1:
        raise ValueError("max_attempts must be at least 1")
    bundle = render_prompt(article, when, examples)
    failures: list[Diagnostic | str] = []
    for attempt in range(1, max_attempts + 1):
        try:
            completion = provider(bundle)
            events = parse_events(completion)
        except (ProviderError, ParseError) as exc:
            failures.append(f"attempt {attempt}: {exc}")
            continue
        diags = validate_events(events, article)
        fatal = [d for d in diags if d.fatal]
        if fatal:
            failures.extend(fatal)
            continue
        if judge is not None and not judge(events, article):
            failures.append(f"attempt {attempt}: rejected by judge")
            continue
        return ExtractionOutcome("ok", events, attempt, diags)
    log.info("discarding article after %d attempts", max_attempts)
    return ExtractionOutcome("discarded", [], max_attempts, failures)


def extract_many(items: Sequence[tuple[str, date | str]], provider: Provider,
                 max_attempts: int = DEFAULT_MAX_ATTEMPTS, max_in_flight: int = 1,
                 examples=None) -> list[ExtractionOutcome]:
    def one(item):
        return extract_with_retry(item[0], item[1], provider, max_attempts, examples)

    if max_in_flight <= 1:
        return [one(it) for it in items]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(one, items))
