"""Event triplets, token vocabularies and firm-period observation panels."""
from __future__ import annotations

import json
import logging
import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from datetime import date
from fractions import Fraction
from functools import lru_cache
from importlib import resources
from typing import Iterable, NamedTuple, Sequence
from urllib.parse import unquote, urlparse

import numpy as np

log = logging.getLogger(__name__)

PAD = 0
UNK = 1
PAD_KEY = "<pad>"
UNK_KEY = "<unk>"


@dataclass(frozen=True)
class EventTriplet:
    subject: str
    action: str
    object: str
    context: str
    subject_link: str | None = None
    object_link: str | None = None

    def to_dict(self) -> dict:
        return {
            "subject": self.subject,
            "subject_link": self.subject_link,
            "action": self.action,
            "object": self.object,
            "object_link": self.object_link,
            "context": self.context,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EventTriplet":
        return cls(
            subject=d["subject"],
            action=d["action"],
            object=d["object"],
            context=d.get("context", ""),
            subject_link=d.get("subject_link") or None,
            object_link=d.get("object_link") or None,
        )


class CanonicalEvent(NamedTuple):
    subject: int
    action: int
    object: int


PAD_EVENT = CanonicalEvent(PAD, PAD, PAD)


def is_valid_url(link: str) -> bool:
    try:
        parsed = urlparse(link)
    except ValueError:
        return False
    return parsed.scheme in ("http", "https") and bool(parsed.netloc) and " " not in link


class TokenIndex:
    """Dense bijection between string keys and integer ids, with counts.

    Ids 0 and 1 are reserved for padding and unseen tokens; they carry a
    count of zero.
    """

    def __init__(self):
        self._ids: dict[str, int] = {PAD_KEY: PAD, UNK_KEY: UNK}
        self._keys: list[str] = [PAD_KEY, UNK_KEY]
        self.counts: list[int] = [0, 0]
        self.frozen = False

    def __len__(self) -> int:
        return len(self._keys)

    def __contains__(self, key: str) -> bool:
        return key in self._ids

    def add(self, key: str) -> int:
        idx = self._ids.get(key)
        if idx is None:
            if self.frozen:
                return UNK
            idx = len(self._keys)
            self._ids[key] = idx
            self._keys.append(key)
            self.counts.append(1)
        elif idx > UNK and not self.frozen:
            self.counts[idx] += 1
        return idx

    def get(self, key: str) -> int:
        return self._ids.get(key, UNK)

    def key(self, idx: int) -> str:
        return self._keys[idx]

    def keys(self) -> list[str]:
        return list(self._keys)

    def to_dict(self) -> dict:
        return {"keys": self._keys, "counts": self.counts}

    @classmethod
    def from_dict(cls, d: dict) -> "TokenIndex":
        idx = cls()
        idx._keys = list(d["keys"])
        idx._ids = {k: i for i, k in enumerate(idx._keys)}
        idx.counts = list(d["counts"])
        return idx


@dataclass
class Vocabulary:
    entities: TokenIndex = field(default_factory=TokenIndex)
    actions: TokenIndex = field(default_factory=TokenIndex)
    warnings: list[str] = field(default_factory=list)

    def freeze(self) -> "Vocabulary":
        """Stop growing: unseen keys map to UNK from now on."""
        self.entities.frozen = True
        self.actions.frozen = True
        return self

    def to_dict(self) -> dict:
        return {"entities": self.entities.to_dict(), "actions": self.actions.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(TokenIndex.from_dict(d["entities"]), TokenIndex.from_dict(d["actions"]))

    def canonicalize(self, ev: EventTriplet) -> CanonicalEvent:
        return CanonicalEvent(
            canonicalize_entity(ev.subject, ev.subject_link, self),
            self.actions.add(normalize_action(ev.action)),
            canonicalize_entity(ev.object, ev.object_link, self),
        )

    def event_label(self, ev: CanonicalEvent) -> str:
        return "-".join(
            (self.entities.key(ev.subject), self.actions.key(ev.action), self.entities.key(ev.object))
        )


_WS = re.compile(r"\s+")


def entity_key(surface: str, link: str | None = None) -> tuple[str, str | None]:
    """Canonical key for an entity mention plus an optional warning message."""
    if not surface or not surface.strip():
        raise ValueError("entity surface form is empty")
    warning = None
    if link:
        if is_valid_url(link):
            segment = urlparse(link).path.rstrip("/").rsplit("/", 1)[-1]
            segment = unquote(segment).strip()
            if segment:
                return segment, None
        warning = f"malformed entity link {link!r} for {surface!r}; using surface form"
    return _WS.sub(" ", surface.strip().lower()), warning


def canonicalize_entity(surface: str, link: str | None, vocab: Vocabulary) -> int:
    key, warning = entity_key(surface, link)
    if warning:
        log.warning(warning)
        vocab.warnings.append(warning)
    return vocab.entities.add(key)


# ------------------------------------------------------------------ actions


@lru_cache(maxsize=1)
def _lemma_rules() -> dict:
    text = resources.files("ser_returns").joinpath("data/lemma_rules.json").read_text(encoding="utf-8")
    rules = json.loads(text)
    rules["keep"] = frozenset(rules["keep"])
    return rules


_VOWELS = "aeiou"
_PUNCT = str.maketrans({c: " " for c in string.punctuation if c not in "-'"})


def _prev_ok(spec: str, ch: str) -> bool:
    if spec == "*":
        return True
    if spec == "C":
        return ch not in _VOWELS
    if spec.startswith("!"):
        return ch not in spec[1:]
    return ch in spec


def _repair_stem(stem: str, rules: dict) -> str:
    if len(stem) >= 2 and stem[-1] == stem[-2] and stem[-1] not in _VOWELS:
        if stem[-2:] in rules["no_undouble"]:
            return stem
        return stem[:-1]
    if stem[-1] in rules["final_letter_e"]:
        return stem + "e"
    spec = rules["ending_e"].get(stem[-2:])
    if spec is not None and (len(stem) < 3 or _prev_ok(spec, stem[-3])):
        return stem + "e"
    return stem


def lemmatize_word(word: str) -> str:
    rules = _lemma_rules()
    if word in rules["irregular"]:
        return rules["irregular"][word]
    if len(word) <= 3 or word in rules["keep"] or not word.isalpha():
        return word
    if word.endswith("ied") or (word.endswith("ies") and len(word) > 4):
        return word[:-3] + "y"
    if word.endswith("ing"):
        stem = word[:-3]
        return _repair_stem(stem, rules) if len(stem) >= 3 else word
    if word.endswith("eed"):
        return word[:-1]
    if word.endswith("ed"):
        stem = word[:-2]
        return _repair_stem(stem, rules) if len(stem) >= 2 else word
    if word.endswith(("sses", "ches", "shes", "xes", "zzes")):
        return word[:-2]
    if word.endswith("s") and not word.endswith(("ss", "us", "is")):
        return word[:-1]
    return word


def normalize_action(raw: str) -> str:
    """Lowercase, drop punctuation and lemmatize each word of an action phrase."""
    if not raw or not raw.strip():
        raise ValueError("action is empty")
    words = raw.lower().translate(_PUNCT).replace("'", " ").split()
    cleaned = [w.strip("-") for w in words if w.strip("-")]
    if not cleaned:
        return _WS.sub(" ", raw.strip().lower())
    return " ".join(lemmatize_word(w) for w in cleaned)


# ------------------------------------------------------------ deduplication


def dedupe_events(events: Iterable[CanonicalEvent]) -> list[CanonicalEvent]:
    seen: set = set()
    out = []
    for ev in events:
        key = tuple(ev)
        if key not in seen:
            seen.add(key)
            out.append(ev)
    return out


_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def cosine(a: Counter, b: Counter) -> float:
    if not a or not b:
        return 0.0
    if len(a) > len(b):
        a, b = b, a
    dot = sum(v * b.get(k, 0) for k, v in a.items())
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    return dot / (na * nb)


def dedupe_articles(articles: Sequence[Sequence[str]], threshold: float = 0.9) -> list[int]:
    """Indices of articles kept after dropping near-duplicates of earlier kept ones."""
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    kept: list[int] = []
    vectors: list[Counter] = []
    for j, tokens in enumerate(articles):
        tf = Counter(tokens)
        if any(cosine(tf, prev) > threshold for prev in vectors):
            continue
        kept.append(j)
        vectors.append(tf)
    return kept


# ---------------------------------------------------------------- returns

_EXACT_BELOW = 1e-4


def compound_weekly(daily_returns: Sequence[float]) -> float:
    """Compound up to five daily simple returns into one weekly return.

    Uses exp(sum(log1p(r))) - 1; near-zero results, where that loses
    relative precision, are recomputed with exact rational arithmetic.
    """
    rs = [float(r) for r in daily_returns]
    if not 1 <= len(rs) <= 5:
        raise ValueError(f"expected 1..5 daily returns, got {len(rs)}")
    if any(not r > -1 for r in rs):
        raise ValueError("daily returns must exceed -1")
    out = math.expm1(math.fsum(math.log1p(r) for r in rs))
    if abs(out) < _EXACT_BELOW:
        prod = Fraction(1)
        for r in rs:
            prod *= 1 + Fraction(r)
        out = float(prod - 1)
    return out


# ------------------------------------------------------------ observations


@dataclass(frozen=True)
class ObservationConfig:
    n_max: int = 30
    days: int = 1


@dataclass(frozen=True, eq=False)
class FirmPeriodObservation:
    """One stock's events for a period and its next-period realized return.

    ``tokens`` has shape (days, n_max, 3) holding (subject, action, object)
    ids; ``mask`` (days, n_max) marks real events. Daily observations have a
    single day slot.
    """

    stock_id: int
    period: date
    tokens: np.ndarray
    mask: np.ndarray
    target_return: float

    @property
    def days(self) -> int:
        return self.tokens.shape[0]

    def events(self, day: int = 0) -> list[CanonicalEvent]:
        return [CanonicalEvent(*map(int, t)) for t, m in zip(self.tokens[day], self.mask[day]) if m]

    def all_events(self) -> list[CanonicalEvent]:
        return [ev for d in range(self.days) for ev in self.events(d)]


def _fill_day(events: Sequence[CanonicalEvent], n_max: int) -> tuple[np.ndarray, np.ndarray]:
    kept = dedupe_events(events)[:n_max]
    tokens = np.zeros((n_max, 3), dtype=np.int64)
    mask = np.zeros(n_max, dtype=bool)
    for i, ev in enumerate(kept):
        tokens[i] = ev
        mask[i] = True
    return tokens, mask


def build_observation(
    stock_id: int,
    period: date,
    raw_events,
    target: float,
    cfg: ObservationConfig = ObservationConfig(),
) -> FirmPeriodObservation:
    """Dedupe, truncate to ``n_max`` in first-seen order, and pad.

    With ``cfg.days > 1`` ``raw_events`` is a list of per-day event lists;
    missing trailing days are padded with empty days.
    """
    if not target > -1:
        raise ValueError(f"target return must exceed -1, got {target}")
    if cfg.days == 1:
        per_day = [list(raw_events)]
    else:
        per_day = [list(d) for d in raw_events]
        if len(per_day) > cfg.days:
            raise ValueError(f"got {len(per_day)} day slices for a {cfg.days}-day grid")
        per_day += [[] for _ in range(cfg.days - len(per_day))]
    filled = [_fill_day(d, cfg.n_max) for d in per_day]
    tokens = np.stack([t for t, _ in filled])
    mask = np.stack([m for _, m in filled])
    return FirmPeriodObservation(int(stock_id), period, tokens, mask, float(target))


class Panel:
    """Firm-period observations sorted by period, at most one per stock per period."""

    def __init__(self, observations: Iterable[FirmPeriodObservation], mode: str = "daily"):
        if mode not in ("daily", "weekly"):
            raise ValueError(f"unknown mode {mode!r}")
        obs = sorted(observations, key=lambda o: (o.period, o.stock_id))
        seen = set()
        for o in obs:
            key = (o.period, o.stock_id)
            if key in seen:
                raise ValueError(f"duplicate observation for stock {o.stock_id} at {o.period}")
            seen.add(key)
        self.observations: tuple[FirmPeriodObservation, ...] = tuple(obs)
        self.mode = mode

    def __len__(self) -> int:
        return len(self.observations)

    def __iter__(self):
        return iter(self.observations)

    @property
    def periods(self) -> list[date]:
        return sorted({o.period for o in self.observations})

    @property
    def years(self) -> list[int]:
        return sorted({o.period.year for o in self.observations})

    def by_period(self) -> dict[date, list[FirmPeriodObservation]]:
        out: dict[date, list[FirmPeriodObservation]] = {}
        for o in self.observations:
            out.setdefault(o.period, []).append(o)
        return out

    def subset(self, keep) -> "Panel":
        return Panel([o for o in self.observations if keep(o)], self.mode)


def rolling_splits(
    panel: Panel,
    train_years: int,
    test_years: int = 1,
    extend_tail: bool = False,
    tail_group: int = 5,
) -> list[tuple[Panel, Panel]]:
    """Sliding calendar-year train/test windows stepping one test span at a time.

    With ``extend_tail`` the last ``tail_group`` splits keep the training
    start of the first split in that group, so their training windows widen
    by one test span per step.
    """
    if train_years < 1 or test_years < 1:
        raise ValueError("window lengths must be positive")
    years = panel.years
    if not years:
        raise ValueError("panel is empty")
    first, last = years[0], years[-1]
    span = last - first + 1
    if span < train_years + test_years:
        raise ValueError(f"panel spans {span} years; need {train_years + test_years}")
    starts = list(range(first, last - train_years - test_years + 2, test_years))
    tail_from = len(starts) - tail_group if extend_tail else len(starts)
    splits = []
    for i, start in enumerate(starts):
        test_lo = start + train_years
        test_hi = test_lo + test_years
        train_lo = starts[max(tail_from, 0)] if i >= tail_from else start
        train = panel.subset(lambda o, a=train_lo, b=test_lo: a <= o.period.year < b)
        test = panel.subset(lambda o, a=test_lo, b=test_hi: a <= o.period.year < b)
        splits.append((train, test))
    return splits
