"""Reading and writing event panels, return series, factors and signals."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .events import (
    CanonicalEvent,
    EventTriplet,
    ObservationConfig,
    Panel,
    Vocabulary,
    build_observation,
    compound_weekly,
)

log = logging.getLogger(__name__)

FACTOR_COLUMNS = ("mktrf", "smb", "hml", "rmw", "cma", "rf")


def _date(s) -> date:
    return s if isinstance(s, date) else date.fromisoformat(str(s))


# ------------------------------------------------------------- event panels


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{n}: bad JSON ({exc})") from None
    return out


def write_jsonl(records: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")


@dataclass
class BuiltPanel:
    panel: Panel
    vocab: Vocabulary
    # (stock_id, date, event label) -> first context sentence seen
    contexts: dict[tuple[int, date, str], str] = field(default_factory=dict)
    dropped: int = 0


def build_panel(records: Sequence[dict], mode: str = "daily", n_max: int = 30, days: int = 5,
                vocab: Vocabulary | None = None) -> BuiltPanel:
    """Canonicalise JSONL observation records into a panel.

    Weekly events may carry ``day_index`` (1-based, default 1). Records
    without a usable ``target_return`` are dropped and counted.
    """
    vocab = vocab or Vocabulary()
    D = days if mode == "weekly" else 1
    cfg = ObservationConfig(n_max=n_max, days=D)
    obs, contexts, dropped = [], {}, 0
    for rec in records:
        target = rec.get("target_return")
        if target is None or not float(target) > -1:
            dropped += 1
            continue
        sid = int(rec["stock_id"])
        when = _date(rec["date"])
        per_day: list[list[CanonicalEvent]] = [[] for _ in range(D)]
        for raw in rec.get("events", []):
            ev = vocab.canonicalize(EventTriplet.from_dict(raw))
            day = int(raw.get("day_index", 1)) if D > 1 else 1
            if not 1 <= day <= D:
                raise ValueError(f"day_index {day} outside 1..{D} for stock {sid} on {when}")
            per_day[day - 1].append(ev)
            contexts.setdefault((sid, when, vocab.event_label(ev)), raw.get("context", ""))
        raw_events = per_day[0] if D == 1 else per_day
        obs.append(build_observation(sid, when, raw_events, float(target), cfg))
    if dropped:
        log.warning("dropped %d records without a valid target return", dropped)
    return BuiltPanel(Panel(obs, mode), vocab, contexts, dropped)


def panel_records(panel: Panel, vocab: Vocabulary,
                  context: Callable[[Vocabulary, CanonicalEvent], str] | None = None) -> list[dict]:
    """JSONL records for a panel; entity and action keys are written as surface forms."""
    context = context or (lambda v, ev: v.event_label(ev).replace("-", " "))
    out = []
    for o in panel:
        events = []
        for d in range(o.days):
            for ev in o.events(d):
                item = {
                    "subject": vocab.entities.key(ev.subject),
                    "action": vocab.actions.key(ev.action),
                    "object": vocab.entities.key(ev.object),
                    "context": context(vocab, ev),
                }
                if o.days > 1:
                    item["day_index"] = d + 1
                events.append(item)
        out.append({"stock_id": o.stock_id, "date": o.period.isoformat(), "events": events,
                    "target_return": o.target_return})
    return out


# ------------------------------------------------------------------ returns


def read_returns(path: str | Path) -> list[tuple[date, int, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(_date(r["date"]), int(r["stock_id"]), float(r["ret"])) for r in csv.DictReader(fh)]


def write_returns(rows: Iterable[tuple[date, int, float]], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "stock_id", "ret"])
        for d, s, r in rows:
            w.writerow([d.isoformat(), s, repr(float(r))])


def next_period_targets(records: Sequence[dict], returns: Sequence[tuple[date, int, float]],
                        mode: str = "daily") -> int:
    """Fill missing ``target_return`` fields from a daily return series, in place.

    Daily: the first return strictly after the record date. Weekly: the
    compounded returns of the following Monday-to-Friday week. Returns the
    number of records filled.
    """
    by_stock: dict[int, list[tuple[date, float]]] = {}
    for d, s, r in returns:
        by_stock.setdefault(s, []).append((d, r))
    for v in by_stock.values():
        v.sort()
    filled = 0
    for rec in records:
        if rec.get("target_return") is not None:
            continue
        series = by_stock.get(int(rec["stock_id"]), [])
        when = _date(rec["date"])
        if mode == "daily":
            later = [r for d, r in series if d > when]
            value = later[0] if later else None
        else:
            monday = when - timedelta(days=when.weekday()) + timedelta(weeks=1)
            week = [r for d, r in series if monday <= d < monday + timedelta(days=5)]
            value = compound_weekly(week) if week else None
        if value is not None:
            rec["target_return"] = value
            filled += 1
    return filled


# -------------------------------------------------------- factors, signals


def read_factors(path: str | Path) -> tuple[list[date], dict[str, np.ndarray]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    dates = [_date(r["date"]) for r in rows]
    cols = {c: np.array([float(r[c]) for r in rows]) for c in FACTOR_COLUMNS if rows and c in rows[0]}
    return dates, cols


def write_factors(dates: Sequence[date], cols: dict[str, Sequence[float]], path: str | Path) -> None:
    names = [c for c in FACTOR_COLUMNS if c in cols]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *names])
        for i, d in enumerate(dates):
            w.writerow([d.isoformat(), *(repr(float(cols[c][i])) for c in names)])


def read_signals(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        out = []
        for r in csv.DictReader(fh):
            row = {"date": _date(r["date"]), "stock_id": int(r["stock_id"]), "signal": float(r["signal"])}
            for k, v in r.items():
                if k not in row and v not in (None, ""):
                    row[k] = float(v)
            out.append(row)
        return out


def write_signals(rows: Iterable[dict], path: str | Path, extra: Sequence[str] = ("ret",)) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "stock_id", "signal", *extra])
        for r in rows:
            w.writerow([r["date"].isoformat(), r["stock_id"], repr(float(r["signal"])),
                        *(repr(float(r[k])) for k in extra)])
