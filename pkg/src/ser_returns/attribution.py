"""Gradient-times-input importance for events and entities, plus aggregation.

A feature's local score is the dot product of its input vector with the
gradient of the prediction with respect to that vector. Scores are grouped
by feature and summarised by mean absolute value and by the share of
absolute mass that is positive versus negative.
"""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .events import CanonicalEvent, FirmPeriodObservation, Vocabulary
from .model import SERModel, encode, forward

CLS_FEATURE = "[CLS]"
WEEKLY_CLS_FEATURE = "[WEEKLY-CLS]"
STOCK_FEATURE = "[STOCK]"


@dataclass(frozen=True)
class ImportanceRecord:
    feature: str
    role: str  # event, subject, object, or context
    stock_id: int
    period: date
    score: float
    day: int = 0


@dataclass(frozen=True)
class AggregateImportance:
    feature: str
    abs_importance: float
    pos_pct: float
    neg_pct: float
    freq: int
    signed_mean: float


def _dot(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return np.einsum("...m,...m->...", x, g)


def local_importance(
    model: SERModel,
    observations: Sequence[FirmPeriodObservation],
    vocab: Vocabulary,
    level: str = "event",
    include_context: bool = False,
    chunk: int = 512,
) -> list[ImportanceRecord]:
    """Signed x . d(yhat)/dx for every real event slot (or entity mention).

    ``level="event"`` scores the composed event vector; ``level="entity"``
    scores the subject and object embeddings separately. With
    ``include_context`` the summary tokens and stock embedding are scored
    too, which needs one backward pass per observation because those
    vectors are shared parameters.
    """
    if level not in ("event", "entity"):
        raise ValueError(f"unknown level {level!r}")
    if include_context:
        chunk = 1
    records: list[ImportanceRecord] = []
    for i in range(0, len(observations), chunk):
        part = observations[i : i + chunk]
        batch = encode(model, part, vocab)
        tape = ad.Tape()
        trace = forward(model, batch, tape)
        grads = tape.backward(ad.total(trace.yhat))
        B, D, N = batch.mask.shape
        mask = batch.mask
        src = batch.source
        if level == "event":
            scores = {"event": _dot(trace.event.value, grads[trace.event]).reshape(B, D, N)}
        else:
            scores = {
                "subject": _dot(trace.subject.value, grads[trace.subject]).reshape(B, D, N),
                "object": _dot(trace.object.value, grads[trace.object]).reshape(B, D, N),
            }
        for b, o in enumerate(part):
            for d, n in zip(*np.nonzero(mask[b])):
                s, a, ob = (int(v) for v in src[b, d, n])
                for role, arr in scores.items():
                    if role == "event":
                        key = vocab.event_label(CanonicalEvent(s, a, ob))
                    else:
                        key = vocab.entities.key(s if role == "subject" else ob)
                    records.append(ImportanceRecord(key, role, o.stock_id, o.period, float(arr[b, d, n]), int(d)))
            if include_context:
                records.extend(_context_records(model, trace, grads, o))
    return records


def _context_records(model: SERModel, trace, grads, o: FirmPeriodObservation) -> list[ImportanceRecord]:
    P = trace.leaves
    cls = float(_dot(P["cls_daily"].value, grads[P["cls_daily"]]).sum())
    stock = float(_dot(trace.stock.value, grads[trace.stock]).sum())
    out = [
        ImportanceRecord(CLS_FEATURE, "context", o.stock_id, o.period, cls),
        ImportanceRecord(STOCK_FEATURE, "context", o.stock_id, o.period, stock),
    ]
    if model.cfg.mode == "weekly":
        wk = float(_dot(P["cls_weekly"].value, grads[P["cls_weekly"]]).sum())
        out.append(ImportanceRecord(WEEKLY_CLS_FEATURE, "context", o.stock_id, o.period, wk))
    return out


def summarize(feature: str, scores: Sequence[float], reduce: str = "mean") -> AggregateImportance:
    """Absolute-mass summary of one feature's scores.

    With no absolute mass at all the polarity split is reported as 50/50.
    """
    arr = np.asarray(scores, dtype=np.float64)
    n = arr.size
    mass = math.fsum(np.abs(arr))
    pos = math.fsum(np.maximum(arr, 0.0))
    if mass > 0:
        pos_pct = pos / mass
        neg_pct = 1.0 - pos_pct
    else:
        pos_pct = neg_pct = 0.5
    if reduce == "mean":
        level = mass / n if n else 0.0
    elif reduce == "sum":
        level = mass
    else:
        raise ValueError(f"unknown reduce {reduce!r}")
    signed = math.fsum(arr) / n if n else 0.0
    return AggregateImportance(feature, level, pos_pct, neg_pct, n, signed)


def group_scores(records: Iterable[ImportanceRecord]) -> dict[str, list[float]]:
    groups: dict[str, list[float]] = defaultdict(list)
    for r in records:
        groups[r.feature].append(r.score)
    return groups


def aggregate(records: Iterable[ImportanceRecord], min_freq: int = 1, reduce: str = "mean") -> list[AggregateImportance]:
    """Per-feature summaries with ``freq >= min_freq``, highest importance first."""
    if min_freq < 1:
        raise ValueError("min_freq must be at least 1")
    out = []
    for feature, scores in group_scores(records).items():
        if len(scores) >= min_freq:
            # sorted scores make the floating-point sums independent of record order
            out.append(summarize(feature, sorted(scores), reduce))
    out.sort(key=lambda a: (-a.abs_importance, a.feature))
    return out


def polarity_tables(aggregates: Sequence[AggregateImportance], top_n: int = 20,
                    direction: str = "positive") -> list[AggregateImportance]:
    """Features pushing forecasts up (``positive``) or down (``negative``).

    Ranked by signed mean score; features whose signed mean is exactly zero
    belong to neither side.
    """
    if direction == "positive":
        rows = [a for a in aggregates if a.signed_mean > 0]
        rows.sort(key=lambda a: (-a.signed_mean, a.feature))
    elif direction == "negative":
        rows = [a for a in aggregates if a.signed_mean < 0]
        rows.sort(key=lambda a: (a.signed_mean, a.feature))
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return rows[:top_n]


IMPORTANCE_COLUMNS = ("rank", "feature", "imp_score", "pos_pct", "neg_pct", "freq")


def importance_rows(aggregates: Sequence[AggregateImportance]) -> list[dict]:
    return [
        {"rank": i, "feature": a.feature, "imp_score": repr(a.abs_importance), "pos_pct": repr(a.pos_pct),
         "neg_pct": repr(a.neg_pct), "freq": a.freq}
        for i, a in enumerate(aggregates, start=1)
    ]


def write_importance_csv(aggregates: Sequence[AggregateImportance], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=IMPORTANCE_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(importance_rows(aggregates))


def write_records_csv(records: Iterable[ImportanceRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stock_id", "date", "day", "role", "feature", "score"])
        for r in records:
            w.writerow([r.stock_id, r.period.isoformat(), r.day, r.role, r.feature, repr(r.score)])
