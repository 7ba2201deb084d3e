"""Entity-driven return comovement around news shocks.

Firms are tied to an entity by a tf-idf style exposure score. For each
entity the most exposed firms form a portfolio; days on which several of
them are in the news with that entity are shocks. Comovement is the mean
pairwise return correlation in a window around each shock minus the same
statistic on quieter flanking windows.
"""
from __future__ import annotations

import csv
import logging
import math
from bisect import bisect_left, bisect_right
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

log = logging.getLogger(__name__)

DEFAULT_K = 15
DEFAULT_MIN_FIRMS = 3
DEFAULT_MIN_SHOCKS = 5
BASE_PAD = 5
BASE_LEN = 10
VALUE_THRESHOLDS = (0.0015, 0.0010)


@dataclass(frozen=True)
class Mention:
    """One event linking ``firm`` to ``entities`` on ``day``."""

    firm: int
    day: date
    entities: frozenset[str]


def mentions_from_panel(panel, vocab) -> list[Mention]:
    """One mention per real event slot, naming its subject and object keys."""
    out = []
    for o in panel:
        for d in range(o.days):
            for ev in o.events(d):
                keys = frozenset((vocab.entities.key(ev.subject), vocab.entities.key(ev.object)))
                out.append(Mention(o.stock_id, o.period, keys))
    return out


# ---------------------------------------------------------------- exposure


def entity_counts(mentions: Iterable[Mention]) -> tuple[dict[int, Counter], int]:
    """Per-firm entity event counts and the number of distinct firm-days."""
    tf: dict[int, Counter] = defaultdict(Counter)
    firm_days = set()
    for m in mentions:
        tf[m.firm].update(m.entities)
        firm_days.add((m.firm, m.day))
    return dict(tf), len(firm_days)


def exposure_weight(df: int, n_docs: int) -> float:
    return math.log((1 + n_docs) / (1 + df))


def exposure(tf: Mapping[int, Mapping[str, int]], n_docs: int) -> dict[tuple[int, str], float]:
    """Exposure of firm to entity: count times ln((1 + n_docs) / (1 + firms naming it)).

    ``n_docs`` is the number of firm-day observations behind ``tf``.
    """
    if n_docs < 1:
        raise ValueError("n_docs must be at least 1")
    df: Counter = Counter()
    for counts in tf.values():
        df.update(e for e, c in counts.items() if c > 0)
    return {
        (firm, e): c * exposure_weight(df[e], n_docs)
        for firm, counts in tf.items()
        for e, c in counts.items()
        if c > 0
    }


def top_k_portfolio(entity: str, exposures: Mapping[tuple[int, str], float], k: int = DEFAULT_K) -> list[int]:
    """The ``k`` firms with the largest positive exposure, ties by firm id."""
    ranked = sorted(
        ((-v, firm) for (firm, e), v in exposures.items() if e == entity and v > 0)
    )
    if len(ranked) < k:
        log.warning("entity %s: only %d exposed firms for a portfolio of %d", entity, len(ranked), k)
    return [firm for _, firm in ranked[:k]]


# ------------------------------------------------------------------ shocks


def shift_trading_day(day: date, calendar: Sequence[date], shift: int = 1) -> date | None:
    """The ``shift``-th trading day after ``day`` (``shift=0``: same or next)."""
    if shift == 0:
        i = bisect_left(calendar, day)
    else:
        i = bisect_right(calendar, day) + shift - 1
    return calendar[i] if i < len(calendar) else None


def detect_shocks(
    entity: str,
    portfolio: Sequence[int],
    mentions: Iterable[Mention],
    calendar: Sequence[date],
    min_firms: int = DEFAULT_MIN_FIRMS,
    shift: int = 1,
    aliases: Iterable[str] = (),
) -> list[date]:
    """Trading days following news days where ``min_firms`` portfolio firms meet the entity."""
    if min_firms < 1:
        raise ValueError("min_firms must be at least 1")
    names = {entity, *aliases}
    members = set(portfolio)
    hit: dict[date, set[int]] = defaultdict(set)
    for m in mentions:
        if m.firm in members and names & m.entities:
            hit[m.day].add(m.firm)
    out = set()
    for day, firms in hit.items():
        if len(firms) >= min_firms:
            shocked = shift_trading_day(day, calendar, shift)
            if shocked is not None:
                out.add(shocked)
    return sorted(out)


def shock_calendar(portfolios: Mapping[str, Sequence[int]], mentions: Sequence[Mention], calendar: Sequence[date],
                   min_firms: int = DEFAULT_MIN_FIRMS, shift: int = 1, min_shocks: int = DEFAULT_MIN_SHOCKS,
                   aliases: Mapping[str, Sequence[str]] | None = None) -> dict[str, list[date]]:
    """Shock days per entity, keeping entities with at least ``min_shocks``."""
    aliases = aliases or {}
    out = {}
    for e, firms in portfolios.items():
        days = detect_shocks(e, firms, mentions, calendar, min_firms, shift, aliases.get(e, ()))
        if len(days) >= min_shocks:
            out[e] = days
        else:
            log.info("entity %s: %d shocks, below %d, dropped", e, len(days), min_shocks)
    return out


# ------------------------------------------------------------- correlation


def mean_pairwise_corr(block: np.ndarray) -> tuple[float, int]:
    """Mean Pearson correlation over column pairs of ``block`` (rows = days).

    Pairs involving a column with zero variance (or missing values) are
    skipped; the number skipped is returned alongside. NaN when no pair is
    usable.
    """
    block = np.asarray(block, dtype=np.float64)
    n = block.shape[1]
    ok = ~np.isnan(block).any(axis=0)
    centered = block - block.mean(axis=0) if block.shape[0] else block
    ss = np.sqrt((centered * centered).sum(axis=0))
    ok &= ss > 0
    idx = np.flatnonzero(ok)
    pairs = n * (n - 1) // 2
    usable = len(idx) * (len(idx) - 1) // 2
    if usable == 0:
        return math.nan, pairs
    z = centered[:, idx] / ss[idx]
    c = z.T @ z
    iu = np.triu_indices(len(idx), 1)
    vals = np.clip(c[iu], -1.0, 1.0)
    return math.fsum(vals) / usable, pairs - usable


def window_delta(event_block: np.ndarray, base_block: np.ndarray) -> float:
    return mean_pairwise_corr(event_block)[0] - mean_pairwise_corr(base_block)[0]


@dataclass(frozen=True)
class ShockWindow:
    day: date
    rho_event: float
    rho_base: float
    skipped_pairs: int

    @property
    def delta(self) -> float:
        return self.rho_event - self.rho_base


@dataclass
class ComoveResult:
    entity: str
    tau: int
    rho_event: float
    rho_base: float
    delta: float
    p_value: float
    n_shocks: int
    shocks: list[ShockWindow] = field(default_factory=list)
    groups: dict[str, str] = field(default_factory=dict)


@dataclass
class ReturnMatrix:
    """Daily returns on a trading calendar, one column per firm (NaN = missing)."""

    calendar: list[date]
    firms: list[int]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.calendar), len(self.firms)):
            raise ValueError("return matrix shape does not match calendar and firms")
        self._col = {f: j for j, f in enumerate(self.firms)}
        self._row = {d: i for i, d in enumerate(self.calendar)}

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[date, int, float]]) -> "ReturnMatrix":
        rows = list(rows)
        cal = sorted({d for d, _, _ in rows})
        firms = sorted({f for _, f, _ in rows})
        vals = np.full((len(cal), len(firms)), np.nan)
        ri = {d: i for i, d in enumerate(cal)}
        ci = {f: j for j, f in enumerate(firms)}
        for d, f, r in rows:
            vals[ri[d], ci[f]] = r
        return cls(cal, firms, vals)

    def columns(self, firms: Sequence[int]) -> np.ndarray:
        return self.values[:, [self._col[f] for f in firms if f in self._col]]

    def row(self, day: date) -> int | None:
        return self._row.get(day)


def _windows(t: int, tau: int) -> tuple[range, list[int]]:
    event = range(t - tau, t + tau + 1)
    left = list(range(t - tau - BASE_PAD - BASE_LEN, t - tau - BASE_PAD))
    right = list(range(t + tau + BASE_PAD + 1, t + tau + BASE_PAD + BASE_LEN + 1))
    return event, left + right


def delta_rho(returns: ReturnMatrix, portfolio: Sequence[int], shocks: Sequence[date], tau: int,
              entity: str = "") -> ComoveResult:
    """Event-window minus baseline mean pairwise correlation for one entity.

    For ``tau >= 1`` each shock is scored on its own and the entity value is
    the mean over shocks, with a two-sided one-sample t-test of the
    per-shock differences. A single-day window (``tau = 0``) has no
    per-shock correlation, so shock days are pooled into one event block
    against the pooled baselines and the test runs across firm pairs.
    Baseline days that fall inside any of the entity's event windows are
    dropped; shocks without room for the full flanks are skipped.
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")
    R = returns.columns(portfolio)
    T = R.shape[0]
    rows = sorted({r for r in (returns.row(d) for d in shocks) if r is not None})
    busy = set()
    for t in rows:
        busy.update(range(t - tau, t + tau + 1))
    usable = []
    for t in rows:
        event, base = _windows(t, tau)
        if base[0] < 0 or base[-1] >= T:
            continue
        usable.append((t, list(event), [b for b in base if b not in busy]))
    if tau == 0:
        return _pooled(returns, R, usable, entity)
    windows = []
    for t, event, base in usable:
        e, skip_e = mean_pairwise_corr(R[event])
        b, skip_b = mean_pairwise_corr(R[base])
        if math.isnan(e) or math.isnan(b):
            continue
        windows.append(ShockWindow(returns.calendar[t], e, b, skip_e + skip_b))
    return summarize_shocks(windows, tau, entity)


def summarize_shocks(windows: Sequence[ShockWindow], tau: int, entity: str = "") -> ComoveResult:
    n = len(windows)
    if n == 0:
        return ComoveResult(entity, tau, math.nan, math.nan, math.nan, math.nan, 0, [])
    ev = math.fsum(w.rho_event for w in windows) / n
    base = math.fsum(w.rho_base for w in windows) / n
    deltas = np.array([w.delta for w in windows])
    p = _ttest_p(deltas)
    return ComoveResult(entity, tau, ev, base, ev - base, p, n, list(windows))


def _ttest_p(x: np.ndarray) -> float:
    if len(x) < 2 or np.ptp(x) == 0:
        return math.nan
    return float(stats.ttest_1samp(x, 0.0).pvalue)


def _pair_corrs(block: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.corrcoef(block, rowvar=False)
    iu = np.triu_indices(block.shape[1], 1)
    return np.atleast_2d(c)[iu]


def _pooled(returns: ReturnMatrix, R: np.ndarray, usable, entity: str) -> ComoveResult:
    if len(usable) < 2:
        return ComoveResult(entity, 0, math.nan, math.nan, math.nan, math.nan, len(usable), [])
    event_rows = [t for t, _, _ in usable]
    base_rows = sorted({b for _, _, base in usable for b in base})
    ce = _pair_corrs(R[event_rows])
    cb = _pair_corrs(R[base_rows])
    keep = ~(np.isnan(ce) | np.isnan(cb))
    e, _ = mean_pairwise_corr(R[event_rows])
    b, _ = mean_pairwise_corr(R[base_rows])
    p = _ttest_p(ce[keep] - cb[keep])
    return ComoveResult(entity, 0, e, b, e - b, p, len(usable), [])


# ------------------------------------------------------------ leave-one-out


@dataclass(frozen=True)
class LeaveOneOut:
    day: date
    post_corr_drop_pct: float
    delta_drop_pct: float


def leave_one_out(result: ComoveResult) -> list[LeaveOneOut]:
    """Percentage fall in mean event correlation and in the comovement effect
    when each shock is left out."""
    shocks = result.shocks
    n = len(shocks)
    if n < 2:
        raise ValueError("leave-one-out needs at least 2 shocks")
    full_e = math.fsum(s.rho_event for s in shocks) / n
    full_d = math.fsum(s.delta for s in shocks) / n
    out = []
    for i, s in enumerate(shocks):
        rest = shocks[:i] + shocks[i + 1 :]
        red_e = math.fsum(r.rho_event for r in rest) / (n - 1)
        red_d = math.fsum(r.delta for r in rest) / (n - 1)
        out.append(LeaveOneOut(s.day, _pct_drop(full_e, red_e), _pct_drop(full_d, red_d)))
    return out


def _pct_drop(full: float, reduced: float) -> float:
    return (full - reduced) / full * 100.0 if full != 0 else math.nan


# ----------------------------------------------------------------- groups


def group_entities(scores: Mapping[str, float], scheme: str = "equal",
                   thresholds: tuple[float, float] = VALUE_THRESHOLDS) -> dict[str, str]:
    """Label entities High, Mid or Low by importance.

    ``equal`` splits the ranking into three near-equal groups (larger groups
    first); ``value`` uses ``score >= hi`` for High and ``score >= lo`` for Mid.
    """
    if scheme == "equal":
        ranked = sorted(scores, key=lambda e: (-scores[e], e))
        base, extra = divmod(len(ranked), 3)
        labels, start = {}, 0
        for g, name in enumerate(("High", "Mid", "Low")):
            size = base + (1 if g < extra else 0)
            for e in ranked[start : start + size]:
                labels[e] = name
            start += size
        return labels
    if scheme == "value":
        hi, lo = thresholds
        return {e: "High" if s >= hi else "Mid" if s >= lo else "Low" for e, s in scores.items()}
    raise ValueError(f"unknown grouping scheme {scheme!r}")


GROUP_ORDER = ("High", "Mid", "Low")
TABLE_COLUMNS = ("scheme", "group", "window", "avg_delta_rho", "pct_mean_pos", "pct_p05", "pct_p01", "n_entities")


def comovement_table(results: Iterable[ComoveResult], labels: Mapping[str, Mapping[str, str]]) -> list[dict]:
    """Group-by-window summary rows; ``labels`` maps scheme -> entity -> group.

    Shares are fractions of the group's entities with a positive mean
    effect, or with p below 0.05 / 0.01.
    """
    results = [r for r in results if not math.isnan(r.delta)]
    rows = []
    taus = sorted({r.tau for r in results})
    for scheme, lab in labels.items():
        for group in GROUP_ORDER:
            for tau in taus:
                rs = [r for r in results if r.tau == tau and lab.get(r.entity) == group]
                n = len(rs)
                if n == 0:
                    continue
                ps = [r.p_value for r in rs]
                rows.append({
                    "scheme": scheme,
                    "group": group,
                    "window": f"+-{tau}d",
                    "avg_delta_rho": math.fsum(r.delta for r in rs) / n,
                    "pct_mean_pos": sum(r.delta > 0 for r in rs) / n,
                    "pct_p05": sum((not math.isnan(p)) and p < 0.05 for p in ps) / n,
                    "pct_p01": sum((not math.isnan(p)) and p < 0.01 for p in ps) / n,
                    "n_entities": n,
                })
    return rows


def write_table_csv(rows: Sequence[dict], path: str | Path, columns: Sequence[str] = TABLE_COLUMNS) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def write_loo_csv(entity: str, drops: Sequence[LeaveOneOut], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity", "shock_date", "post_corr_drop_pct", "delta_drop_pct"])
        for d in drops:
            w.writerow([entity, d.day.isoformat(), repr(d.post_corr_drop_pct), repr(d.delta_drop_pct)])


# ------------------------------------------------------------ entity graph


def two_hop_edges(triplets: Iterable[tuple[str, str, str]], focal: str) -> list[tuple[str, str, str]]:
    """Triplets whose subject and object both lie within two hops of ``focal``.

    The graph links subject and object of every triplet, ignoring direction.
    """
    triplets = sorted(set(triplets))
    nbrs: dict[str, set[str]] = defaultdict(set)
    for s, _, o in triplets:
        nbrs[s].add(o)
        nbrs[o].add(s)
    dist = {focal: 0}
    frontier = [focal]
    for hop in (1, 2):
        nxt = []
        for node in frontier:
            for nb in sorted(nbrs[node]):
                if nb not in dist:
                    dist[nb] = hop
                    nxt.append(nb)
        frontier = nxt
    return [t for t in triplets if t[0] in dist and t[2] in dist]


def write_edges_csv(edges: Sequence[tuple[str, str, str]], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "action", "object"])
        w.writerows(edges)
