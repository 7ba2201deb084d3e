"""Signal evaluation: sorted long-short portfolios, factor alphas, Fama-MacBeth.

Returns are fractions throughout. A signal panel holds, per row, the
forecast made at the end of one period and the return realised over the
next one.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import date
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

PERIODS_PER_YEAR = {"daily": 252, "weekly": 52}
DEFAULT_NW_LAGS = 11


class RankDeficientError(ValueError):
    pass


# ------------------------------------------------------------- signal panel


@dataclass
class SignalPanel:
    """Long-format rows: period, stock_id, signal, realised return, controls."""

    periods: np.ndarray  # sortable period labels (dates or ints)
    stock_ids: np.ndarray
    signal: np.ndarray
    ret: np.ndarray
    controls: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.periods = np.asarray(self.periods, dtype=object)
        self.stock_ids = np.asarray(self.stock_ids, dtype=np.int64)
        self.signal = np.asarray(self.signal, dtype=np.float64)
        self.ret = np.asarray(self.ret, dtype=np.float64)
        self.controls = {k: np.asarray(v, dtype=np.float64) for k, v in self.controls.items()}
        n = len(self.stock_ids)
        for name, arr in [("periods", self.periods), ("signal", self.signal), ("ret", self.ret), *self.controls.items()]:
            if len(arr) != n:
                raise ValueError(f"column {name} has {len(arr)} rows, expected {n}")
        seen = set(zip(self.periods.tolist(), self.stock_ids.tolist()))
        if len(seen) != n:
            raise ValueError("duplicate (period, stock_id) rows")

    def __len__(self) -> int:
        return len(self.stock_ids)

    def calendar(self) -> list:
        return sorted(set(self.periods.tolist()))

    def rows_by_period(self) -> dict:
        out: dict = {}
        for i, p in enumerate(self.periods.tolist()):
            out.setdefault(p, []).append(i)
        return {p: np.array(ix, dtype=np.int64) for p, ix in out.items()}

    def column(self, name: str) -> np.ndarray:
        if name == "signal":
            return self.signal
        return self.controls[name]


# ---------------------------------------------------------------- sorting


@dataclass
class SortResult:
    groups: list[np.ndarray]  # stock ids, lowest forecast group first
    group_means: np.ndarray
    long_short: float


def group_sizes(n: int, n_groups: int = 5) -> list[int]:
    """Near-equal sizes; the first ``n % n_groups`` (lowest-ranked) groups get one extra."""
    base, extra = divmod(n, n_groups)
    return [base + (1 if g < extra else 0) for g in range(n_groups)]


def rank_groups(stock_ids, predictions, n_groups: int = 5) -> list[np.ndarray] | None:
    """Partition stocks by ascending forecast (ties by stock id); None if too few."""
    stock_ids = np.asarray(stock_ids, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if len(stock_ids) < n_groups:
        return None
    order = np.lexsort((stock_ids, predictions))
    bounds = np.cumsum(group_sizes(len(order), n_groups))[:-1]
    return [stock_ids[g] for g in np.split(order, bounds)]


def quintile_sort(stock_ids, predictions, realized, n_groups: int = 5) -> SortResult | None:
    """Equal-weighted top-minus-bottom spread for one cross-section."""
    realized = np.asarray(realized, dtype=np.float64)
    groups = rank_groups(stock_ids, predictions, n_groups)
    if groups is None:
        log.warning("cross-section of %d stocks is too small to sort into %d groups", len(realized), n_groups)
        return None
    by_id = dict(zip(np.asarray(stock_ids, dtype=np.int64).tolist(), realized.tolist()))
    means = np.array([math.fsum(by_id[s] for s in g.tolist()) / len(g) for g in groups])
    return SortResult(groups, means, float(means[-1] - means[0]))


@dataclass
class LongShortSeries:
    periods: list
    values: np.ndarray
    periods_per_year: int = 252

    def to_rows(self) -> list[tuple[str, str]]:
        return [(_fmt_period(p), repr(float(v))) for p, v in zip(self.periods, self.values)]


def _fmt_period(p) -> str:
    return p.isoformat() if isinstance(p, date) else str(p)


def delayed_series(panel: SignalPanel, k: int = 1, n_groups: int = 5, periods_per_year: int = 252) -> LongShortSeries:
    """Long-short returns with execution delayed by ``k - 1`` periods.

    Groups formed on the forecasts of calendar period ``t`` are held over the
    return row of period ``t + k - 1``; ``k = 1`` is the immediate spread.
    Members without a return in the holding period are left out of that
    group's mean. Periods whose holding date runs past the calendar end are
    trimmed.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    cal = panel.calendar()
    rows = panel.rows_by_period()
    ret_at = {p: dict(zip(panel.stock_ids[ix].tolist(), panel.ret[ix].tolist())) for p, ix in rows.items()}
    out_p, out_v = [], []
    for t, p in enumerate(cal):
        if t + k - 1 >= len(cal):
            break
        ix = rows[p]
        groups = rank_groups(panel.stock_ids[ix], panel.signal[ix], n_groups)
        if groups is None:
            log.warning("period %s: %d stocks, skipped", _fmt_period(p), len(ix))
            continue
        held = ret_at[cal[t + k - 1]]
        top = [held[s] for s in groups[-1].tolist() if s in held]
        bottom = [held[s] for s in groups[0].tolist() if s in held]
        if not top or not bottom:
            continue
        out_p.append(p)
        out_v.append(math.fsum(top) / len(top) - math.fsum(bottom) / len(bottom))
    return LongShortSeries(out_p, np.array(out_v), periods_per_year)


def long_short_series(panel: SignalPanel, n_groups: int = 5, periods_per_year: int = 252) -> LongShortSeries:
    return delayed_series(panel, 1, n_groups, periods_per_year)


# ------------------------------------------------------------ performance


@dataclass(frozen=True)
class Performance:
    mean: float
    sd: float
    annual_return: float
    t_stat: float
    sharpe: float
    n_periods: int

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}


def performance(series: LongShortSeries | Sequence[float], periods_per_year: int | None = None,
                risk_free: Sequence[float] | None = None) -> Performance:
    """Annualised mean, t-statistic and Sharpe ratio of a return series.

    The Sharpe ratio uses excess returns over ``risk_free`` when given (zero
    otherwise). A series with zero spread gets NaN for t and Sharpe.
    """
    if isinstance(series, LongShortSeries):
        x = np.asarray(series.values, dtype=np.float64)
        ppy = periods_per_year or series.periods_per_year
    else:
        x = np.asarray(series, dtype=np.float64)
        ppy = periods_per_year or 252
    T = len(x)
    if T < 2:
        raise ValueError("performance needs at least 2 periods")
    mean = math.fsum(x) / T
    sd = float(np.std(x, ddof=1)) if np.ptp(x) > 0 else 0.0
    t = mean / (sd / math.sqrt(T)) if sd > 0 else math.nan
    ex = x if risk_free is None else x - np.asarray(risk_free, dtype=np.float64)
    ex_mean = math.fsum(ex) / T
    ex_sd = float(np.std(ex, ddof=1)) if np.ptp(ex) > 0 else 0.0
    sr = ex_mean / ex_sd * math.sqrt(ppy) if ex_sd > 0 else math.nan
    return Performance(mean, sd, mean * ppy, t, sr, T)


# ------------------------------------------------------------------- OLS


def ols(y: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients and residuals; raises on a rank-deficient design."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficientError(f"design matrix of shape {X.shape} is rank deficient")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    return beta, y - X @ beta


def robust_se(X: np.ndarray, resid: np.ndarray) -> np.ndarray:
    """White (HC0) heteroskedasticity-robust standard errors."""
    bread = np.linalg.inv(X.T @ X)
    meat = (X * resid[:, None] ** 2).T @ X
    return np.sqrt(np.diag(bread @ meat @ bread))


@dataclass
class AlphaResult:
    alpha: float  # per period
    alpha_annual: float
    t_stat: float
    loadings: dict[str, float]
    se: dict[str, float]


FACTOR_NAMES = ("mktrf", "smb", "hml", "rmw", "cma")


def factor_alpha(series: Sequence[float], factors: np.ndarray | Mapping[str, Sequence[float]],
                 periods_per_year: int = 252, names: Sequence[str] = FACTOR_NAMES) -> AlphaResult:
    """OLS intercept of a spread return on factor returns, with robust t.

    Factor columns that are identically zero carry no information; they
    are dropped and reported with a zero loading. Any other collinearity
    raises ``RankDeficientError``.
    """
    y = np.asarray(series, dtype=np.float64)
    if isinstance(factors, Mapping):
        names = list(names)
        F = np.column_stack([np.asarray(factors[n], dtype=np.float64) for n in names])
    else:
        F = np.asarray(factors, dtype=np.float64).reshape(len(y), -1)
        names = list(names)[: F.shape[1]]
    if F.shape[0] != len(y):
        raise ValueError(f"{len(y)} returns but {F.shape[0]} factor rows")
    live = [j for j in range(F.shape[1]) if np.any(F[:, j] != 0)]
    X = np.column_stack([np.ones(len(y))] + [F[:, j] for j in live])
    beta, resid = ols(y, X)
    se = robust_se(X, resid)
    loadings = {n: 0.0 for n in names}
    ses = {n: math.nan for n in names}
    for pos, j in enumerate(live, start=1):
        loadings[names[j]] = float(beta[pos])
        ses[names[j]] = float(se[pos])
    t = beta[0] / se[0] if se[0] > 0 else math.nan
    ses["alpha"] = float(se[0])
    return AlphaResult(float(beta[0]), float(beta[0]) * periods_per_year, float(t), loadings, ses)


# ------------------------------------------------------------- Newey-West


def newey_west_se(x: Sequence[float], lags: int = DEFAULT_NW_LAGS) -> float:
    """HAC standard error of the mean with Bartlett weights ``1 - j/(lags+1)``."""
    x = np.asarray(x, dtype=np.float64)
    T = len(x)
    if lags < 0:
        raise ValueError("lags must be non-negative")
    if T <= lags:
        raise ValueError(f"series of length {T} is too short for {lags} lags")
    e = x - x.mean()
    var = float(e @ e) / T
    for j in range(1, lags + 1):
        var += 2.0 * (1.0 - j / (lags + 1)) * float(e[j:] @ e[:-j]) / T
    return math.sqrt(max(var, 0.0) / T)


# ----------------------------------------------------------- Fama-MacBeth


@dataclass
class FMResult:
    names: list[str]
    coef: dict[str, float]
    se: dict[str, float]
    t_stat: dict[str, float]
    n_periods: dict[str, int]
    avg_adj_r2: float
    series: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        return {
            "names": self.names,
            "coef": {k: clean(v) for k, v in self.coef.items()},
            "se": {k: clean(v) for k, v in self.se.items()},
            "t_stat": {k: clean(v) for k, v in self.t_stat.items()},
            "n_periods": self.n_periods,
            "avg_adj_r2": clean(self.avg_adj_r2),
        }


def _standardize(col: np.ndarray) -> np.ndarray:
    sd = col.std(ddof=1)
    return (col - col.mean()) / sd


def fama_macbeth(panel: SignalPanel, regressors: Sequence[str] = ("signal",), standardize: Sequence[str] | bool = False,
                 lags: int = DEFAULT_NW_LAGS) -> FMResult:
    """Per-period OLS of returns on ``regressors`` with an intercept.

    ``standardize`` names the columns rescaled to zero mean and unit
    (sample) standard deviation within each period; ``True`` means all of
    them. A column that is constant in some period is left out of that
    period's regression and its coefficient is missing for that period.
    Means are tested with Newey-West standard errors.
    """
    names = list(regressors)
    if standardize is True:
        std_cols = set(names)
    elif standardize is False:
        std_cols = set()
    else:
        std_cols = set(standardize)
    rows = panel.rows_by_period()
    series: dict[str, list[float]] = {n: [] for n in ["intercept"] + names}
    adj_r2 = []
    for p in panel.calendar():
        ix = rows[p]
        y = panel.ret[ix]
        cols, used = [], []
        for n in names:
            c = panel.column(n)[ix]
            if np.ptp(c) == 0:
                log.warning("period %s: %s is constant, dropped for this period", _fmt_period(p), n)
                continue
            cols.append(_standardize(c) if n in std_cols else c)
            used.append(n)
        k = len(used) + 1
        if len(y) <= k:
            log.warning("period %s: %d rows for %d regressors, skipped", _fmt_period(p), len(y), k)
            for n in ["intercept"] + names:
                series[n].append(math.nan)
            continue
        X = np.column_stack([np.ones(len(y))] + cols)
        beta, resid = ols(y, X)
        got = dict(zip(["intercept"] + used, beta.tolist()))
        for n in ["intercept"] + names:
            series[n].append(got.get(n, math.nan))
        tss = float(((y - y.mean()) ** 2).sum())
        if tss > 0 and len(y) > k:
            r2 = 1.0 - float(resid @ resid) / tss
            adj_r2.append(1.0 - (1.0 - r2) * (len(y) - 1) / (len(y) - k))
    coef, se, tst, npers, arrays = {}, {}, {}, {}, {}
    for n, vals in series.items():
        arr = np.array(vals, dtype=np.float64)
        arr = arr[~np.isnan(arr)]
        arrays[n] = arr
        npers[n] = len(arr)
        if len(arr) == 0:
            coef[n] = se[n] = tst[n] = math.nan
            continue
        coef[n] = math.fsum(arr) / len(arr)
        s = newey_west_se(arr, min(lags, len(arr) - 1)) if len(arr) > 1 else math.nan
        se[n] = s
        tst[n] = coef[n] / s if s and s > 0 else math.nan
    avg = math.fsum(adj_r2) / len(adj_r2) if adj_r2 else math.nan
    return FMResult(["intercept"] + names, coef, se, tst, npers, avg, arrays)


# --------------------------------------------------------------- controls


def trailing_means(returns: np.ndarray, windows: Mapping[str, int] | None = None) -> dict[str, np.ndarray]:
    """Trailing average returns over each named window of periods.

    ``returns`` is (T, N) with NaN for missing values; entry ``[t, i]`` of an
    output averages rows ``t - w + 1 .. t`` and is NaN until a full window of
    non-missing values is available.
    """
    windows = windows or {"ret_1w": 5, "ret_2w": 10, "ret_1m": 21}
    r = np.asarray(returns, dtype=np.float64)
    T = r.shape[0]
    valid = ~np.isnan(r)
    filled = np.where(valid, r, 0.0)
    csum = np.vstack([np.zeros((1,) + r.shape[1:]), np.cumsum(filled, axis=0)])
    ccnt = np.vstack([np.zeros((1,) + r.shape[1:]), np.cumsum(valid, axis=0)])
    out = {}
    for name, w in windows.items():
        res = np.full(r.shape, np.nan)
        if w <= T:
            s = csum[w:] - csum[:-w]
            c = ccnt[w:] - ccnt[:-w]
            res[w - 1 :] = np.where(c == w, s / w, np.nan)
        out[name] = res
    return out


# ----------------------------------------------------------------- output


def write_series_csv(series: LongShortSeries, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "long_short"])
        w.writerows(series.to_rows())


def write_fm_csv(result: FMResult, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "coef", "nw_se", "t_stat", "n_periods"])
        for n in result.names:
            w.writerow([n, repr(result.coef[n]), repr(result.se[n]), repr(result.t_stat[n]), result.n_periods[n]])


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
