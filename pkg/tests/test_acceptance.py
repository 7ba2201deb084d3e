"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is echoed in the terminal summary.
"""
import json
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from conftest import output_files
from test_attribution import distinct_panel, fd_scores, tiny
from test_comovement import CAL, common_factor_returns
from test_econometrics import HAND_IDS, HAND_PRED, HAND_RET, bartlett_nw
from test_extraction import Scripted
from test_topics import two_bank_texts, purity

from ser_returns import attribution as attr
from ser_returns import econometrics as ec
from ser_returns.cli import DEFAULT_EVAL
from ser_returns.comovement import (
    ComoveResult,
    ReturnMatrix,
    ShockWindow,
    delta_rho,
    exposure,
    leave_one_out,
    window_delta,
)
from ser_returns.events import Panel, compound_weekly
from ser_returns.extraction import ProviderError, extract_with_retry, parse_events
from ser_returns.model import (
    PRESETS,
    ModelConfig,
    SERModel,
    encode,
    loss_and_grads,
    predict,
    predict_batch,
    train,
    with_params,
)
from ser_returns.synth import SynthSpec, make_panel
from ser_returns.topics import build_corpus, lda_gibbs

FIXTURES = Path(__file__).parent / "fixtures"

pytestmark = pytest.mark.slow


def test_full_model_gradient(verdict):
    started = time.perf_counter()
    spec = SynthSpec(n_stocks=5, n_periods=3, n_entities=10, n_actions=4, n_max=4, days=2, mode="weekly", seed=11)
    data = make_panel(spec)
    cfg = ModelConfig(dim=8, heads=2, daily_layers=1, weekly_layers=1, mlp_layers=2, n_max=4, days=2,
                      mode="weekly", init_std=0.5, l2=1e-3, seed=11)
    model = SERModel.for_panel(cfg, data.panel, data.vocab)
    batch = encode(model, list(data.panel)[:4], data.vocab)
    _, grads = loss_and_grads(model, batch)

    def loss(params):
        yhat = predict_batch(with_params(model, **params), batch)
        return float(np.mean((yhat - batch.targets) ** 2)) + cfg.l2 * sum(float(np.sum(v * v)) for v in params.values())

    eps, worst, n = 1e-5, 0.0, 0
    for name, value in model.params.items():
        for idx in np.ndindex(value.shape):
            vals = []
            for step in (eps, -eps):
                moved = value.copy()
                moved[idx] += step
                vals.append(loss({**model.params, name: moved}))
            numeric = (vals[0] - vals[1]) / (2 * eps)
            a = grads[name][idx]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-7))
            n += 1
    elapsed = time.perf_counter() - started
    verdict(1, worst < 1e-4 and elapsed < 60,
            f"max relative error {worst:.2e} over {n} parameters in {elapsed:.1f}s")


def _linear(model):
    p = {k: (np.zeros_like(v) if (".q" in k or ".k" in k or k.endswith(".b")) else v) for k, v in model.params.items()}
    return with_params(model, **p)


def test_attribution_conservation(verdict):
    worst, count = 0.0, 0
    for days, seed in ((1, 0), (2, 1)):
        panel, vocab = distinct_panel(n_obs=50, n_events=3, days=days, seed=seed)
        model = _linear(tiny(panel, vocab, seed=seed, mlp_layers=1))
        obs = list(panel)
        yhat = predict(model, obs, vocab)
        recs = attr.local_importance(model, obs, vocab, include_context=True)
        for o, y in zip(obs, yhat):
            total = math.fsum(r.score for r in recs if r.stock_id == o.stock_id)
            worst = max(worst, abs(total - y))
            count += 1
    verdict(2, worst <= 1e-9 and count == 100, f"max |sum - prediction| {worst:.2e} on {count} inputs")


def test_attribution_finite_differences(verdict):
    worst, count = 0.0, 0
    for seed in range(10):
        days = 1 + seed % 2
        panel, vocab = distinct_panel(n_obs=2, n_events=2, days=days, seed=seed)
        model = tiny(panel, vocab, seed=seed)
        for o in panel:
            oracle = fd_scores(model, o, vocab)
            recs = attr.local_importance(model, [o], vocab) + attr.local_importance(model, [o], vocab, level="entity")
            for r in recs:
                want = oracle[r.feature if r.role == "event" else (r.role, r.feature)]
                worst = max(worst, abs(r.score - want) / max(abs(want), 1e-9))
            count += 1
    verdict(3, worst < 1e-4 and count == 20, f"max relative gap {worst:.2e} on {count} observations")


def test_planted_signal_recovery(verdict):
    started = time.perf_counter()
    t_ok = rank_ok = 0
    lines = []
    for seed in range(10):
        data = make_panel(SynthSpec(seed=seed))
        obs = list(data.panel)
        cut = data.panel.periods[240]
        tr = Panel([o for o in obs if o.period < cut])
        te = [o for o in obs if o.period >= cut]
        model = train(tr, data.vocab, ModelConfig(**{**PRESETS["desk"], "seed": seed})).model
        pred = predict(model, te, data.vocab)
        sig = ec.SignalPanel([o.period for o in te], [o.stock_id for o in te], pred, [o.target_return for o in te])
        perf = ec.performance(ec.long_short_series(sig))
        agg = attr.aggregate(attr.local_importance(model, te, data.vocab), min_freq=DEFAULT_EVAL["min_freq_event"])
        planted = data.manifest["planted"][0]["label"]
        t_ok += perf.mean > 0 and perf.t_stat > 2
        rank_ok += agg[0].feature == planted and agg[0].pos_pct >= 0.95
        lines.append(f"seed {seed}: t={perf.t_stat:.1f} top={agg[0].feature} pos={agg[0].pos_pct:.2f}")
    elapsed = time.perf_counter() - started
    print("\n".join(lines))
    verdict(4, t_ok >= 8 and rank_ok >= 9 and elapsed < 600,
            f"long-short t>2 in {t_ok}/10, planted event first with >=95% positive in {rank_ok}/10, {elapsed:.0f}s")


def test_econometrics_oracles(verdict):
    x = np.random.default_rng(7).normal(size=50)
    lag0 = abs(ec.newey_west_se(x, lags=0) - np.std(x) / math.sqrt(len(x)))
    lag2 = abs(ec.newey_west_se(x, lags=2) - bartlett_nw(list(x), 2))
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        T, N = 1000, 50
        s = rng.normal(size=(T, N))
        r = 0.5 * s + rng.normal(size=(T, N)) * (0.5 + np.abs(s))
        res = ec.fama_macbeth(ec.SignalPanel(np.repeat(np.arange(T), N), np.tile(np.arange(N), T), s.ravel(), r.ravel()),
                              ["signal"], lags=DEFAULT_EVAL["lags"])
        hits += abs(res.coef["signal"] - 0.5) <= 2 * res.se["signal"]
    verdict(5, lag0 < 1e-12 and lag2 < 1e-10 and hits >= 95,
            f"lag-0 gap {lag0:.1e}, lag-2 gap {lag2:.1e}, beta inside 2 NW SE in {hits}/100 runs")


def test_portfolio_mechanics(verdict):
    res = ec.quintile_sort(HAND_IDS, HAND_PRED, HAND_RET)
    sizes = [len(g) for g in res.groups]
    exact = res.long_short == (0.03 + 0.05) / 2 - (-0.04 + 0.04 - 0.03) / 3
    rng = np.random.default_rng(0)
    periods = np.repeat(np.arange(40), 23)
    ids = np.tile(np.arange(23), 40)
    sig, ret = rng.normal(size=periods.size), rng.normal(size=periods.size)
    base = ec.long_short_series(ec.SignalPanel(periods, ids, sig, ret))
    mono = ec.long_short_series(ec.SignalPanel(periods, ids, np.exp(3 * sig) + 1, ret))
    delayed = ec.delayed_series(ec.SignalPanel(periods, ids, sig, ret), k=1)
    invariant = np.array_equal(base.values, mono.values)
    same_delay = np.array_equal(base.values, delayed.values)
    verdict(6, sizes == [3, 3, 2, 2, 2] and exact and invariant and same_delay,
            f"sizes {sizes}, exact long-short {exact}, monotone invariant {invariant}, delay-1 identical {same_delay}")


def test_weekly_compounding(verdict):
    rng = np.random.default_rng(13)
    worst = 0.0
    for seq in rng.uniform(-0.2, 0.2, size=(10_000, 5)):
        exact = math.prod(Fraction(1) + Fraction(float(r)) for r in seq) - 1
        got = compound_weekly(seq)
        worst = max(worst, abs(got - float(exact)) / max(abs(float(exact)), 1e-300))
    verdict(7, worst <= 1e-12, f"max relative error {worst:.1e} on 10000 sequences")


def test_comovement(verdict):
    deltas = []
    for seed in range(20):
        R, shocks = common_factor_returns(seed, n_firms=15, shocks=tuple(range(20, 181, 20))[:8])
        deltas.append(delta_rho(R, list(range(15)), shocks, tau=2).delta)
    gap = max(abs(d - 1.0) for d in deltas)
    block = np.random.default_rng(4).normal(size=(5, 6))
    same = window_delta(block, block)
    d = CAL[:3]
    windows = [ShockWindow(d[0], 0.6, 0.1, 0), ShockWindow(d[1], 0.3, 0.2, 0), ShockWindow(d[2], 0.9, 0.0, 0)]
    drops = leave_one_out(ComoveResult("x", 1, 0.6, 0.1, 0.5, 0.1, 3, windows))
    full_e, full_d = 0.6, (0.5 + 0.1 + 0.9) / 3
    want = [((full_e - 0.6) / full_e * 100, (full_d - 0.5) / full_d * 100),
            ((full_e - 0.75) / full_e * 100, (full_d - 0.7) / full_d * 100),
            ((full_e - 0.45) / full_e * 100, (full_d - 0.3) / full_d * 100)]
    loo = max(max(abs(g.post_corr_drop_pct - e), abs(g.delta_drop_pct - dd)) for g, (e, dd) in zip(drops, want))
    verdict(8, gap < 0.05 and same == 0.0 and loo < 1e-10,
            f"max |delta - 1| {gap:.3f} over 20 seeds, identical windows {same}, leave-one-out gap {loo:.1e}")


def test_exposure(verdict):
    ubiquitous = exposure({f: {"e": 2} for f in range(9)}, 9)
    tf = {0: {"e": 3}, 1: {"e": 1}, 2: {"e": 1}, 3: {"e": 1}}
    hand = exposure(tf, 9)[(0, "e")]
    err = abs(hand - 3 * math.log(2))
    verdict(9, all(v == 0 for v in ubiquitous.values()) and err <= 1e-12,
            f"DF=N gives {sorted(set(ubiquitous.values()))}, hand case error {err:.1e}")


def test_lda(verdict):
    started = time.perf_counter()
    good, worst = 0, 0.0
    for seed in range(10):
        texts, truth = two_bank_texts(seed, length=20)
        model = lda_gibbs(build_corpus(texts), 2, iterations=500, seed=seed)
        good += purity(model, truth) >= 0.9
        worst = max(worst, np.abs(model.phi.sum(axis=1) - 1).max(), np.abs(model.theta.sum(axis=1) - 1).max())
    elapsed = time.perf_counter() - started
    verdict(10, good >= 9 and worst <= 1e-9 and elapsed < 30,
            f"purity >= 0.9 in {good}/10 seeds, normalisation error {worst:.1e}, {elapsed:.1f}s")


def test_extraction(verdict):
    article = (FIXTURES / "oa2_article.txt").read_text()
    completion = (FIXTURES / "oa2_completion.txt").read_text()
    events = parse_events(completion)
    fixture_ok = len(events) == 4 and events[0].subject == "President Trump"
    scenarios = [
        ([completion], "ok", 1),
        (["not json"], "discarded", 3),
        ([ProviderError("timeout"), "[{}]", completion], "ok", 3),
        ([ProviderError("timeout")], "discarded", 3),
    ]
    got = []
    for responses, status, attempts in scenarios:
        provider = Scripted(responses)
        out = extract_with_retry(article, "2017-04-20", provider, max_attempts=3)
        got.append((out.status, out.attempts) == (status, attempts) and provider.calls == attempts)
    verdict(11, fixture_ok and all(got), f"fixture events {len(events)}, flaky scenarios matched {sum(got)}/{len(got)}")


def test_reproducibility(verdict, pipeline_runs):
    a, b = (output_files(r) for r in pipeline_runs)
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    checkpoints = [k for k in a if k.endswith("checkpoint.json")]
    csvs = [k for k in a if k.endswith(".csv")]
    verdict(12, not differing and checkpoints and len(csvs) > 10,
            f"{len(a)} artefacts ({len(checkpoints)} checkpoint, {len(csvs)} CSV), {len(differing)} differ")
