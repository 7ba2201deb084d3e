"""Command-line entry point: ``ser-returns <command> [options]``.

Every command writes ``summary.json`` plus its CSV or JSON artefacts into
the ``--out`` directory. Wall-clock figures live only under the summary's
``metadata`` key so that repeated runs produce identical files otherwise.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Any

import numpy as np

from . import attribution as attr
from . import comovement as cm
from . import econometrics as ec
from . import extraction as ex
from . import panel_io as pio
from . import topics as tp
from .events import rolling_splits
from .model import PRESETS, ModelConfig, load_checkpoint, predict, save_checkpoint, train
from .seeding import rng_for
from .synth import SynthSpec, event_context, make_panel

log = logging.getLogger("ser_returns")

DEFAULT_EVAL = {
    "min_freq_event": 2,
    "min_freq_entity": 5,
    "top_n": 20,
    "lags": 11,
    "n_groups": 5,
    "delays": [1, 2],
    "train_years": None,
    "test_years": 1,
    "extend_tail": False,
    "train_frac": 0.8,
    "k": 15,
    "min_firms": 3,
    "min_shocks": 5,
    "shift": 1,
    "taus": [0, 1, 2, 3],
    "focal_n": 30,
    "thresholds": [0.0015, 0.0010],
    "topics": 8,
    "topic_iterations": 200,
}


@dataclass
class RunConfig:
    mode: str = "daily"
    seed: int = 0
    paths: dict[str, str] = field(default_factory=dict)
    model: dict[str, Any] = field(default_factory=lambda: {"preset": "desk"})
    evaluation: dict[str, Any] = field(default_factory=dict)
    synth: dict[str, Any] = field(default_factory=dict)
    provider: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"mode", "seed", "paths", "model", "evaluation", "synth", "provider"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**copy.deepcopy(d))
        if cfg.mode not in ("daily", "weekly"):
            raise ValueError(f"unknown mode {cfg.mode!r}")
        return cfg

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "seed": self.seed, "paths": self.paths, "model": self.model,
            "evaluation": self.evaluation, "synth": self.synth, "provider": self.provider,
        }

    def eval(self, key: str):
        return self.evaluation.get(key, DEFAULT_EVAL[key])

    def model_config(self) -> ModelConfig:
        block = dict(self.model)
        preset = block.pop("preset", "default")
        if preset not in PRESETS:
            raise ValueError(f"unknown model preset {preset!r}")
        return ModelConfig(**{**PRESETS[preset], **block, "mode": self.mode, "seed": self.seed})

    def path(self, args, name: str, required: bool = True) -> Path | None:
        value = getattr(args, name, None) or self.paths.get(name)
        if value is None:
            if required:
                raise UsageError(f"missing path: pass --{name.replace('_', '-')} or set paths.{name} in the config")
            return None
        p = Path(value)
        return p


class UsageError(Exception):
    pass


def load_config(path: str | None) -> RunConfig:
    if not path:
        return RunConfig()
    return RunConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_summary(out: Path, command: str, body: dict, started: float) -> dict:
    summary = {"command": command, **body, "metadata": {"wall_time_s": round(time.perf_counter() - started, 3)}}
    ec.write_json(_jsonable(summary), out / "summary.json")
    return summary


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return None if math.isnan(x) or math.isinf(x) else x
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, date):
        return x.isoformat()
    return x


# ------------------------------------------------------------------ commands


def cmd_extract(cfg: RunConfig, args, out: Path) -> dict:
    """Articles JSONL (article, date, optional stock_id/id) -> outcomes JSONL."""
    items = pio.read_jsonl(cfg.path(args, "articles"))
    prov = cfg.provider
    if prov.get("replay"):
        provider = ex.ReplayProvider.from_file(prov["replay"])
    elif prov.get("url"):
        provider = ex.ChatCompletionProvider(prov["url"], prov.get("model", ""), prov.get("temperature", 0.0),
                                             prov.get("timeout", 60.0))
    else:
        raise UsageError("provider.replay or provider.url must be configured")
    outcomes = ex.extract_many([(it["article"], it["date"]) for it in items], provider,
                               prov.get("max_attempts", ex.DEFAULT_MAX_ATTEMPTS), prov.get("max_in_flight", 1))
    records = []
    for i, (it, oc) in enumerate(zip(items, outcomes)):
        records.append({
            "id": it.get("id", i), "stock_id": it.get("stock_id"), "date": str(it["date"]),
            "status": oc.status, "attempts": oc.attempts, "events": [e.to_dict() for e in oc.events],
        })
        if not oc.ok:
            log.warning("article %s discarded after %d attempts", it.get("id", i), oc.attempts)
    pio.write_jsonl(records, out / "extracted.jsonl")
    ok = sum(r["status"] == "ok" for r in records)
    return {"articles": len(records), "ok": ok, "discarded": len(records) - ok}


def cmd_synth(cfg: RunConfig, args, out: Path) -> dict:
    spec = SynthSpec.from_dict({"seed": cfg.seed, "mode": cfg.mode, **cfg.synth})
    data = make_panel(spec)
    pio.write_jsonl(pio.panel_records(data.panel, data.vocab, event_context), out / "events.jsonl")
    pio.write_returns(data.returns, out / "returns.csv")
    dates = sorted({d for d, _, _ in data.returns})
    rng = rng_for(spec.seed, "factors")
    factors = {c: rng.normal(0.0, 0.01, len(dates)) for c in pio.FACTOR_COLUMNS}
    pio.write_factors(dates, factors, out / "factors.csv")
    ec.write_json(data.manifest, out / "manifest.json")
    return {"observations": len(data.panel), "manifest": data.manifest}


def cmd_build(cfg: RunConfig, args, out: Path) -> dict:
    """Extraction outcomes -> observation JSONL with next-period targets."""
    recs = pio.read_jsonl(cfg.path(args, "extracted"))
    grouped: dict[tuple[int, str], dict] = {}
    skipped = 0
    for r in recs:
        if r.get("status", "ok") != "ok" or r.get("stock_id") is None:
            skipped += 1
            continue
        when = date.fromisoformat(str(r["date"]))
        if cfg.mode == "weekly":
            day_index = when.weekday() + 1
            when = date.fromordinal(when.toordinal() - when.weekday())
        key = (int(r["stock_id"]), when.isoformat())
        rec = grouped.setdefault(key, {"stock_id": key[0], "date": key[1], "events": []})
        for e in r["events"]:
            e = dict(e)
            if cfg.mode == "weekly":
                if day_index > 5:
                    continue
                e["day_index"] = day_index
            rec["events"].append(e)
    records = [grouped[k] for k in sorted(grouped)]
    filled = 0
    returns_path = cfg.path(args, "returns", required=False)
    if returns_path:
        filled = pio.next_period_targets(records, pio.read_returns(returns_path), cfg.mode)
    pio.write_jsonl(records, out / "events.jsonl")
    return {"observations": len(records), "targets_filled": filled, "skipped_articles": skipped}


def _load_panel(cfg: RunConfig, args, mcfg: ModelConfig | None = None) -> pio.BuiltPanel:
    mcfg = mcfg or cfg.model_config()
    return pio.build_panel(pio.read_jsonl(cfg.path(args, "events")), cfg.mode, mcfg.n_max, mcfg.days)


def _splits(cfg: RunConfig, panel):
    years = cfg.eval("train_years")
    if years:
        return rolling_splits(panel, years, cfg.eval("test_years"), cfg.eval("extend_tail"))
    periods = panel.periods
    cut = periods[min(int(len(periods) * cfg.eval("train_frac")), len(periods) - 1)]
    return [(panel.subset(lambda o: o.period < cut), panel.subset(lambda o: o.period >= cut))]


def _prediction_rows(model, panel, vocab) -> list[dict]:
    obs = list(panel)
    pred = predict(model, obs, vocab)
    return [{"date": o.period, "stock_id": o.stock_id, "signal": float(p), "ret": o.target_return}
            for o, p in zip(obs, pred)]


def cmd_train(cfg: RunConfig, args, out: Path) -> dict:
    mcfg = cfg.model_config()
    built = _load_panel(cfg, args, mcfg)
    splits = _splits(cfg, built.panel)
    rows, reports = [], []
    for i, (tr, te) in enumerate(splits):
        seed = cfg.seed if len(splits) == 1 else int(rng_for(cfg.seed, f"split-{i}").integers(2**31))
        rep = train(tr, built.vocab, replace(mcfg, seed=seed))
        name = "checkpoint.json" if len(splits) == 1 else f"checkpoint_{i:02d}.json"
        save_checkpoint(rep.model, out / name)
        test_rows = _prediction_rows(rep.model, te, built.vocab)
        rows.extend(test_rows)
        y = np.array([r["ret"] for r in test_rows])
        p = np.array([r["signal"] for r in test_rows])
        reports.append({
            "split": i, "checkpoint": name, "train_obs": len(tr), "test_obs": len(te),
            "test_start": te.periods[0] if len(te) else None,
            "epoch_mse": rep.epoch_mse,
            "oos_mse": float(np.mean((p - y) ** 2)) if len(y) else None,
            "oos_target_var": float(np.var(y)) if len(y) else None,
        })
    pio.write_signals(rows, out / "predictions.csv")
    return {"splits": reports, "model": mcfg.to_dict()}


def cmd_predict(cfg: RunConfig, args, out: Path) -> dict:
    model = load_checkpoint(cfg.path(args, "checkpoint"))
    built = _load_panel(cfg, args, model.cfg)
    panel = built.panel
    if args.start:
        start = date.fromisoformat(args.start)
        panel = panel.subset(lambda o: o.period >= start)
    rows = _prediction_rows(model, panel, built.vocab)
    pio.write_signals(rows, out / "predictions.csv")
    return {"predictions": len(rows)}


def cmd_attribute(cfg: RunConfig, args, out: Path) -> dict:
    model = load_checkpoint(cfg.path(args, "checkpoint"))
    built = _load_panel(cfg, args, model.cfg)
    obs = list(built.panel)
    if args.start:
        start = date.fromisoformat(args.start)
        obs = [o for o in obs if o.period >= start]
    top_n = cfg.eval("top_n")
    summary = {}
    for level, min_freq in (("event", cfg.eval("min_freq_event")), ("entity", cfg.eval("min_freq_entity"))):
        recs = attr.local_importance(model, obs, built.vocab, level=level)
        agg = attr.aggregate(recs, min_freq=min_freq)
        attr.write_records_csv(recs, out / f"{level}_records.csv")
        attr.write_importance_csv(agg, out / f"{level}_importance.csv")
        for direction in ("positive", "negative"):
            attr.write_importance_csv(attr.polarity_tables(agg, top_n, direction), out / f"{level}_{direction}.csv")
        summary[level] = {
            "records": len(recs), "features": len(agg),
            "top": [{"feature": a.feature, "imp_score": a.abs_importance, "pos_pct": a.pos_pct, "freq": a.freq}
                    for a in agg[:5]],
        }
    return {"observations": len(obs), **summary}


def _signal_panel(path: Path, controls: dict[str, dict] | None = None) -> ec.SignalPanel:
    rows = pio.read_signals(path)
    ctrl = {}
    if controls:
        for name, table in controls.items():
            ctrl[name] = [table.get((r["date"], r["stock_id"]), math.nan) for r in rows]
    return ec.SignalPanel([r["date"] for r in rows], [r["stock_id"] for r in rows],
                          [r["signal"] for r in rows], [r["ret"] for r in rows], ctrl)


def cmd_sort(cfg: RunConfig, args, out: Path) -> dict:
    panel = _signal_panel(cfg.path(args, "predictions"))
    ppy = ec.PERIODS_PER_YEAR[cfg.mode]
    fpath = cfg.path(args, "factors", required=False)
    factors = pio.read_factors(fpath) if fpath else None
    result = {}
    for k in cfg.eval("delays"):
        series = ec.delayed_series(panel, k, cfg.eval("n_groups"), ppy)
        ec.write_series_csv(series, out / f"long_short_k{k}.csv")
        entry: dict[str, Any] = {"periods": len(series.values)}
        if len(series.values) >= 2:
            entry["performance"] = ec.performance(series).to_dict()
        if factors is not None and len(series.values) >= 8:
            fdates, fcols = factors
            pos = {d: i for i, d in enumerate(fdates)}
            keep = [i for i, p in enumerate(series.periods) if p in pos]
            F = np.column_stack([fcols[c][[pos[series.periods[i]] for i in keep]] for c in ec.FACTOR_NAMES])
            a = ec.factor_alpha(series.values[keep], F, ppy)
            entry["alpha"] = {"alpha_annual": a.alpha_annual, "t_stat": a.t_stat, "loadings": a.loadings}
        result[f"k{k}"] = entry
    return {"delays": result}


def _trailing_controls(returns_path: Path) -> dict[str, dict]:
    mat = cm.ReturnMatrix.from_rows(pio.read_returns(returns_path))
    means = ec.trailing_means(mat.values)
    return {
        name: {(d, f): float(arr[i, j]) for i, d in enumerate(mat.calendar) for j, f in enumerate(mat.firms)}
        for name, arr in means.items()
    }


def cmd_fmb(cfg: RunConfig, args, out: Path) -> dict:
    rpath = cfg.path(args, "returns", required=False)
    controls = _trailing_controls(rpath) if rpath else None
    panel = _signal_panel(cfg.path(args, "predictions"), controls)
    names = ["signal"]
    if controls:
        # rows lacking a full trailing window are left out
        ok = ~np.any(np.isnan(np.column_stack(list(panel.controls.values()))), axis=1)
        panel = ec.SignalPanel(panel.periods[ok], panel.stock_ids[ok], panel.signal[ok], panel.ret[ok],
                               {k: v[ok] for k, v in panel.controls.items()})
        names += sorted(panel.controls)
    res = ec.fama_macbeth(panel, names, standardize=["signal"], lags=cfg.eval("lags"))
    ec.write_fm_csv(res, out / "fama_macbeth.csv")
    return {"fama_macbeth": res.to_dict()}


def _read_importance(path: Path) -> dict[str, float]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {r["feature"]: float(r["imp_score"]) for r in csv.DictReader(fh)}


def cmd_comove(cfg: RunConfig, args, out: Path) -> dict:
    built = _load_panel(cfg, args)
    returns = cm.ReturnMatrix.from_rows(pio.read_returns(cfg.path(args, "returns")))
    scores = _read_importance(cfg.path(args, "importance"))
    focal = sorted(scores, key=lambda e: (-scores[e], e))[: cfg.eval("focal_n")]
    mentions = cm.mentions_from_panel(built.panel, built.vocab)
    tf, n_docs = cm.entity_counts(mentions)
    expo = cm.exposure(tf, n_docs)
    portfolios = {e: cm.top_k_portfolio(e, expo, cfg.eval("k")) for e in focal}
    shocks = cm.shock_calendar(portfolios, mentions, returns.calendar, cfg.eval("min_firms"),
                               cfg.eval("shift"), cfg.eval("min_shocks"))
    kept = {e: scores[e] for e in shocks}
    labels = {
        "equal": cm.group_entities(kept, "equal"),
        "value": cm.group_entities(kept, "value", tuple(cfg.eval("thresholds"))),
    }
    results = []
    for e in sorted(shocks):
        for tau in cfg.eval("taus"):
            results.append(cm.delta_rho(returns, portfolios[e], shocks[e], tau, e))
    cm.write_table_csv(cm.comovement_table(results, labels), out / "comovement_table.csv")
    with open(out / "comovement_entities.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity", "tau", "rho_event", "rho_base", "delta_rho", "p_value", "n_shocks", "group_equal", "group_value"])
        for r in results:
            w.writerow([r.entity, r.tau, repr(r.rho_event), repr(r.rho_base), repr(r.delta), repr(r.p_value),
                        r.n_shocks, labels["equal"][r.entity], labels["value"][r.entity]])
    loo_entity = None
    ranked = sorted(kept, key=lambda e: (-kept[e], e))
    for e in ranked:
        r1 = next((r for r in results if r.entity == e and r.tau == 1), None)
        if r1 is not None and r1.n_shocks >= 2:
            cm.write_loo_csv(e, cm.leave_one_out(r1), out / "leave_one_out.csv")
            loo_entity = e
            break
    if ranked:
        triplets = [
            (built.vocab.entities.key(ev.subject), built.vocab.actions.key(ev.action), built.vocab.entities.key(ev.object))
            for o in built.panel if o.stock_id in set(portfolios[ranked[0]]) for ev in o.all_events()
        ]
        cm.write_edges_csv(cm.two_hop_edges(triplets, ranked[0]), out / "entity_graph_edges.csv")
    return {"focal_entities": len(focal), "retained_entities": len(shocks), "leave_one_out_entity": loo_entity,
            "n_docs": n_docs}


def cmd_topics(cfg: RunConfig, args, out: Path) -> dict:
    built = _load_panel(cfg, args)
    with open(cfg.path(args, "records"), newline="", encoding="utf-8") as fh:
        recs = [
            attr.ImportanceRecord(r["feature"], r["role"], int(r["stock_id"]), date.fromisoformat(r["date"]),
                                  float(r["score"]), int(r["day"]))
            for r in csv.DictReader(fh) if r["role"] == "event"
        ]
    texts = sorted(set(built.contexts.values()))
    corpus = tp.build_corpus(texts)
    model = tp.lda_gibbs(corpus, cfg.eval("topics"), iterations=cfg.eval("topic_iterations"), seed=cfg.seed)
    by_text = {t: tp.assign_topic(t, model) for t in texts}
    assignment = {k: by_text[t] for k, t in built.contexts.items()}
    rows = tp.topic_importance(recs, assignment)
    tp.write_topic_csv(rows, model, out / "topics.csv")
    return {"documents": len(corpus), "vocabulary": len(corpus.vocab), "topics": model.n_topics,
            "ranked": [a.feature for a in rows[:10]]}


COMMANDS = {
    "extract": cmd_extract, "synth": cmd_synth, "build": cmd_build, "train": cmd_train,
    "predict": cmd_predict, "attribute": cmd_attribute, "sort": cmd_sort, "fmb": cmd_fmb,
    "comove": cmd_comove, "topics": cmd_topics,
}

PATH_FLAGS = ("articles", "extracted", "events", "returns", "factors", "checkpoint", "predictions",
              "importance", "records")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ser-returns", description="Event-driven return prediction toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip().splitlines()[0] if fn.__doc__ else None)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--mode", choices=("daily", "weekly"))
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")
        for flag in PATH_FLAGS:
            p.add_argument(f"--{flag}")
        if name in ("predict", "attribute"):
            p.add_argument("--start", help="only observations on or after this ISO date")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        cfg = load_config(args.config)
        if args.mode:
            cfg.mode = args.mode
        if args.seed is not None:
            cfg.seed = args.seed
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        body = COMMANDS[args.command](cfg, args, out)
        summary = write_summary(out, args.command, body, started)
    except (UsageError, ValueError, KeyError, FileNotFoundError, ex.ProviderError) as exc:
        print(f"ser-returns {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(_jsonable({k: v for k, v in summary.items() if k != "metadata"}), sort_keys=True)[:2000])
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
