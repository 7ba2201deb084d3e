"""Synthetic event panels with planted event effects, for tests and demos."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from datetime import date, timedelta

import numpy as np

from .events import CanonicalEvent, ObservationConfig, Panel, Vocabulary, build_observation
from .seeding import rng_for


@dataclass(frozen=True)
class PlantedEvent:
    subject: str
    action: str
    object: str
    effect: float
    prob: float = 0.15


@dataclass(frozen=True)
class SynthSpec:
    n_stocks: int = 200
    n_periods: int = 300
    n_entities: int = 500
    n_actions: int = 100
    mean_events: float = 2.0
    noise_sd: float = 0.02
    planted: tuple[PlantedEvent, ...] = (PlantedEvent("e0001", "a001", "e0002", 0.02),)
    mode: str = "daily"
    days: int = 5
    n_max: int = 8
    start: str = "2015-01-05"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        if "planted" in d:
            d["planted"] = tuple(PlantedEvent(**p) for p in d["planted"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthData:
    panel: Panel
    vocab: Vocabulary
    manifest: dict
    returns: list[tuple[date, int, float]] = field(default_factory=list)


# Word banks for synthetic context sentences; an action's bank is fixed by its id.
THEMES = (
    ("merger", "acquisition", "takeover", "buyout", "stake", "bidder"),
    ("earnings", "revenue", "profit", "guidance", "quarter", "margin"),
    ("lawsuit", "court", "settlement", "regulator", "probe", "fine"),
    ("vaccine", "trial", "drug", "approval", "patient", "dose"),
    ("airline", "flight", "fuel", "route", "fleet", "airport"),
    ("bankruptcy", "creditor", "default", "restructuring", "debt", "filing"),
    ("partnership", "venture", "alliance", "contract", "supplier", "agreement"),
    ("executive", "chief", "board", "appointment", "resignation", "director"),
)


def event_context(vocab: Vocabulary, ev: CanonicalEvent, n_words: int = 4) -> str:
    """Deterministic pseudo-sentence for an event, drawn from its action's theme."""
    bank = THEMES[ev.action % len(THEMES)]
    h = (ev.subject * 7919 + ev.object * 104729 + ev.action) % 1_000_003
    words = [bank[(h // (j + 1) + j) % len(bank)] for j in range(n_words)]
    return " ".join([vocab.entities.key(ev.subject), *words, vocab.entities.key(ev.object)])


def trading_days(start: date, n: int) -> list[date]:
    out = []
    d = start
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d)
        d += timedelta(days=1)
    return out


def make_panel(spec: SynthSpec) -> SynthData:
    """Random event panels where target = sum of planted effects present + noise."""
    rng = rng_for(spec.seed, "synth")
    vocab = Vocabulary()
    for i in range(spec.n_entities):
        vocab.entities.add(f"e{i:04d}")
    for i in range(spec.n_actions):
        vocab.actions.add(f"a{i:03d}")
    planted = [
        (CanonicalEvent(vocab.entities.get(p.subject), vocab.actions.get(p.action), vocab.entities.get(p.object)), p)
        for p in spec.planted
    ]
    ent_lo, act_lo = 2, 2
    D = spec.days if spec.mode == "weekly" else 1
    cfg = ObservationConfig(n_max=spec.n_max, days=D)
    start = date.fromisoformat(spec.start)
    if spec.mode == "weekly":
        periods = [start + timedelta(weeks=w) for w in range(spec.n_periods + 1)]
    else:
        periods = trading_days(start, spec.n_periods + 1)
    obs, targets, returns = [], [], []
    for t in range(spec.n_periods):
        for s in range(spec.n_stocks):
            per_day = []
            signal = 0.0
            for _ in range(D):
                n = min(int(rng.poisson(spec.mean_events)) + 1, spec.n_max)
                evs = [
                    CanonicalEvent(
                        int(rng.integers(ent_lo, ent_lo + spec.n_entities)),
                        int(rng.integers(act_lo, act_lo + spec.n_actions)),
                        int(rng.integers(ent_lo, ent_lo + spec.n_entities)),
                    )
                    for _ in range(n)
                ]
                per_day.append(evs)
            for ev, p in planted:
                if rng.random() < p.prob:
                    day = per_day[int(rng.integers(D))]
                    if ev not in day:
                        pos = int(rng.integers(min(len(day), spec.n_max - 1) + 1))
                        day.insert(pos, ev)
                        del day[spec.n_max :]
                if any(ev in day for day in per_day):
                    signal += p.effect
            y = max(signal + rng.normal(0.0, spec.noise_sd), -0.99)
            raw = per_day[0] if D == 1 else per_day
            obs.append(build_observation(1000 + s, periods[t], raw, y, cfg))
            targets.append(y)
            returns.append((periods[t + 1], 1000 + s, y))
    manifest = {
        "spec": spec.to_dict(),
        "planted": [
            {"label": vocab.event_label(ev), "effect": p.effect, "prob": p.prob,
             "subject": p.subject, "action": p.action, "object": p.object}
            for ev, p in planted
        ],
        "target_mean": float(np.mean(targets)),
        "target_sd": float(np.std(targets, ddof=1)),
        "n_observations": len(obs),
    }
    return SynthData(Panel(obs, spec.mode), vocab, manifest, returns)
