import json
from pathlib import Path

import pytest

from ser_returns.cli import main

SMALL_CONFIG = {
    "mode": "daily",
    "seed": 3,
    "synth": {"n_stocks": 30, "n_periods": 80, "n_entities": 40, "n_actions": 10, "mean_events": 3.0},
    "model": {"preset": "desk", "epochs": 2},
    "evaluation": {"min_freq_event": 1, "min_freq_entity": 1, "k": 5, "min_shocks": 2, "focal_n": 10,
                   "topics": 3, "topic_iterations": 30, "lags": 2},
}


def run_pipeline(root: Path, config: dict = SMALL_CONFIG) -> Path:
    """Run synth through topics into ``root``; every step must exit 0."""
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "config.json"
    cfg.write_text(json.dumps(config))
    r = str(root)
    steps = [
        ["synth", "--out", f"{r}/syn"],
        ["train", "--events", f"{r}/syn/events.jsonl", "--out", f"{r}/train"],
        ["predict", "--events", f"{r}/syn/events.jsonl", "--checkpoint", f"{r}/train/checkpoint.json",
         "--out", f"{r}/predict"],
        ["attribute", "--events", f"{r}/syn/events.jsonl", "--checkpoint", f"{r}/train/checkpoint.json",
         "--start", "2015-03-01", "--out", f"{r}/attr"],
        ["sort", "--predictions", f"{r}/train/predictions.csv", "--factors", f"{r}/syn/factors.csv",
         "--out", f"{r}/sort"],
        ["fmb", "--predictions", f"{r}/predict/predictions.csv", "--returns", f"{r}/syn/returns.csv",
         "--out", f"{r}/fmb"],
        ["comove", "--events", f"{r}/syn/events.jsonl", "--returns", f"{r}/syn/returns.csv",
         "--importance", f"{r}/attr/entity_importance.csv", "--out", f"{r}/comove"],
        ["topics", "--events", f"{r}/syn/events.jsonl", "--records", f"{r}/attr/event_records.csv",
         "--out", f"{r}/topics"],
    ]
    for step in steps:
        code = main([step[0], "--config", str(cfg), *step[1:]])
        assert code == 0, f"{step[0]} exited {code}"
    return root


def output_files(root: Path) -> dict[str, bytes]:
    """Every artefact except summary metadata, keyed by relative path."""
    out = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        data = p.read_bytes()
        if p.name == "summary.json":
            doc = json.loads(data)
            doc.pop("metadata", None)
            data = json.dumps(doc, sort_keys=True).encode()
        out[str(p.relative_to(root))] = data
    return out


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipeline")
    return run_pipeline(base / "a"), run_pipeline(base / "b")


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
