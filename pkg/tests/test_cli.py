import csv
import json
from pathlib import Path

import pytest

from conftest import output_files
from ser_returns.cli import DEFAULT_EVAL, RunConfig, load_config, main
from ser_returns.extraction import article_key

FIXTURES = Path(__file__).parent / "fixtures"


def summary(path):
    return json.loads((path / "summary.json").read_text())


class TestConfig:
    def test_roundtrip(self, tmp_path):
        cfg = RunConfig(mode="weekly", seed=9, evaluation={"k": 7})
        (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
        back = load_config(str(tmp_path / "c.json"))
        assert back == cfg and back.eval("k") == 7 and back.eval("lags") == DEFAULT_EVAL["lags"]

    def test_rejects_unknown_keys_and_modes(self):
        with pytest.raises(ValueError):
            RunConfig.from_dict({"bogus": 1})
        with pytest.raises(ValueError):
            RunConfig.from_dict({"mode": "hourly"})

    def test_model_config_merges_preset(self):
        m = RunConfig(model={"preset": "desk", "epochs": 1}, seed=4).model_config()
        assert m.epochs == 1 and m.dim == 16 and m.seed == 4
        with pytest.raises(ValueError):
            RunConfig(model={"preset": "huge"}).model_config()


class TestPipeline:
    def test_every_step_writes_a_summary(self, pipeline_runs):
        root = pipeline_runs[0]
        for step in ("syn", "train", "predict", "attr", "sort", "fmb", "comove", "topics"):
            s = summary(root / step)
            assert "wall_time_s" in s["metadata"]
        assert summary(root / "predict")["predictions"] == 2400
        assert summary(root / "train")["splits"][0]["train_obs"] + summary(root / "train")["splits"][0]["test_obs"] == 2400
        assert set(summary(root / "sort")["delays"]) == {"k1", "k2"}
        assert "signal" in summary(root / "fmb")["fama_macbeth"]["coef"]

    def test_runs_are_byte_identical(self, pipeline_runs):
        a, b = (output_files(r) for r in pipeline_runs)
        assert a.keys() == b.keys() and len(a) > 25
        assert [k for k in a if a[k] != b[k]] == []

    def test_attribution_outputs(self, pipeline_runs):
        root = pipeline_runs[0] / "attr"
        rows = list(csv.DictReader(open(root / "event_importance.csv")))
        assert rows and [float(r["imp_score"]) for r in rows] == sorted((float(r["imp_score"]) for r in rows),
                                                                        reverse=True)
        recs = list(csv.DictReader(open(root / "event_records.csv")))
        assert min(r["date"] for r in recs) >= "2015-03-01"

    def test_delay_one_matches_predictions(self, pipeline_runs, tmp_path):
        root = pipeline_runs[0]
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"evaluation": {"delays": [1]}}))
        assert main(["sort", "--config", str(cfg), "--predictions", str(root / "train/predictions.csv"),
                     "--out", str(tmp_path)]) == 0
        assert (tmp_path / "long_short_k1.csv").read_bytes() == (root / "sort/long_short_k1.csv").read_bytes()


class TestExtract:
    def _setup(self, tmp_path, completion):
        article = (FIXTURES / "oa2_article.txt").read_text()
        (tmp_path / "replay.json").write_text(json.dumps({article_key(article): completion}))
        with open(tmp_path / "articles.jsonl", "w") as fh:
            fh.write(json.dumps({"id": "oa2", "article": article, "date": "2017-04-20", "stock_id": 7}) + "\n")
        (tmp_path / "c.json").write_text(json.dumps({"provider": {"replay": str(tmp_path / "replay.json")}}))
        return ["extract", "--config", str(tmp_path / "c.json"), "--articles", str(tmp_path / "articles.jsonl")]

    def test_replay_fixture(self, tmp_path):
        argv = self._setup(tmp_path, (FIXTURES / "oa2_completion.txt").read_text())
        assert main(argv + ["--out", str(tmp_path / "x")]) == 0
        assert summary(tmp_path / "x")["ok"] == 1
        rec = json.loads((tmp_path / "x/extracted.jsonl").read_text())
        assert len(rec["events"]) == 4 and rec["events"][0]["subject"] == "President Trump"
        assert main(["build", "--extracted", str(tmp_path / "x/extracted.jsonl"), "--out", str(tmp_path / "b")]) == 0
        built = json.loads((tmp_path / "b/events.jsonl").read_text())
        assert built["stock_id"] == 7 and len(built["events"]) == 4

    def test_garbage_is_discarded(self, tmp_path):
        argv = self._setup(tmp_path, "I cannot help with that.")
        assert main(argv + ["--out", str(tmp_path / "x")]) == 0
        s = summary(tmp_path / "x")
        assert (s["ok"], s["discarded"]) == (0, 1)
        rec = json.loads((tmp_path / "x/extracted.jsonl").read_text())
        assert rec["status"] != "ok" and rec["attempts"] == 3

    def test_empty_input(self, tmp_path):
        argv = self._setup(tmp_path, "[]")
        (tmp_path / "articles.jsonl").write_text("")
        assert main(argv + ["--out", str(tmp_path / "x")]) == 0
        assert summary(tmp_path / "x")["articles"] == 0

    def test_missing_provider_is_an_error(self, tmp_path, capsys):
        argv = self._setup(tmp_path, "[]")
        (tmp_path / "c.json").write_text("{}")
        assert main(argv + ["--out", str(tmp_path / "x")]) == 2
        assert "provider" in capsys.readouterr().err


def test_missing_path_exits_nonzero(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == 2
    assert "--events" in capsys.readouterr().err


def test_bad_config_exits_nonzero(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"mode": "hourly"}))
    assert main(["synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 2
