import csv
from datetime import date

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ser_returns.attribution import ImportanceRecord
from ser_returns.topics import (
    UNASSIGNED,
    assign_topic,
    build_corpus,
    context_tokens,
    default_stopwords,
    lda_gibbs,
    topic_importance,
    topic_label,
    topic_scores,
    write_topic_csv,
)

BANK_A = ["merger", "acquisition", "takeover", "buyout", "stake", "bidder"]
BANK_B = ["lawsuit", "court", "settlement", "regulator", "probe", "fine"]


def two_bank_texts(seed, n_docs=40, length=8):
    rng = np.random.default_rng(seed)
    texts, truth = [], []
    for i in range(n_docs):
        bank = BANK_A if i % 2 == 0 else BANK_B
        texts.append(" ".join(rng.choice(bank, length)))
        truth.append(i % 2)
    return texts, truth


def purity(model, truth):
    labels = model.theta.argmax(axis=1)
    hits = 0
    for k in range(model.n_topics):
        members = [t for t, l in zip(truth, labels) if l == k]
        if members:
            hits += max(members.count(0), members.count(1))
    return hits / len(truth)


def test_tokenizer():
    assert context_tokens("The Fed raised rates, again! It's 2021.") == ["fed", "raised", "rates"]
    assert "the" in default_stopwords() and len(default_stopwords()) > 100
    assert context_tokens("ab abc", stopwords=[], min_len=3) == ["abc"]


def test_corpus_drops_rare_words_and_empty_docs():
    corpus = build_corpus(["merger merger court", "zebra", "court merger"], min_count=2)
    assert corpus.vocab == ["court", "merger"]
    assert corpus.source_index == [0, 2]
    assert corpus.counts.tolist() == [2, 3]


def test_two_vocabularies_separate():
    # the symmetric prior 50/K is strong, so documents need some length to pull topics apart
    texts, truth = two_bank_texts(0, length=20)
    model = lda_gibbs(build_corpus(texts), 2, iterations=200, seed=0)
    assert purity(model, truth) >= 0.9
    tops = [set(model.top_terms(k, 6)) for k in range(2)]
    assert {frozenset(t) for t in tops} == {frozenset(BANK_A), frozenset(BANK_B)}


def test_distributions_normalised():
    texts, _ = two_bank_texts(1)
    model = lda_gibbs(build_corpus(texts), 3, iterations=20, seed=1)
    np.testing.assert_allclose(model.phi.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(model.theta.sum(axis=1), 1.0, atol=1e-12)
    assert model.alpha == pytest.approx(50 / 3)


def test_deterministic_per_seed():
    texts, _ = two_bank_texts(2)
    corpus = build_corpus(texts)
    a = lda_gibbs(corpus, 2, iterations=30, seed=4)
    b = lda_gibbs(corpus, 2, iterations=30, seed=4)
    assert np.array_equal(a.phi, b.phi) and all(np.array_equal(x, y) for x, y in zip(a.assignments, b.assignments))


def test_single_topic():
    texts, _ = two_bank_texts(3)
    model = lda_gibbs(build_corpus(texts), 1, iterations=5)
    assert all((z == 0).all() for z in model.assignments)


@pytest.mark.parametrize("kw", [dict(n_topics=0), dict(n_topics=2, iterations=0)])
def test_bad_arguments(kw):
    texts, _ = two_bank_texts(0)
    with pytest.raises(ValueError):
        lda_gibbs(build_corpus(texts), **kw)


def test_empty_corpus():
    with pytest.raises(ValueError):
        lda_gibbs(build_corpus(["a b"]), 2)


def test_assignment():
    texts, _ = two_bank_texts(0, length=20)
    model = lda_gibbs(build_corpus(texts), 2, iterations=200, seed=0)
    k_a = assign_topic("merger takeover bidder", model)
    k_b = assign_topic("court probe settlement", model)
    assert {k_a, k_b} == {0, 1}
    assert assign_topic("completely unknown words", model) == UNASSIGNED
    scores = topic_scores("merger", model)
    w = model.vocab.index("merger")
    np.testing.assert_allclose(scores, np.log(model.phi[:, w]) - np.log(2))
    assert topic_label(UNASSIGNED) == "unassigned" and topic_label(3) == "topic-3"


@settings(max_examples=20, deadline=None)
@given(st.lists(st.sampled_from(BANK_A + BANK_B + ["unknown"]), min_size=1, max_size=8))
def test_assignment_is_argmax(words):
    texts, _ = two_bank_texts(5)
    model = lda_gibbs(build_corpus(texts), 2, iterations=10, seed=5)
    text = " ".join(words)
    k = assign_topic(text, model)
    s = topic_scores(text, model)
    assert k == (UNASSIGNED if s is None else int(np.argmax(s)))


def test_topic_importance_and_csv(tmp_path):
    d = date(2021, 1, 4)
    recs = [ImportanceRecord("ev1", "event", 1, d, 0.2), ImportanceRecord("ev2", "event", 1, d, -0.4),
            ImportanceRecord("ev3", "event", 2, d, 0.1)]
    mapping = {(1, d, "ev1"): 0, (1, d, "ev2"): 0, (2, d, "ev3"): UNASSIGNED}
    rows = topic_importance(recs, mapping)
    assert [r.feature for r in rows] == ["topic-0", "unassigned"]
    assert rows[0].abs_importance == pytest.approx(0.3) and rows[0].pos_pct == pytest.approx(1 / 3)
    assert topic_importance(recs, lambda r: 1)[0].freq == 3
    with pytest.raises(KeyError):
        topic_importance(recs, {})
    texts, _ = two_bank_texts(0)
    model = lda_gibbs(build_corpus(texts), 2, iterations=50, seed=0)
    write_topic_csv(rows, model, tmp_path / "t.csv", n_terms=3)
    out = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert out[0]["topic_id"] == "0" and len(out[0]["top_terms"].split()) == 3
    assert out[1]["topic_id"] == "-1" and out[1]["top_terms"] == ""
