"""Topic modelling of event context sentences with collapsed Gibbs LDA."""
from __future__ import annotations

import csv
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Hashable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .attribution import AggregateImportance, ImportanceRecord, summarize
from .seeding import rng_for

UNASSIGNED = -1
_ALPHA_TOKEN = re.compile(r"[a-z]+")


@lru_cache(maxsize=1)
def default_stopwords() -> frozenset[str]:
    text = resources.files("ser_returns").joinpath("data/stopwords.txt").read_text(encoding="utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


def context_tokens(text: str, stopwords: Iterable[str] | None = None, min_len: int = 3) -> list[str]:
    stop = default_stopwords() if stopwords is None else frozenset(stopwords)
    return [t for t in _ALPHA_TOKEN.findall(text.lower()) if len(t) >= min_len and t not in stop]


@dataclass
class Corpus:
    vocab: list[str]
    docs: list[np.ndarray]  # token ids per document
    source_index: list[int]  # position of each document in the input texts
    counts: np.ndarray  # corpus frequency per token id
    stopwords: frozenset[str] = field(default_factory=frozenset, repr=False)
    min_len: int = 3

    @property
    def word_index(self) -> dict[str, int]:
        idx = getattr(self, "_word_index", None)
        if idx is None:
            idx = {w: i for i, w in enumerate(self.vocab)}
            self._word_index = idx
        return idx

    def __len__(self) -> int:
        return len(self.docs)


def build_corpus(texts: Sequence[str], stopwords: Iterable[str] | None = None, min_len: int = 3,
                 min_count: int = 2) -> Corpus:
    """Tokenise, drop rare words, and drop documents left empty."""
    stop = default_stopwords() if stopwords is None else frozenset(stopwords)
    toks = [context_tokens(t, stop, min_len) for t in texts]
    freq = Counter(w for doc in toks for w in doc)
    vocab = sorted(w for w, c in freq.items() if c >= min_count)
    index = {w: i for i, w in enumerate(vocab)}
    docs, kept = [], []
    for i, doc in enumerate(toks):
        ids = [index[w] for w in doc if w in index]
        if ids:
            docs.append(np.array(ids, dtype=np.int64))
            kept.append(i)
    counts = np.array([freq[w] for w in vocab], dtype=np.int64)
    return Corpus(vocab, docs, kept, counts, stop, min_len)


@dataclass
class TopicModel:
    n_topics: int
    alpha: float
    beta: float
    phi: np.ndarray  # (K, V)
    theta: np.ndarray  # (docs, K)
    assignments: list[np.ndarray]
    vocab: list[str]
    seed: int
    iterations: int
    stopwords: frozenset[str] = field(default_factory=frozenset, repr=False)
    min_len: int = 3

    def top_terms(self, k: int, n: int = 10) -> list[str]:
        order = sorted(range(len(self.vocab)), key=lambda w: (-self.phi[k, w], self.vocab[w]))
        return [self.vocab[w] for w in order[:n]]


def lda_gibbs(corpus: Corpus, n_topics: int, alpha: float | None = None, beta: float = 0.01,
              iterations: int = 200, seed: int = 0) -> TopicModel:
    """Collapsed Gibbs sampling with symmetric priors (``alpha`` defaults to 50/K).

    Topic-word and document-topic distributions are read off the final
    sweep's counts with the priors added.
    """
    if n_topics < 1:
        raise ValueError("n_topics must be at least 1")
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    if not corpus.docs:
        raise ValueError("corpus is empty")
    K = n_topics
    alpha = 50.0 / K if alpha is None else float(alpha)
    V = len(corpus.vocab)
    D = len(corpus.docs)
    words = np.concatenate(corpus.docs).astype(np.int64)
    docs = np.concatenate([np.full(len(d), i, dtype=np.int64) for i, d in enumerate(corpus.docs)])
    rng = rng_for(seed, "lda")
    z = rng.integers(0, K, size=len(words)).astype(np.int64)
    n_dk = np.zeros((D, K), dtype=np.int64)
    n_kw = np.zeros((K, V), dtype=np.int64)
    n_k = np.zeros(K, dtype=np.int64)
    np.add.at(n_dk, (docs, z), 1)
    np.add.at(n_kw, (z, words), 1)
    np.add.at(n_k, z, 1)
    for _ in range(iterations):
        kernels.gibbs_sweep(words, docs, z, n_dk, n_kw, n_k, rng.random(len(words)), alpha, beta)
    phi = (n_kw + beta) / (n_k[:, None] + V * beta)
    lengths = np.array([len(d) for d in corpus.docs], dtype=np.float64)
    theta = (n_dk + alpha) / (lengths[:, None] + K * alpha)
    bounds = np.cumsum([len(d) for d in corpus.docs])[:-1]
    return TopicModel(K, alpha, beta, phi, theta, np.split(z.copy(), bounds), list(corpus.vocab), seed,
                      iterations, corpus.stopwords, corpus.min_len)


def topic_scores(text: str, model: TopicModel) -> np.ndarray | None:
    """Log-likelihood of the in-vocabulary tokens under each topic; None if there are none."""
    index = {w: i for i, w in enumerate(model.vocab)}
    ids = [index[w] for w in context_tokens(text, model.stopwords, model.min_len) if w in index]
    if not ids:
        return None
    logphi = np.log(model.phi[:, ids])
    return logphi.sum(axis=1) - math.log(model.n_topics)


def assign_topic(text: str, model: TopicModel) -> int:
    """Most likely topic for a context (lowest id on ties), or ``UNASSIGNED``."""
    scores = topic_scores(text, model)
    return UNASSIGNED if scores is None else int(np.argmax(scores))


def topic_label(k: int) -> str:
    return "unassigned" if k == UNASSIGNED else f"topic-{k}"


def topic_importance(records: Iterable[ImportanceRecord],
                     assignment: Mapping[Hashable, int] | Callable[[ImportanceRecord], int],
                     key: Callable[[ImportanceRecord], Hashable] | None = None) -> list[AggregateImportance]:
    """Aggregate record scores by the topic of each record's event.

    ``assignment`` is either a function of the record or a mapping looked up
    with ``key(record)`` (default ``(stock_id, period, feature)``).
    """
    key = key or (lambda r: (r.stock_id, r.period, r.feature))
    groups: dict[int, list[float]] = {}
    missing = 0
    for r in records:
        if callable(assignment):
            k = assignment(r)
        else:
            k = assignment.get(key(r))
            if k is None:
                missing += 1
                continue
        groups.setdefault(k, []).append(r.score)
    if missing:
        raise KeyError(f"{missing} records have no topic assignment")
    out = [summarize(topic_label(k), sorted(v)) for k, v in groups.items()]
    out.sort(key=lambda a: (-a.abs_importance, a.feature))
    return out


def write_topic_csv(rows: Sequence[AggregateImportance], model: TopicModel, path: str | Path, n_terms: int = 10) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["topic_id", "top_terms", "abs_importance", "pos_pct", "neg_pct", "freq"])
        for a in rows:
            k = UNASSIGNED if a.feature == "unassigned" else int(a.feature.split("-")[1])
            terms = "" if k == UNASSIGNED else " ".join(model.top_terms(k, n_terms))
            w.writerow([k, terms, repr(a.abs_importance), repr(a.pos_pct), repr(a.neg_pct), a.freq])
