"""Collapsed Gibbs LDA over corpus token streams; topic vectors feed DTM."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np


class TopicsError(ValueError):
    pass


@dataclass
class TopicModel:
    num_topics: int
    alpha: float
    beta: float
    topic_word_counts: np.ndarray  # (K, vocab_size) int64
    topic_counts: np.ndarray  # (K,) int64
    vocab_size: int

    def validate(self) -> None:
        if (self.topic_word_counts < 0).any() or (self.topic_counts < 0).any():
            raise TopicsError("negative counts in topic model")
        if not np.array_equal(self.topic_word_counts.sum(axis=1), self.topic_counts):
            raise TopicsError("topic_counts inconsistent with topic_word_counts")


def _sample_index(probs: np.ndarray, rng) -> int:
    cum = np.cumsum(probs)
    return int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))


def fit_lda(docs, vocab_size, num_topics=30, alpha=None, beta=0.01,
            iterations=500, seed=0) -> TopicModel:
    """Fit LDA by collapsed Gibbs sampling over token-id lists.

    ``alpha`` defaults to 50/K. Deterministic for a fixed seed; counts are
    taken after the final sweep.
    """
    docs = [np.asarray(d, dtype=np.int64) for d in docs]
    total = sum(len(d) for d in docs)
    if not docs or total == 0:
        raise TopicsError("empty corpus")
    if num_topics < 2:
        raise TopicsError("need at least 2 topics")
    if iterations < 1:
        raise TopicsError("iterations must be >= 1")
    for d in docs:
        if len(d) and (d.min() < 0 or d.max() >= vocab_size):
            raise TopicsError("token id outside vocabulary")
    if alpha is None:
        alpha = 50.0 / num_topics

    rng = np.random.default_rng(seed)
    K = num_topics
    nkw = np.zeros((K, vocab_size), dtype=np.int64)
    nk = np.zeros(K, dtype=np.int64)
    ndk = [np.zeros(K, dtype=np.int64) for _ in docs]
    assignments = []
    for d, doc in enumerate(docs):
        z = rng.integers(0, K, size=len(doc))
        assignments.append(z)
        for w, k in zip(doc, z):
            nkw[k, w] += 1
            nk[k] += 1
            ndk[d][k] += 1

    beta_v = beta * vocab_size
    for _ in range(iterations):
        for d, doc in enumerate(docs):
            z = assignments[d]
            nd = ndk[d]
            for i, w in enumerate(doc):
                k_old = z[i]
                nkw[k_old, w] -= 1
                nk[k_old] -= 1
                nd[k_old] -= 1
                probs = (nkw[:, w] + beta) / (nk + beta_v) * (nd + alpha)
                k_new = _sample_index(probs, rng)
                z[i] = k_new
                nkw[k_new, w] += 1
                nk[k_new] += 1
                nd[k_new] += 1

    model = TopicModel(K, float(alpha), float(beta), nkw, nk, vocab_size)
    model.validate()
    return model


def infer_topics(doc, model: TopicModel, iterations=50, seed=0) -> np.ndarray:
    """Infer a document's topic distribution with topic-word counts frozen.

    Out-of-vocabulary ids are skipped; a document with none left is an error.
    Returns θ with θ_k ≥ 0 and Σθ = 1.
    """
    doc = np.asarray(doc, dtype=np.int64)
    if len(doc) == 0:
        raise TopicsError("empty document")
    doc = doc[(doc >= 0) & (doc < model.vocab_size)]
    if len(doc) == 0:
        raise TopicsError("document contains only out-of-vocabulary ids")

    rng = np.random.default_rng(seed)
    K = model.num_topics
    alpha, beta = model.alpha, model.beta
    beta_v = beta * model.vocab_size
    word_weight = (model.topic_word_counts + beta) / (model.topic_counts + beta_v)[:, None]

    nd = np.zeros(K, dtype=np.int64)
    z = rng.integers(0, K, size=len(doc))
    for k in z:
        nd[k] += 1
    for _ in range(iterations):
        for i, w in enumerate(doc):
            nd[z[i]] -= 1
            probs = word_weight[:, w] * (nd + alpha)
            k_new = _sample_index(probs, rng)
            z[i] = k_new
            nd[k_new] += 1

    theta = (nd + alpha) / (len(doc) + K * alpha)
    return theta / theta.sum()


def save_topic_model(model: TopicModel, path: str) -> None:
    payload = {
        "num_topics": model.num_topics,
        "alpha": model.alpha,
        "beta": model.beta,
        "vocab_size": model.vocab_size,
        "topic_word_counts": model.topic_word_counts.tolist(),
        "topic_counts": model.topic_counts.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_topic_model(path: str) -> TopicModel:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    model = TopicModel(
        num_topics=payload["num_topics"],
        alpha=payload["alpha"],
        beta=payload["beta"],
        topic_word_counts=np.asarray(payload["topic_word_counts"], dtype=np.int64),
        topic_counts=np.asarray(payload["topic_counts"], dtype=np.int64),
        vocab_size=payload["vocab_size"],
    )
    model.validate()
    return model


def write_doc_topics(doc_thetas: dict, path: str) -> None:
    """Write ``doc_topics.jsonl``: one {"id", "theta"} object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id, theta in doc_thetas.items():
            fh.write(json.dumps(
                {"id": doc_id, "theta": [float(t) for t in theta]},
                separators=(",", ":"),
            ) + "\n")


def read_doc_topics(path: str) -> dict:
    if not os.path.exists(path):
        raise TopicsError(f"missing topic file: {path}")
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out[obj["id"]] = np.asarray(obj["theta"], dtype=np.float64)
    return out
