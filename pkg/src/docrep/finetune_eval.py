"""Fine-tuning heads, inference-time modality ablations, and evaluation metrics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .config import CLS_ID, IGNORE_INDEX, PAD_ID, SEP_ID, ModelConfig
from .corpus import encode_document
from .embedder import AblationMask
from .model import DocModel, collate
from .trainer import derive_seed


class EvalError(ValueError):
    pass


@dataclass
class MetricsReport:
    accuracy: Optional[float] = None
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None
    per_class: dict = field(default_factory=dict)
    map_score: Optional[float] = None
    ndcg: dict = field(default_factory=dict)
    ablation: Optional[dict] = None

    def to_dict(self) -> dict:
        out = {}
        for name in ("accuracy", "precision", "recall", "f1", "map_score"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        if self.per_class:
            out["per_class"] = self.per_class
        if self.ndcg:
            out["ndcg"] = {str(k): v for k, v in self.ndcg.items()}
        if self.ablation is not None:
            out["ablation"] = self.ablation
        return out


def finetune(model: DocModel, docs, task: str, steps: int, batch_size: int = 8,
             lr: float = 3e-5, weight_decay: float = 0.01, seed: int = 0,
             log_fn=None) -> list:
    """Supervised fine-tuning of the classification or token-labeling head."""
    if task not in ("classification", "token_labeling"):
        raise EvalError(f"unknown fine-tuning task {task!r}")
    docs = list(docs)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)
    history = []
    model.train()
    for step in range(steps):
        rng = np.random.default_rng(derive_seed(seed, step))
        idx = rng.choice(len(docs), size=batch_size, replace=len(docs) < batch_size)
        batch = collate([encode_document(docs[i], model.cfg) for i in idx],
                        model.cfg.dtype)
        hidden = model(batch)
        if task == "classification":
            if batch.categories is None:
                raise EvalError("classification fine-tuning needs document categories")
            loss = F.cross_entropy(
                model.clf_head(model.cls_hidden(hidden)), batch.categories
            )
        else:
            if batch.token_labels is None:
                raise EvalError("token-labeling fine-tuning needs token labels")
            logits = model.token_head(hidden)
            loss = F.cross_entropy(
                logits.reshape(-1, logits.shape[-1]),
                batch.token_labels.reshape(-1),
                ignore_index=IGNORE_INDEX,
            )
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        value = float(loss.detach())
        history.append(value)
        if log_fn is not None:
            log_fn(f"step={step + 1} task={task} loss={value:.6f}")
    model.eval()
    return history


def classify_document(model: DocModel, doc, ablation: AblationMask | None = None):
    """Predict a document's category at CLS; returns (class id, probabilities)."""
    model.eval()
    batch = collate([encode_document(doc, model.cfg)], model.cfg.dtype)
    with torch.no_grad():
        hidden = model(batch, ablation=ablation)
        probs = torch.softmax(model.clf_head(model.cls_hidden(hidden)), dim=-1)[0]
    return int(probs.argmax()), probs.numpy()


def _token_positions(batch, row: int):
    ids = batch.input_ids[row]
    mask = (batch.attention_mask[row] == 1) & (ids != CLS_ID) & (ids != SEP_ID) \
        & (ids != PAD_ID)
    return torch.nonzero(mask, as_tuple=False).squeeze(1)


def label_tokens(model: DocModel, doc, ablation: AblationMask | None = None):
    """Per-token class predictions at real token positions only."""
    model.eval()
    batch = collate([encode_document(doc, model.cfg)], model.cfg.dtype)
    with torch.no_grad():
        hidden = model(batch, ablation=ablation)
        preds = model.token_head(hidden).argmax(dim=-1)[0]
    positions = _token_positions(batch, 0)
    return [(int(pos), int(preds[pos])) for pos in positions]


def extract_embedding(model: DocModel, doc) -> np.ndarray:
    """Final-layer CLS hidden state used as the retrieval embedding."""
    model.eval()
    batch = collate([encode_document(doc, model.cfg)], model.cfg.dtype)
    with torch.no_grad():
        hidden = model(batch)
    return model.cls_hidden(hidden)[0].numpy()


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise EvalError("cosine distance undefined for zero vectors")
    return float(1.0 - np.dot(a, b) / (na * nb))


def retrieve(query_vec: np.ndarray, index_vecs: np.ndarray, k: Optional[int] = None):
    """Rank index vectors by ascending cosine distance, ties by ascending id.

    Returns (ranked ids, distances in ranked order).
    """
    index_vecs = np.asarray(index_vecs)
    norms = np.linalg.norm(index_vecs, axis=1)
    qn = np.linalg.norm(query_vec)
    if qn == 0 or (norms == 0).any():
        raise EvalError("cosine distance undefined for zero vectors")
    dists = 1.0 - index_vecs @ query_vec / (norms * qn)
    order = np.lexsort((np.arange(len(dists)), dists))
    if k is not None:
        order = order[:k]
    return order, dists[order]


def weighted_prf(y_true, y_pred):
    """Support-weighted precision/recall/F1 plus per-class rows."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if len(y_true) == 0 or len(y_true) != len(y_pred):
        raise EvalError("label sequences must be non-empty and equal length")
    classes = np.unique(np.concatenate([y_true, y_pred]))
    per_class = {}
    total = len(y_true)
    precision = recall = f1 = 0.0
    for c in classes:
        tp = int(((y_true == c) & (y_pred == c)).sum())
        fp = int(((y_true != c) & (y_pred == c)).sum())
        fn = int(((y_true == c) & (y_pred != c)).sum())
        support = tp + fn
        p = tp / (tp + fp) if tp + fp > 0 else 0.0
        r = tp / support if support > 0 else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        per_class[int(c)] = {
            "precision": p, "recall": r, "f1": f, "support": support,
        }
        weight = support / total
        precision += weight * p
        recall += weight * r
        f1 += weight * f
    return precision, recall, f1, per_class


def average_precision(relevances) -> float:
    relevances = np.asarray(relevances)
    hits = np.nonzero(relevances)[0]
    if len(hits) == 0:
        raise EvalError("average precision undefined with no relevant items")
    precisions = [(i + 1) / (rank + 1) for i, rank in enumerate(hits)]
    return float(np.mean(precisions))


def ndcg_at_k(relevances, k: int) -> float:
    relevances = np.asarray(relevances, dtype=np.float64)
    discounts = 1.0 / np.log2(np.arange(2, len(relevances) + 2))
    dcg = float((relevances[:k] * discounts[:k]).sum())
    ideal = np.sort(relevances)[::-1]
    idcg = float((ideal[:k] * discounts[:k]).sum())
    return dcg / idcg if idcg > 0 else 0.0


def map_ndcg(rankings, k_values=(1, 10)):
    """MAP and NDCG@k over per-query binary relevance lists in rank order.

    Queries with no relevant item are excluded (with a warning).
    """
    usable = [r for r in rankings if np.asarray(r).sum() > 0]
    skipped = len(rankings) - len(usable)
    if skipped:
        warnings.warn(f"excluded {skipped} queries with no relevant items")
    if not usable:
        raise EvalError("no queries with relevant items")
    mean_ap = float(np.mean([average_precision(r) for r in usable]))
    ndcg = {k: float(np.mean([ndcg_at_k(r, k) for r in usable])) for k in k_values}
    return mean_ap, ndcg


def evaluate_classification(model: DocModel, docs,
                            ablation: AblationMask | None = None) -> MetricsReport:
    y_true, y_pred = [], []
    for doc in docs:
        if doc.category is None:
            raise EvalError(f"document {doc.id!r} has no category")
        pred, _ = classify_document(model, doc, ablation)
        y_true.append(doc.category)
        y_pred.append(pred)
    precision, recall, f1, per_class = weighted_prf(y_true, y_pred)
    accuracy = float(np.mean(np.asarray(y_true) == np.asarray(y_pred)))
    report = MetricsReport(accuracy=accuracy, precision=precision,
                           recall=recall, f1=f1, per_class=per_class)
    if ablation is not None:
        report.ablation = ablation.__dict__.copy()
    return report


def evaluate_token_labeling(model: DocModel, docs,
                            ablation: AblationMask | None = None) -> MetricsReport:
    y_true, y_pred = [], []
    for doc in docs:
        batch = collate([encode_document(doc, model.cfg)], model.cfg.dtype)
        if batch.token_labels is None:
            raise EvalError(f"document {doc.id!r} has no token labels")
        preds = dict(label_tokens(model, doc, ablation))
        labels = batch.token_labels[0]
        for pos, pred in preds.items():
            if labels[pos] != IGNORE_INDEX:
                y_true.append(int(labels[pos]))
                y_pred.append(pred)
    precision, recall, f1, per_class = weighted_prf(y_true, y_pred)
    accuracy = float(np.mean(np.asarray(y_true) == np.asarray(y_pred)))
    report = MetricsReport(accuracy=accuracy, precision=precision,
                           recall=recall, f1=f1, per_class=per_class)
    if ablation is not None:
        report.ablation = ablation.__dict__.copy()
    return report


def evaluate_retrieval(model: DocModel, query_docs, index_docs,
                       k_values=(1, 10)):
    """Same-category retrieval over fine-tuned CLS embeddings.

    Returns (MetricsReport, rankings) where rankings maps each query id to
    its ranked index-document ids and distances.
    """
    index_vecs = np.stack([extract_embedding(model, d) for d in index_docs])
    index_cats = np.asarray([d.category for d in index_docs])
    relevance_lists = []
    rankings = []
    for doc in query_docs:
        qvec = extract_embedding(model, doc)
        order, dists = retrieve(qvec, index_vecs)
        relevance_lists.append((index_cats[order] == doc.category).astype(int))
        rankings.append({
            "query": doc.id,
            "ranked_ids": [index_docs[i].id for i in order],
            "distances": [float(x) for x in dists],
        })
    mean_ap, ndcg = map_ndcg(relevance_lists, k_values)
    return MetricsReport(map_score=mean_ap, ndcg=ndcg), rankings
