"""Task batch builders and losses for the four pre-training objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .config import (
    CLS_ID,
    FIRST_REGULAR_ID,
    IGNORE_INDEX,
    MASK_ID,
    SEP_ID,
    ModelConfig,
)
from .corpus import EncodedDocument, encode_document
from .model import DocModel, EncodedBatch, collate


class PretrainError(ValueError):
    pass


@dataclass
class TaskBatch:
    task: str  # mvlm_clf | dsp | dtm
    batch: EncodedBatch
    page_perms: Optional[list] = None
    dsp_labels: Optional[torch.Tensor] = None
    dtm_targets: Optional[torch.Tensor] = None


def soft_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Cross-entropy against probability-vector targets, mean over the batch."""
    return -(targets * F.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def build_mvlm_batch(docs, cfg: ModelConfig, seed: int,
                     mask_prob: Optional[float] = None) -> TaskBatch:
    """Mask tokens for MVLM with the 80/10/10 replacement recipe.

    Selected positions keep their layout boxes and page-image features;
    labels hold original ids at selected positions and the ignore marker
    elsewhere. Categories ride along for the jointly trained CLF objective.
    """
    if mask_prob is None:
        mask_prob = cfg.mask_prob
    rng = np.random.default_rng(seed)
    encs = []
    for doc in docs:
        if doc.category is None:
            raise PretrainError(f"document {doc.id!r} has no category for CLF")
        enc = encode_document(doc, cfg)
        ids = enc.input_ids
        labels = np.full(len(ids), IGNORE_INDEX, dtype=np.int64)
        candidates = (ids != CLS_ID) & (ids != SEP_ID)
        selected = candidates & (rng.random(len(ids)) < mask_prob)
        new_ids = ids.copy()
        for pos in np.nonzero(selected)[0]:
            labels[pos] = ids[pos]
            r = rng.random()
            if r < 0.8:
                new_ids[pos] = MASK_ID
            elif r < 0.9:
                new_ids[pos] = rng.integers(FIRST_REGULAR_ID, cfg.vocab_size)
            # else: keep the original token
        enc.input_ids = new_ids
        enc.mvlm_labels = labels
        encs.append(enc)
    return TaskBatch(task="mvlm_clf", batch=collate(encs, cfg.dtype))


def build_dsp_batch(docs, cfg: ModelConfig, seed: int,
                    shuffle_prob: float = 0.5) -> TaskBatch:
    """Shuffle page images (probability ``shuffle_prob``) behind intact text.

    Only the page -> feature-map lookup is permuted; token ids, boxes, and
    page-id sequences keep their original order. Label 1 marks a shuffled
    document.
    """
    rng = np.random.default_rng(seed)
    eligible = [d for d in docs if min(len(d.pages), cfg.max_pages) >= 2]
    if not eligible:
        raise PretrainError(
            "DSP needs documents with at least 2 pages; regenerate the corpus "
            "with pages_min >= 2"
        )
    encs, perms, labels = [], [], []
    for doc in eligible:
        enc = encode_document(doc, cfg)
        n_pages = len(enc.page_images)
        if rng.random() < shuffle_prob:
            perm = rng.permutation(n_pages)
            while (perm == np.arange(n_pages)).all():
                perm = rng.permutation(n_pages)
            perms.append([int(p) for p in perm])
            labels.append(1)
        else:
            perms.append(list(range(n_pages)))
            labels.append(0)
        encs.append(enc)
    return TaskBatch(
        task="dsp",
        batch=collate(encs, cfg.dtype),
        page_perms=perms,
        dsp_labels=torch.tensor(labels, dtype=torch.long),
    )


def _dtm_encode(doc, cfg: ModelConfig) -> EncodedDocument:
    """Image-driven encoding: one full-page MASK token per page (or one total)."""
    doc.validate()
    u, v = cfg.page_width, cfg.page_height
    pages = doc.pages[: cfg.max_pages]
    ids, boxes, page_ids = [CLS_ID], [(0, 0, u, v)], [0]
    if cfg.dtm_per_page:
        for p in range(len(pages)):
            ids.extend([MASK_ID, SEP_ID])
            boxes.extend([(0, 0, u, v), (0, 0, u, v)])
            page_ids.extend([p, p])
        images = [p.image for p in pages]
    else:
        ids.extend([MASK_ID, SEP_ID])
        boxes.extend([(0, 0, u, v), (0, 0, u, v)])
        page_ids.extend([0, 0])
        images = [pages[0].image]
    arr = np.asarray(boxes, dtype=np.int64)
    x1s, y1s, x2s, y2s = arr.T
    seq_len = len(ids)
    global_mask = np.zeros(seq_len, dtype=np.int64)
    global_mask[0] = 1
    return EncodedDocument(
        doc_id=doc.id,
        input_ids=np.asarray(ids, dtype=np.int64),
        x1s=x1s.copy(), y1s=y1s.copy(), x2s=x2s.copy(), y2s=y2s.copy(),
        hs=np.clip(y2s - y1s, 0, v), ws=np.clip(x2s - x1s, 0, u),
        page_ids=np.asarray(page_ids, dtype=np.int64),
        attention_mask=np.ones(seq_len, dtype=np.int64),
        global_mask=global_mask,
        page_images=images,
        category=doc.category,
    )


def build_dtm_batch(docs, doc_topics: dict, cfg: ModelConfig) -> TaskBatch:
    """Topic-vector targets behind page-image-only inputs."""
    encs, thetas = [], []
    for doc in docs:
        if doc.id not in doc_topics:
            raise PretrainError(f"no topic vector for document {doc.id!r}")
        theta = np.asarray(doc_topics[doc.id], dtype=np.float64)
        if abs(theta.sum() - 1.0) > 1e-6:
            raise PretrainError(
                f"topic vector for {doc.id!r} sums to {theta.sum():.8f}, not 1"
            )
        if len(theta) != cfg.num_topics:
            raise PretrainError(
                f"topic vector for {doc.id!r} has length {len(theta)}, "
                f"expected {cfg.num_topics}"
            )
        encs.append(_dtm_encode(doc, cfg))
        thetas.append(theta)
    return TaskBatch(
        task="dtm",
        batch=collate(encs, cfg.dtype),
        dtm_targets=torch.from_numpy(np.stack(thetas)).to(cfg.dtype),
    )


def mvlm_clf_loss(model: DocModel, tb: TaskBatch):
    hidden = model(tb.batch)
    logits = model.mvlm_head(hidden)
    labels = tb.batch.mvlm_labels
    if labels is not None and (labels != IGNORE_INDEX).any():
        mvlm = F.cross_entropy(
            logits.reshape(-1, logits.shape[-1]), labels.reshape(-1),
            ignore_index=IGNORE_INDEX,
        )
    else:
        mvlm = logits.sum() * 0.0
    if tb.batch.categories is None:
        raise PretrainError("CLF requires document categories")
    clf = F.cross_entropy(model.clf_head(model.cls_hidden(hidden)), tb.batch.categories)
    return mvlm + clf, {"mvlm": float(mvlm.detach()), "clf": float(clf.detach())}


def dsp_loss(model: DocModel, tb: TaskBatch):
    hidden = model(tb.batch, page_perms=tb.page_perms)
    logits = model.dsp_head(model.cls_hidden(hidden))
    loss = F.cross_entropy(logits, tb.dsp_labels)
    return loss, {"dsp": float(loss.detach())}


def dtm_loss(model: DocModel, tb: TaskBatch):
    hidden = model(tb.batch)
    logits = model.dtm_head(model.cls_hidden(hidden))
    loss = soft_cross_entropy(logits, tb.dtm_targets)
    return loss, {"dtm": float(loss.detach())}


def compute_task_loss(model: DocModel, tb: TaskBatch):
    return {"mvlm_clf": mvlm_clf_loss, "dsp": dsp_loss, "dtm": dtm_loss}[tb.task](model, tb)
