"""Full document model: backbone + embedding fusion + windowed encoder + heads."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig, PAD_ID
from .embedder import AblationMask, EmbeddingTables, embed_sequence
from .encoder import Encoder
from .vision import Backbone, apply_frozen_stages


@dataclass
class EncodedBatch:
    """Padded tensor views over a list of encoded documents."""

    doc_ids: list
    input_ids: torch.Tensor
    x1s: torch.Tensor
    y1s: torch.Tensor
    x2s: torch.Tensor
    y2s: torch.Tensor
    hs: torch.Tensor
    ws: torch.Tensor
    page_ids: torch.Tensor
    attention_mask: torch.Tensor
    global_mask: torch.Tensor
    page_images: list = field(default_factory=list)
    mvlm_labels: Optional[torch.Tensor] = None
    token_labels: Optional[torch.Tensor] = None
    categories: Optional[torch.Tensor] = None

    @property
    def batch_size(self) -> int:
        return self.input_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.input_ids.shape[1]


def collate(encoded_docs, dtype=torch.float64) -> EncodedBatch:
    """Pad encoded documents to a common length and stack into tensors."""
    from .config import IGNORE_INDEX

    max_len = max(e.length for e in encoded_docs)

    def pad(name, fill=0):
        rows = []
        for e in encoded_docs:
            arr = getattr(e, name)
            out = np.full(max_len, fill, dtype=np.int64)
            out[: len(arr)] = arr
            rows.append(out)
        return torch.from_numpy(np.stack(rows))

    fields = {}
    for name in ("x1s", "y1s", "x2s", "y2s", "hs", "ws", "page_ids",
                 "attention_mask", "global_mask"):
        fields[name] = pad(name)
    fields["input_ids"] = pad("input_ids", fill=PAD_ID)

    def pad_labels(name):
        if any(getattr(e, name) is not None for e in encoded_docs):
            rows = []
            for e in encoded_docs:
                out = np.full(max_len, IGNORE_INDEX, dtype=np.int64)
                arr = getattr(e, name)
                if arr is not None:
                    out[: len(arr)] = arr
                rows.append(out)
            return torch.from_numpy(np.stack(rows))
        return None

    categories = None
    if all(e.category is not None for e in encoded_docs):
        categories = torch.tensor([e.category for e in encoded_docs], dtype=torch.long)

    return EncodedBatch(
        doc_ids=[e.doc_id for e in encoded_docs],
        page_images=[
            torch.from_numpy(np.stack(e.page_images)).to(dtype)
            for e in encoded_docs
        ],
        mvlm_labels=pad_labels("mvlm_labels"),
        token_labels=pad_labels("token_labels"),
        categories=categories,
        **fields,
    )


class DocModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone)
        apply_frozen_stages(self.backbone, cfg.frozen_stages)
        self.tables = EmbeddingTables(cfg)
        self.encoder = Encoder(cfg)
        d = cfg.hidden_size
        self.mvlm_head = nn.Linear(d, cfg.vocab_size)
        self.clf_head = nn.Linear(d, cfg.num_categories)
        self.dsp_head = nn.Linear(d, 2)
        self.dtm_head = nn.Linear(d, cfg.num_topics)
        self.token_head = nn.Linear(d, cfg.num_token_classes)
        self.to(cfg.dtype)

    def compute_feature_maps(self, batch: EncodedBatch):
        """One (P, d_img, v', u') tensor per document, from a single backbone call."""
        dtype = self.tables.word.weight.dtype
        counts = [imgs.shape[0] for imgs in batch.page_images]
        stacked = torch.cat([imgs.to(dtype) for imgs in batch.page_images], dim=0)
        maps = self.backbone(stacked)
        return list(torch.split(maps, counts, dim=0))

    def forward(self, batch: EncodedBatch, ablation: AblationMask | None = None,
                page_perms=None) -> torch.Tensor:
        if ablation is None:
            ablation = AblationMask.all_inputs()
        feature_maps = self.compute_feature_maps(batch) if ablation.use_image else None
        x = embed_sequence(batch, self.tables, feature_maps, ablation, page_perms)
        return self.encoder(x, batch.attention_mask, batch.global_mask)

    def cls_hidden(self, hidden: torch.Tensor) -> torch.Tensor:
        return hidden[:, 0]


def build_model(cfg: ModelConfig, seed: int = 0) -> DocModel:
    """Construct a model with seeded random initialization."""
    torch.manual_seed(seed)
    return DocModel(cfg)
