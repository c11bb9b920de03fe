"""Additive fusion of word, position, layout, image, and page embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import ModelConfig
from . import vision


class EmbedderError(ValueError):
    pass


@dataclass(frozen=True)
class AblationMask:
    """Which embedding families contribute at inference time."""

    use_text: bool = True
    use_layout: bool = True
    use_image: bool = True
    use_page: bool = True

    def __post_init__(self):
        if not (self.use_text or self.use_layout or self.use_image or self.use_page):
            raise EmbedderError("at least one embedding family must be enabled")

    @classmethod
    def all_inputs(cls):
        return cls()

    @classmethod
    def text_only(cls):
        return cls(use_text=True, use_layout=False, use_image=False, use_page=False)

    @classmethod
    def image_only(cls):
        return cls(use_text=False, use_layout=False, use_image=True, use_page=False)

    @classmethod
    def from_name(cls, name: str):
        try:
            return {"all": cls.all_inputs(), "text-only": cls.text_only(),
                    "image-only": cls.image_only()}[name]
        except KeyError:
            raise EmbedderError(f"unknown ablation {name!r}") from None


def sinusoidal_init(n_positions: int, dim: int) -> torch.Tensor:
    """Classic sin/cos position table: row p, col 2i = sin(p/10000^(2i/d))."""
    if dim % 2 != 0:
        raise EmbedderError("sinusoidal init requires an even dimension")
    pos = torch.arange(n_positions, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(
        torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim)
    )
    table = torch.zeros(n_positions, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)
    return table


class EmbeddingTables(nn.Module):
    """All lookup tables plus the image-feature projection.

    x1/x2 share the X table and y1/y2 share the Y table; the page table is
    sinusoidal-initialized and trainable unless frozen by config.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_size
        u, v = cfg.page_width, cfg.page_height
        self.cfg = cfg
        self.word = nn.Embedding(cfg.vocab_size, d)
        self.position = nn.Embedding(cfg.max_seq_len, d)
        self.x_table = nn.Embedding(u + 1, d)
        self.y_table = nn.Embedding(v + 1, d)
        self.h_table = nn.Embedding(v + 1, d)
        self.w_table = nn.Embedding(u + 1, d)
        self.page = nn.Embedding(cfg.max_pages, d)
        with torch.no_grad():
            self.page.weight.copy_(sinusoidal_init(cfg.max_pages, d))
        if cfg.freeze_page_embeddings:
            self.page.weight.requires_grad_(False)
        self.image_projection = nn.Linear(cfg.image_channels, d)


def image_term(batch, tables: EmbeddingTables, feature_maps, page_perms=None):
    """Projected 1x1 RoI features per sequence slot; zeros at padding.

    ``feature_maps`` is one (P, d_img, v', u') tensor per document;
    ``page_perms`` optionally remaps the page->map lookup (DSP shuffling).
    """
    cfg = tables.cfg
    B, S = batch.input_ids.shape
    d_img = cfg.image_channels
    device = tables.word.weight.device
    dtype = tables.word.weight.dtype
    pooled = torch.zeros(B, S, d_img, dtype=dtype, device=device)
    from_size = (cfg.page_width, cfg.page_height)
    for b in range(B):
        maps = feature_maps[b]
        n_pages = maps.shape[0]
        perm = page_perms[b] if page_perms is not None else None
        to_size = (maps.shape[3], maps.shape[2])
        for s in range(S):
            if batch.attention_mask[b, s] == 0:
                continue
            p = int(batch.page_ids[b, s])
            if perm is not None:
                p = perm[p]
            if p >= n_pages:
                raise EmbedderError(f"missing feature map for page {p}")
            region = vision.scale_bbox(
                int(batch.x1s[b, s]), int(batch.y1s[b, s]),
                int(batch.x2s[b, s]), int(batch.y2s[b, s]),
                from_size, to_size,
            )
            pooled[b, s] = vision.roi_pool(maps[p], region)
    return tables.image_projection(pooled)


def embed_sequence(batch, tables: EmbeddingTables, feature_maps=None,
                   ablation: AblationMask | None = None, page_perms=None):
    """Fuse all embedding families into a (B, S, d) tensor.

    Families disabled by ``ablation`` contribute exact zeros; padding slots
    are zeroed entirely.
    """
    if ablation is None:
        ablation = AblationMask.all_inputs()
    B, S = batch.input_ids.shape
    d = tables.cfg.hidden_size
    dtype = tables.word.weight.dtype
    out = torch.zeros(B, S, d, dtype=dtype, device=tables.word.weight.device)
    if ablation.use_text:
        positions = torch.arange(S, device=out.device).unsqueeze(0).expand(B, S)
        out = out + tables.word(batch.input_ids) + tables.position(positions)
    if ablation.use_layout:
        out = out + tables.x_table(batch.x1s) + tables.x_table(batch.x2s)
        out = out + tables.y_table(batch.y1s) + tables.y_table(batch.y2s)
        out = out + tables.h_table(batch.hs) + tables.w_table(batch.ws)
    if ablation.use_image:
        if feature_maps is None:
            raise EmbedderError("image family enabled but no feature maps given")
        out = out + image_term(batch, tables, feature_maps, page_perms)
    if ablation.use_page:
        out = out + tables.page(batch.page_ids)
    return out * batch.attention_mask.unsqueeze(-1).to(dtype)
