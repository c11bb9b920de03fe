"""Transformer encoder with sliding-window + global attention.

Each non-global token attends to positions within +/- window/2 of itself
(intersected with the attention mask) plus every global token; global tokens
attend to the whole unmasked sequence. Attention-score storage is O(S * W)
via a banded layout, falling back to a dense S x S buffer when the band
would not be smaller.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig

_NEG = -1e30


class EncoderError(ValueError):
    pass


def attention_score_elements(seq_len: int, window: int, num_global: int = 1) -> int:
    """Per-head attention-score storage for one sequence.

    Mirrors the buffers the forward pass allocates: a dense S x S matrix when
    the band would be at least as large, otherwise the banded scores plus the
    dense rows of the global queries.
    """
    if window + 1 >= seq_len:
        return seq_len * seq_len
    return seq_len * (window + 1 + num_global) + num_global * seq_len


def memory_probe(seq_lens, window: int, num_global: int = 1) -> list:
    """Score storage for each sequence length at a fixed window."""
    return [attention_score_elements(s, window, num_global) for s in seq_lens]


def _masked_softmax(scores: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
    # Fully masked rows get a dummy uniform softmax; callers ignore them.
    any_allowed = allowed.any(dim=-1, keepdim=True)
    safe = allowed | ~any_allowed
    attn = torch.softmax(scores.masked_fill(~safe, _NEG), dim=-1)
    return attn * any_allowed.to(attn.dtype)


class WindowedSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_heads = cfg.num_heads
        self.head_dim = cfg.hidden_size // cfg.num_heads
        self.window = cfg.window
        self.qkv = nn.Linear(cfg.hidden_size, 3 * cfg.hidden_size)
        self.out = nn.Linear(cfg.hidden_size, cfg.hidden_size)
        self.dropout = nn.Dropout(cfg.dropout)
        self.last_score_elements = 0

    def forward(self, x, attention_mask, global_mask):
        B, S, _ = x.shape
        if ((global_mask == 1) & (attention_mask == 0)).any():
            raise EncoderError("global token at a padded position")
        H, dh = self.num_heads, self.head_dim
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(B, S, H, dh).transpose(1, 2) / math.sqrt(dh)
        k = k.view(B, S, H, dh).transpose(1, 2)
        v = v.view(B, S, H, dh).transpose(1, 2)
        amask = attention_mask.bool()
        gmask = global_mask.bool()

        if self.window + 1 >= S:
            ctx = self._dense(q, k, v, amask, gmask)
        else:
            ctx = self._banded(q, k, v, amask, gmask)
        ctx = ctx.transpose(1, 2).reshape(B, S, H * dh)
        return self.dropout(self.out(ctx))

    def _dense(self, q, k, v, amask, gmask):
        B, H, S, _ = q.shape
        half = self.window // 2
        pos = torch.arange(S, device=q.device)
        in_window = (pos.unsqueeze(0) - pos.unsqueeze(1)).abs() <= half
        # key allowed if unmasked and (in window, or key global, or query global)
        allowed = (
            in_window.unsqueeze(0)
            | gmask.unsqueeze(1)
            | gmask.unsqueeze(2)
        ) & amask.unsqueeze(1)
        scores = q @ k.transpose(-1, -2)
        self.last_score_elements = scores.numel() // (B * H)
        attn = _masked_softmax(scores, allowed.unsqueeze(1))
        return attn @ v

    def _banded(self, q, k, v, amask, gmask):
        B, H, S, dh = q.shape
        half = self.window // 2
        wb = self.window + 1
        device = q.device

        idx = torch.arange(S, device=device).unsqueeze(1) + torch.arange(
            -half, half + 1, device=device
        ).unsqueeze(0)  # (S, wb)
        in_range = (idx >= 0) & (idx < S)
        idx_c = idx.clamp(0, S - 1)

        k_band = k[:, :, idx_c]  # (B, H, S, wb, dh)
        v_band = v[:, :, idx_c]
        band_scores = (q.unsqueeze(3) * k_band).sum(-1)  # (B, H, S, wb)
        # Globals are served by dedicated columns, not the band.
        band_allowed = (
            in_range.unsqueeze(0) & amask[:, idx_c] & ~gmask[:, idx_c]
        ).unsqueeze(1)

        g_counts = gmask.sum(dim=1)
        g_max = int(g_counts.max())
        g_index = torch.zeros(B, g_max, dtype=torch.long, device=device)
        g_valid = torch.zeros(B, g_max, dtype=torch.bool, device=device)
        for b in range(B):
            pos_b = torch.nonzero(gmask[b], as_tuple=False).squeeze(1)
            g_index[b, : len(pos_b)] = pos_b
            g_valid[b, : len(pos_b)] = True

        gather = g_index[:, None, :, None].expand(B, H, g_max, dh)
        k_g = k.gather(2, gather)
        v_g = v.gather(2, gather)
        glob_scores = q @ k_g.transpose(-1, -2)  # (B, H, S, g_max)
        glob_allowed = g_valid[:, None, None, :].expand(B, 1, S, g_max)

        scores = torch.cat([band_scores, glob_scores], dim=-1)
        allowed = torch.cat([band_allowed.expand(B, 1, S, wb), glob_allowed], dim=-1)
        attn = _masked_softmax(scores, allowed)
        ctx = (attn[..., :wb].unsqueeze(-1) * v_band).sum(3)
        ctx = ctx + attn[..., wb:] @ v_g

        # Global queries attend densely over the unmasked sequence.
        q_g = q.gather(2, gather)
        gq_scores = q_g @ k.transpose(-1, -2)  # (B, H, g_max, S)
        gq_allowed = (amask[:, None, :] & g_valid[:, :, None]).unsqueeze(1)
        gq_ctx = _masked_softmax(gq_scores, gq_allowed) @ v
        global_rows = torch.zeros_like(ctx)
        for b in range(B):
            n = int(g_counts[b])
            if n:
                global_rows[b, :, g_index[b, :n]] = gq_ctx[b, :, :n]
        ctx = torch.where(gmask[:, None, :, None], global_rows, ctx)

        self.last_score_elements = (
            scores.numel() + gq_scores.numel()
        ) // (B * H)
        return ctx


class EncoderLayer(nn.Module):
    """Pre-layer-norm block: windowed attention then a GELU feed-forward."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.hidden_size)
        self.attn = WindowedSelfAttention(cfg)
        self.norm2 = nn.LayerNorm(cfg.hidden_size)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.hidden_size, cfg.ffn_size),
            nn.GELU(),
            nn.Linear(cfg.ffn_size, cfg.hidden_size),
            nn.Dropout(cfg.dropout),
        )

    def forward(self, x, attention_mask, global_mask):
        x = x + self.attn(self.norm1(x), attention_mask, global_mask)
        return x + self.ffn(self.norm2(x))


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.num_layers))
        self.final_norm = nn.LayerNorm(cfg.hidden_size)

    def forward(self, x, attention_mask, global_mask):
        for layer in self.layers:
            x = layer(x, attention_mask, global_mask)
        return self.final_norm(x)
