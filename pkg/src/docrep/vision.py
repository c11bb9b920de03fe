"""Residual conv backbone + feature pyramid + 1x1 RoI max pooling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import BACKBONE_PRESETS, ModelConfig


class VisionError(ValueError):
    pass


@dataclass
class FeatureMap:
    values: torch.Tensor  # (d_img, v', u')
    stride: int


def _norm(channels):
    return nn.GroupNorm(num_groups=min(8, channels), num_channels=channels)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm1 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = _norm(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Conv2d(in_ch, out_ch, 1, stride=stride)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(h + self.shortcut(x))


class Backbone(nn.Module):
    """Residual stages over a stride-2 stem, fused by a small FPN.

    The returned map is the coarsest pyramid level; overall stride is
    2^(1 + number of stages). Spatial sizes follow ceil division, so a
    (u, v) input yields a (ceil(u/stride), ceil(v/stride)) map.
    """

    def __init__(self, preset: str):
        super().__init__()
        if preset not in BACKBONE_PRESETS:
            raise VisionError(f"unknown backbone preset {preset!r}")
        stage_channels, d_img = BACKBONE_PRESETS[preset]
        self.preset = preset
        self.d_img = d_img
        self.stride = 2 ** (1 + len(stage_channels))
        stem_ch = stage_channels[0]
        self.stem = nn.Sequential(
            nn.Conv2d(3, stem_ch, 3, stride=2, padding=1), _norm(stem_ch), nn.ReLU(),
        )
        stages = []
        in_ch = stem_ch
        for out_ch in stage_channels:
            stages.append(ResidualBlock(in_ch, out_ch, stride=2))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        self.laterals = nn.ModuleList(
            [nn.Conv2d(ch, d_img, 1) for ch in stage_channels]
        )
        self.smooth = nn.Conv2d(d_img, d_img, 3, padding=1)

    def parameter_groups(self):
        """Bottom-up list of parameter groups for stage freezing."""
        groups = [list(self.stem.parameters())]
        for stage in self.stages:
            groups.append(list(stage.parameters()))
        groups.append(list(self.laterals.parameters()) + list(self.smooth.parameters()))
        return groups

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """images (B, 3, v, u) -> coarsest fused map (B, d_img, v', u')."""
        feats = []
        h = self.stem(images)
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        # All pyramid levels fuse into the coarsest, which is the only
        # level emitted; lower levels are max-pooled down to its size.
        top_shape = feats[-1].shape[-2:]
        fused = self.laterals[-1](feats[-1])
        for feat, lateral in zip(feats[:-1], self.laterals[:-1]):
            fused = fused + F.adaptive_max_pool2d(lateral(feat), top_shape)
        return self.smooth(fused)


def apply_frozen_stages(backbone: Backbone, frozen_stages: int) -> None:
    """Exclude the first ``frozen_stages`` parameter groups from gradients."""
    groups = backbone.parameter_groups()
    if frozen_stages > len(groups):
        raise VisionError(
            f"frozen_stages {frozen_stages} exceeds {len(groups)} parameter groups"
        )
    for group in groups[:frozen_stages]:
        for p in group:
            p.requires_grad_(False)


def extract_feature_map(image: torch.Tensor, backbone: Backbone,
                        expected_size=None) -> FeatureMap:
    """Run one (3, v, u) image through the backbone."""
    if image.dim() != 3 or image.shape[0] != 3:
        raise VisionError(f"expected a (3, v, u) image, got {tuple(image.shape)}")
    if expected_size is not None:
        u, v = expected_size
        if image.shape[1] != v or image.shape[2] != u:
            raise VisionError(
                f"image size {tuple(image.shape[1:])} does not match configured ({v}, {u})"
            )
    values = backbone(image.unsqueeze(0)).squeeze(0)
    return FeatureMap(values=values, stride=backbone.stride)


def scale_bbox(x1, y1, x2, y2, from_size, to_size):
    """Scale a pixel box to feature-map cells; the region is never empty.

    Returns (left, top, right, bottom) with 0 <= left < right <= u' and
    0 <= top < bottom <= v'.
    """
    u, v = from_size
    u2, v2 = to_size
    left = min(max(math.floor(x1 * u2 / u), 0), u2 - 1)
    top = min(max(math.floor(y1 * v2 / v), 0), v2 - 1)
    right = min(max(math.ceil(x2 * u2 / u), left + 1), u2)
    bottom = min(max(math.ceil(y2 * v2 / v), top + 1), v2)
    return left, top, right, bottom


def roi_pool(values: torch.Tensor, region) -> torch.Tensor:
    """Per-channel max over the (left, top, right, bottom) cell region."""
    left, top, right, bottom = region
    if right <= left or bottom <= top:
        raise VisionError(f"empty RoI region {region}")
    if left < 0 or top < 0 or right > values.shape[2] or bottom > values.shape[1]:
        raise VisionError(f"region {region} outside map {tuple(values.shape)}")
    return values[:, top:bottom, left:right].amax(dim=(1, 2))


def map_size(cfg: ModelConfig):
    stride = cfg.backbone_stride
    return (math.ceil(cfg.page_width / stride), math.ceil(cfg.page_height / stride))
