"""Configuration objects: model shapes, training schedule, synthetic corpus spec."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import torch

# Special token ids, fixed across the whole pipeline.
PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
MASK_ID = 3
FIRST_REGULAR_ID = 4

# Label value ignored by the masked-LM and token-labeling losses.
IGNORE_INDEX = -100

BACKBONE_PRESETS = {
    # name: (stage channel widths, output channels of the pyramid)
    "tiny": ((16, 32), 32),
    "small": ((32, 64, 128), 64),
    "full": ((64, 128, 256, 512), 256),
}


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Single source of truth for every shape in the model."""

    vocab_size: int = 1000
    num_categories: int = 16
    num_token_classes: int = 2
    max_pages: int = 5
    tokens_per_page: int = 500
    page_width: int = 563
    page_height: int = 750
    hidden_size: int = 512
    num_layers: int = 12
    num_heads: int = 8
    ffn_size: int = 2048
    window: int = 512
    backbone: str = "full"
    frozen_stages: int = 0
    num_topics: int = 30
    mask_prob: float = 0.15
    dropout: float = 0.0
    freeze_page_embeddings: bool = False
    # DTM input strategy: one MASK token per page (True) or a single MASK
    # token for the whole document (False).
    dtm_per_page: bool = True
    precision: str = "double"

    def __post_init__(self):
        if self.backbone not in BACKBONE_PRESETS:
            raise ConfigError(f"unknown backbone preset {self.backbone!r}")
        if self.hidden_size % self.num_heads != 0:
            raise ConfigError("hidden_size must be divisible by num_heads")
        if self.hidden_size % 2 != 0:
            raise ConfigError("hidden_size must be even")
        if self.window % 2 != 0:
            raise ConfigError("window must be even")
        if self.vocab_size <= FIRST_REGULAR_ID:
            raise ConfigError("vocab_size must leave room for regular tokens")
        if self.precision not in ("single", "double"):
            raise ConfigError("precision must be 'single' or 'double'")
        if self.mask_prob < 0.0 or self.mask_prob > 1.0:
            raise ConfigError("mask_prob must lie in [0, 1]")

    @property
    def max_seq_len(self) -> int:
        # CLS + per page: tokens_per_page tokens and one SEP.
        return 1 + self.max_pages * (self.tokens_per_page + 1)

    @property
    def image_channels(self) -> int:
        return BACKBONE_PRESETS[self.backbone][1]

    @property
    def backbone_stage_channels(self):
        return BACKBONE_PRESETS[self.backbone][0]

    @property
    def backbone_stride(self) -> int:
        # Stem halves once, each stage halves once more.
        return 2 ** (1 + len(self.backbone_stage_channels))

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "double" else torch.float32


@dataclass
class TrainConfig:
    """Pre-training schedule: per-task batch sizes and gradient accumulation."""

    steps: int = 15000
    learning_rate: float = 3e-5
    weight_decay: float = 0.01
    # (batch size, gradient accumulation) per task, full-scale defaults.
    mvlm_clf_batch: int = 32
    mvlm_clf_accum: int = 2
    dsp_batch: int = 16
    dsp_accum: int = 1
    dtm_batch: int = 16
    dtm_accum: int = 1
    task_weights: dict = field(
        default_factory=lambda: {"mvlm_clf": 1.0, "dsp": 1.0, "dtm": 1.0}
    )
    tasks: tuple = ("mvlm_clf", "dsp", "dtm")
    shuffle_prob: float = 0.5
    seed: int = 0
    checkpoint_interval: int = 1000
    warmup_steps: int = 0
    max_grad_norm: float = 0.0

    def __post_init__(self):
        for name in ("mvlm_clf_batch", "dsp_batch", "dtm_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("mvlm_clf_accum", "dsp_accum", "dtm_accum"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for task in self.tasks:
            if task not in ("mvlm_clf", "dsp", "dtm"):
                raise ConfigError(f"unknown task {task!r}")

    def batch_accum(self, task: str):
        return {
            "mvlm_clf": (self.mvlm_clf_batch, self.mvlm_clf_accum),
            "dsp": (self.dsp_batch, self.dsp_accum),
            "dtm": (self.dtm_batch, self.dtm_accum),
        }[task]


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic multi-page corpus generator."""

    num_docs: int = 200
    num_categories: int = 4
    pages_min: int = 2
    pages_max: int = 4
    tokens_per_page_min: int = 6
    tokens_per_page_max: int = 10
    vocab_size: int = 256
    page_width: int = 64
    page_height: int = 80
    # Fraction of the regular vocabulary reserved for "marked" tokens that
    # carry token label 1 and a distinctive rendering channel.
    marked_vocab_frac: float = 0.2
    marked_token_prob: float = 0.2
    # Probability that a non-marked token comes from the document's own
    # category partition rather than a uniformly random one.
    category_purity: float = 0.9
    glyph_size: int = 6

    def __post_init__(self):
        if self.num_docs < 1 or self.num_categories < 1:
            raise ConfigError("num_docs and num_categories must be >= 1")
        if self.pages_min < 1 or self.pages_min > self.pages_max:
            raise ConfigError("invalid pages range")
        if self.tokens_per_page_min < 1 or self.tokens_per_page_min > self.tokens_per_page_max:
            raise ConfigError("invalid tokens-per-page range")
        regular = self.vocab_size - FIRST_REGULAR_ID
        if regular < self.num_categories:
            raise ConfigError("vocab too small for the requested category count")
        marked = int(regular * self.marked_vocab_frac)
        per_category = (regular - marked) // self.num_categories
        if per_category < self.tokens_per_page_max:
            raise ConfigError(
                "vocabulary partition smaller than requested tokens-per-page: "
                f"{per_category} < {self.tokens_per_page_max}"
            )


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def dict_to_config(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = dict(data)
    if cls is TrainConfig and "tasks" in kwargs:
        kwargs["tasks"] = tuple(kwargs["tasks"])
    return cls(**kwargs)
