"""Multi-modal (text + layout + image) multi-page document representation learning."""

from .config import ModelConfig, SyntheticSpec, TrainConfig
from .corpus import (
    BBox,
    Document,
    EncodedDocument,
    PageRecord,
    TokenRecord,
    encode_document,
    generate_synthetic_corpus,
    load_manifest,
    write_corpus,
)
from .embedder import AblationMask, sinusoidal_init
from .finetune_eval import (
    MetricsReport,
    classify_document,
    extract_embedding,
    label_tokens,
    map_ndcg,
    retrieve,
    weighted_prf,
)
from .model import DocModel, build_model, collate
from .pretrain import (
    build_dsp_batch,
    build_dtm_batch,
    build_mvlm_batch,
    soft_cross_entropy,
)
from .topics import TopicModel, fit_lda, infer_topics
from .trainer import Pretrainer, load_checkpoint, save_checkpoint

__all__ = [
    "AblationMask", "BBox", "DocModel", "Document", "EncodedDocument",
    "MetricsReport", "ModelConfig", "PageRecord", "Pretrainer", "SyntheticSpec",
    "TokenRecord", "TopicModel", "TrainConfig", "build_dsp_batch",
    "build_dtm_batch", "build_model", "build_mvlm_batch", "classify_document",
    "collate", "encode_document", "extract_embedding", "fit_lda",
    "generate_synthetic_corpus", "infer_topics", "label_tokens",
    "load_checkpoint", "load_manifest", "map_ndcg", "retrieve",
    "save_checkpoint", "sinusoidal_init", "soft_cross_entropy", "weighted_prf",
    "write_corpus",
]

__version__ = "0.1.0"
