import numpy as np
import pytest
import torch

from docrep.config import ModelConfig, SyntheticSpec
from docrep.corpus import generate_synthetic_corpus


TINY = dict(
    vocab_size=64, num_categories=4, num_token_classes=2,
    max_pages=4, tokens_per_page=12,
    page_width=64, page_height=80,
    hidden_size=32, num_layers=2, num_heads=4, ffn_size=64,
    window=16, backbone="tiny", num_topics=6, precision="double",
)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_spec():
    return SyntheticSpec(
        num_docs=8, num_categories=4, pages_min=2, pages_max=4,
        tokens_per_page_min=4, tokens_per_page_max=6,
        vocab_size=64, page_width=64, page_height=80,
    )


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A shared 16-document corpus for unit tests."""
    spec = SyntheticSpec(
        num_docs=16, num_categories=4, pages_min=2, pages_max=4,
        tokens_per_page_min=4, tokens_per_page_max=6,
        vocab_size=64, page_width=64, page_height=80,
    )
    out = tmp_path_factory.mktemp("corpus")
    docs = generate_synthetic_corpus(spec, str(out), seed=11)
    return spec, docs, out


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    np.random.seed(0)
