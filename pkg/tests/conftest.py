import os

os.environ.setdefault("ELASTRON_CHECK_FINITE", "1")

import pytest
import torch

from dataset import SynthSpec, synth_corpus
from model import ElasticModel, ModelConfig
from ops import Rng


@pytest.fixture
def tiny_config():
    return ModelConfig(
        vocab_size=256,
        embed_dim=8,
        num_layers=2,
        num_heads=4,
        head_dim=2,
        mlp_hidden=16,
        context_len=16,
        mlp_widths=(4, 8, 12, 16),
        head_counts=(1, 2, 3, 4),
    )


@pytest.fixture
def tiny_model(tiny_config):
    return ElasticModel(tiny_config, Rng(0))


@pytest.fixture
def tokens():
    return Rng(1).randint(256, (3, 8))


@pytest.fixture
def tiny_corpus():
    return synth_corpus(Rng(3), SynthSpec(("easy", "hard"), sequences_per_domain=16, seq_len=16, split=0.75))


@pytest.fixture
def random_hidden(tiny_config):
    def make(batch=2, seq_len=5, seed=4):
        return Rng(seed).normal((batch, seq_len, tiny_config.embed_dim))
    return make


def assert_close(a, b, atol):
    assert torch.allclose(a, b, rtol=0.0, atol=atol), float((a - b).abs().max())
