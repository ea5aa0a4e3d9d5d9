import numpy as np
import pytest

from recdistill.model import ModelConfig, RecursiveStudent, TeacherModel
from recdistill.rng import derive_rng


def tiny_config(**overrides) -> ModelConfig:
    base = dict(hidden_dim=16, num_heads=2, ffn_dim=32, num_layers=3, vocab_size=50, max_positions=16, dropout_prob=0.0)
    base.update(overrides)
    return ModelConfig(**base)


def random_tokens(rng, batch=2, seq=7, vocab=50, pad_tail=True):
    tokens = rng.integers(5, vocab, size=(batch, seq))
    if pad_tail and seq > 3:
        tokens[-1, -2:] = 0
    return tokens


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def student():
    return RecursiveStudent(tiny_config(adapter_bottleneck=4, embedding_rank=8), derive_rng(0, "student"))


@pytest.fixture
def teacher():
    return TeacherModel(tiny_config(), derive_rng(0, "teacher"))
