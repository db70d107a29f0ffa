import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from utils.transformer import ModelConfig, Transformer
from utils.world import WorldConfig, gen_world

SMOKE_CONFIG = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "data", "raw", "smoke.cfg")


@pytest.fixture(scope="session")
def world():
    return gen_world(WorldConfig(n_subjects=8, n_relations=2, n_objects=6, n_text=30, text_min=6, text_max=10,
                                 n_questions=8, seed=0))


@pytest.fixture(scope="session")
def vocab(world):
    return world.vocab


@pytest.fixture
def tiny_model(vocab):
    return Transformer(ModelConfig(n_layers=4, d_model=16, n_heads=2, vocab_size=len(vocab), context_length=96,
                                   seed=0))


@pytest.fixture
def float64_model(vocab):
    return Transformer(ModelConfig(n_layers=2, d_model=8, n_heads=2, vocab_size=len(vocab), context_length=96,
                                   seed=1, dtype="float64"))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
