"""
Shared fixtures: small seeded models and sequences
"""

import os

os.environ.setdefault('DEPTHPROBE_ENV', 'testing')

import numpy as np
import pytest

from core.model import AMINO_ACIDS, ModelConfig, ObjectiveMode, Prompt, init_model, zero_block_updates


def tiny_config(mode=ObjectiveMode.MASKED, layers=2, d_model=8, heads=2, d_ff=16, max_seq_len=16):
    return ModelConfig(num_layers=layers, d_model=d_model, num_heads=heads, d_ff=d_ff,
                       max_seq_len=max_seq_len, objective_mode=mode)


def random_letters(rng, length):
    return ''.join(rng.choice(list(AMINO_ACIDS), size=length))


@pytest.fixture
def masked_model():
    return init_model(tiny_config(ObjectiveMode.MASKED), np.random.default_rng(11))


@pytest.fixture
def ar_model():
    return init_model(tiny_config(ObjectiveMode.AUTOREGRESSIVE), np.random.default_rng(12))


@pytest.fixture
def masked_model64():
    return init_model(tiny_config(ObjectiveMode.MASKED), np.random.default_rng(13), dtype=np.float64)


@pytest.fixture
def ar_model64():
    return init_model(tiny_config(ObjectiveMode.AUTOREGRESSIVE), np.random.default_rng(14), dtype=np.float64)


@pytest.fixture
def four_layer_masked():
    return init_model(tiny_config(ObjectiveMode.MASKED, layers=4, d_model=16, heads=4, d_ff=32, max_seq_len=32),
                      np.random.default_rng(21))


@pytest.fixture
def four_layer_ar():
    return init_model(tiny_config(ObjectiveMode.AUTOREGRESSIVE, layers=4, d_model=16, heads=4, d_ff=32,
                                  max_seq_len=32),
                      np.random.default_rng(22))


@pytest.fixture
def zero_update_masked():
    model = init_model(tiny_config(ObjectiveMode.MASKED, layers=3), np.random.default_rng(31))
    return zero_block_updates(model)


@pytest.fixture
def prompts():
    rng = np.random.default_rng(5)
    return [Prompt(tuple(rng.integers(0, 20, size=length)), origin=f'p{i}')
            for i, length in enumerate([12, 16, 9, 14])]
