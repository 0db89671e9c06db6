"""
End-to-end depth trends on the default 8-layer model (minutes; run with -m slow)
"""

import math

import numpy as np
import pytest

from core.model import Prompt, encode_sequence
from core.numerics import depth_quartile_means
from services.intervention_service import skiplayer_experiment
from services.lens_service import lens_profile
from services.scoring_service import layerwise_spearman
from services.synth_generator import build_generator, make_assay, sample_sequences
from services.training_service import TrainConfig, train
from utils.rng import STREAM_SYNTH, child_rng

pytestmark = pytest.mark.slow

SEED = 7


@pytest.fixture(scope='module')
def trained():
    generator = build_generator(6, 0.3, child_rng(SEED, STREAM_SYNTH, 0))
    result = train(TrainConfig(seed=SEED), generator, threads=4)
    prompts = [Prompt(tuple(encode_sequence(s)[0]), origin=f'prompt_{i}')
               for i, s in enumerate(sample_sequences(generator, 40, 64, SEED, keys=(STREAM_SYNTH, 1)))]
    return generator, result, prompts


def test_training_converged(trained):
    _, result, _ = trained
    vocab_size = result.model.config.vocab_size
    assert result.final_heldout_loss < 0.8 * math.log(vocab_size)


def test_early_layers_propagate_more_than_late_layers(trained):
    _, result, prompts = trained
    matrix = skiplayer_experiment(result.model, prompts, repeats=4, seed=SEED, threads=4)
    means = matrix.source_means()
    third = len(means) // 3
    assert np.mean(means[:third]) > np.mean(means[-third:])


def test_lens_kl_falls_with_depth(trained):
    _, result, prompts = trained
    profile = lens_profile(result.model, prompts, seed=SEED, threads=4)
    first, last = depth_quartile_means(profile.mean_kl)
    assert last < first


def test_spearman_rises_with_depth(trained):
    generator, result, _ = trained
    wildtype = sample_sequences(generator, 1, 48, SEED, keys=(STREAM_SYNTH, 2))[0]
    assay = make_assay(generator, wildtype, 0.0, child_rng(SEED, STREAM_SYNTH, 3, 0))
    table = layerwise_spearman(result.model, assay, threads=4)
    first, last = depth_quartile_means(table.rho)
    assert last >= first
    assert table.rho[-1] > 0.3
