import itertools

import numpy as np
import pytest

from core.errors import GeneratorError
from core.model import AA_TO_ID
from core.numerics import spearman
from services.scoring_service import parse_assay
from services.synth_generator import (SeqGenerator, build_generator, load_generator, make_assay, sample_batch,
                                      sample_sequence, sample_sequences, save_generator, true_loglik,
                                      write_assay_csv)
from utils.rng import child_rng


def one_hot_emissions(letters):
    emission = np.zeros((len(letters), 20))
    for state, letter in enumerate(letters):
        emission[state, letter] = 1.0
    return emission


@pytest.fixture
def small_generator():
    return build_generator(3, 0.5, child_rng(9, 0))


def test_generator_rows_are_distributions(small_generator):
    assert small_generator.num_states == 3
    for rows in (small_generator.transition, small_generator.emission, small_generator.initial[None, :]):
        assert np.all(rows > 0)
        assert np.allclose(rows.sum(axis=1), 1.0, atol=1e-12)


def test_generator_is_deterministic_for_a_seed():
    a = build_generator(4, 0.3, child_rng(1, 0))
    b = build_generator(4, 0.3, child_rng(1, 0))
    assert np.array_equal(a.emission, b.emission)
    assert sample_sequences(a, 3, 10, seed=1) == sample_sequences(b, 3, 10, seed=1, threads=2)


def test_large_concentration_is_near_uniform():
    gen = build_generator(2, 1e4, child_rng(2, 0))
    assert np.max(np.abs(gen.emission - 1 / 20)) < 0.01
    assert np.max(np.abs(gen.transition - 0.5)) < 0.05


@pytest.mark.parametrize('states,concentration', [(1, 1.0), (3, 0.0), (3, -1.0)])
def test_build_generator_rejects_bad_arguments(states, concentration):
    with pytest.raises(GeneratorError):
        build_generator(states, concentration, child_rng(0))


def test_rows_must_sum_to_one():
    with pytest.raises(GeneratorError):
        SeqGenerator(transition=[[0.5, 0.4], [0.5, 0.5]], emission=one_hot_emissions([0, 1]), initial=[0.5, 0.5])


def test_forced_sequence_has_zero_loglik():
    gen = SeqGenerator(transition=[[0.0, 1.0], [1.0, 0.0]], emission=one_hot_emissions([0, 1]), initial=[1.0, 0.0])
    assert sample_sequence(gen, 6, child_rng(3)) == 'ACACAC'
    assert true_loglik(gen, 'ACACAC') == 0.0
    assert true_loglik(gen, 'AACACA') == -np.inf


def test_single_state_loglik_is_sum_of_emissions():
    emission = np.full((1, 20), 0.5 / 19)
    emission[0, 0] = 0.5
    gen = SeqGenerator(transition=[[1.0]], emission=emission, initial=[1.0])
    expected = 2 * np.log(0.5) + 3 * np.log(0.5 / 19)
    assert true_loglik(gen, 'AACDE') == pytest.approx(expected, abs=1e-12)


def test_loglik_matches_path_enumeration():
    gen = build_generator(2, 1.0, child_rng(4, 0))
    sequence = 'MKV'
    ids = [AA_TO_ID[c] for c in sequence]
    total = 0.0
    for path in itertools.product(range(2), repeat=3):
        p = gen.initial[path[0]] * gen.emission[path[0], ids[0]]
        for t in range(1, 3):
            p *= gen.transition[path[t - 1], path[t]] * gen.emission[path[t], ids[t]]
        total += p
    assert true_loglik(gen, sequence) == pytest.approx(np.log(total), abs=1e-10)


def test_transition_frequencies_match_generator():
    transition = np.array([[0.9, 0.1], [0.3, 0.7]])
    gen = SeqGenerator(transition=transition, emission=one_hot_emissions([0, 1]), initial=[0.5, 0.5])
    letters = sample_batch(gen, 200, 500, child_rng(5))
    prev, nxt = letters[:, :-1].ravel(), letters[:, 1:].ravel()
    for state in (0, 1):
        observed = np.mean(nxt[prev == state] == 1)
        assert observed == pytest.approx(transition[state, 1], abs=0.02)


def test_sampled_letters_are_amino_acids(small_generator):
    letters = sample_batch(small_generator, 5, 30, child_rng(6))
    assert letters.shape == (5, 30)
    assert letters.min() >= 0 and letters.max() < 20


def test_loglik_rejects_foreign_letters(small_generator):
    with pytest.raises(GeneratorError):
        true_loglik(small_generator, 'MKX')


def test_noise_free_assay_is_exact(small_generator):
    wildtype = sample_sequence(small_generator, 6, child_rng(7))
    assay = make_assay(small_generator, wildtype, 0.0, child_rng(8))
    assert len(assay) == 19 * 6
    base = true_loglik(small_generator, wildtype)
    truth = []
    for variant in assay.variants:
        mutation = variant.mutations[0]
        mutant = wildtype[:mutation.index] + mutation.mutant_aa + wildtype[mutation.index + 1:]
        truth.append(true_loglik(small_generator, mutant) - base)
    assert assay.measurements.tolist() == truth
    assert spearman(assay.measurements, truth) == pytest.approx(1.0)


def test_noisy_assay_is_reproducible(small_generator):
    a = make_assay(small_generator, 'MKTA', 0.5, child_rng(8))
    b = make_assay(small_generator, 'MKTA', 0.5, child_rng(8))
    assert np.array_equal(a.measurements, b.measurements)
    with pytest.raises(GeneratorError):
        make_assay(small_generator, 'MKTA', -1.0, child_rng(8))


def test_generator_file_round_trip(small_generator, tmp_path):
    path = save_generator(small_generator, tmp_path / 'generator.json')
    loaded = load_generator(path)
    assert np.array_equal(loaded.transition, small_generator.transition)
    assert np.array_equal(loaded.emission, small_generator.emission)
    with pytest.raises(FileNotFoundError):
        load_generator(tmp_path / 'missing.json')
    (tmp_path / 'broken.json').write_text('{not json')
    with pytest.raises(GeneratorError):
        load_generator(tmp_path / 'broken.json')


def test_assay_csv_parses_back(small_generator, tmp_path):
    assay = make_assay(small_generator, 'MKTAY', 0.1, child_rng(8))
    path = write_assay_csv(assay, tmp_path / 'assay.csv')
    parsed = parse_assay(path.read_bytes(), 'MKTAY')
    assert [v.code for v in parsed.variants] == [v.code for v in assay.variants]
    assert np.allclose(parsed.measurements, assay.measurements, rtol=1e-8)
