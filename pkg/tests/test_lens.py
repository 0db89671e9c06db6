import numpy as np
import pytest

from core.model import BOS_ID, Prompt, forward, mask_prompt, readout
from services.lens_service import LensProfile, lens_distributions, lens_kl_profile, lens_profile, lens_top1_profile
from utils.rng import STREAM_LENS, child_rng, content_key


def test_final_layer_matches_the_model_exactly(four_layer_masked, prompts):
    profile = lens_profile(four_layer_masked, prompts, seed=3)
    assert profile.mean_kl[-1] <= 1e-9
    assert profile.top1_overlap[-1] == 1.0
    assert np.all(profile.mean_kl >= -1e-9)


def test_final_layer_distribution_is_the_trace_distribution(four_layer_ar):
    trace = forward(four_layer_ar, [BOS_ID, 1, 2, 3, 4])
    distributions = lens_distributions(four_layer_ar, trace)
    assert np.array_equal(distributions[-1], trace.probabilities())


def test_autoregressive_profile_counts_every_position(four_layer_ar):
    prompts = [Prompt((BOS_ID, 1, 2, 3, 4, 5)), Prompt((BOS_ID, 9, 8, 7))]
    profile = lens_profile(four_layer_ar, prompts)
    assert profile.n_positions == 6 + 4
    assert profile.eval_policy == 'all-AR-positions'
    assert profile.mean_kl[-1] <= 1e-9


def test_masked_profile_counts_masked_positions(masked_model, prompts):
    profile = lens_profile(masked_model, prompts, seed=0, mask_rate=0.15)
    assert profile.n_positions == 2 + 3 + 2 + 3
    assert profile.eval_policy == 'masked-positions'


def test_zero_update_model_has_identical_layers(zero_update_masked, prompts):
    profile = lens_profile(zero_update_masked, prompts, seed=1)
    assert np.all(profile.mean_kl == 0.0)
    assert np.all(profile.top1_overlap == 1.0)


def test_profiles_are_seeded_and_thread_independent(four_layer_masked, prompts):
    a = lens_kl_profile(four_layer_masked, prompts, seed=4, threads=1)
    b = lens_kl_profile(four_layer_masked, prompts, seed=4, threads=3)
    assert np.array_equal(a, b)
    assert lens_top1_profile(four_layer_masked, prompts, seed=4).shape == (4,)


def test_merge_is_position_weighted():
    a = LensProfile(2, np.array([1.0, 0.0]), np.array([1, 1]), 1, 0, 'masked-positions')
    b = LensProfile(2, np.array([3.0, 0.0]), np.array([0, 3]), 3, 0, 'masked-positions')
    merged = a.merge(b)
    assert merged.mean_kl.tolist() == [1.0, 0.0]
    assert merged.top1_overlap.tolist() == [0.25, 1.0]
    frame = merged.to_frame()
    assert list(frame.columns) == ['layer', 'relative_depth', 'mean_kl', 'top1_overlap', 'n_positions']
    assert frame['relative_depth'].tolist() == [0.5, 1.0]


def test_empty_profile_is_undefined():
    profile = LensProfile.empty(3, 'masked-positions')
    assert np.isnan(profile.mean_kl).all()
    assert profile.to_frame()['n_positions'].tolist() == [0, 0, 0]


def reference_profile(model, trace, positions):
    """Per-layer mean KL(p_L || p_l) and top-1 agreement, one position at a time"""
    L = model.num_layers
    layer_probs = []
    for layer in range(1, L + 1):
        logits = readout(model, trace.states[layer])
        exps = np.exp(logits - logits.max(axis=-1, keepdims=True))
        layer_probs.append(exps / exps.sum(axis=-1, keepdims=True))

    kl, top1 = np.zeros(L), np.zeros(L)
    for layer in range(L):
        for t in positions:
            p, q = layer_probs[-1][t], layer_probs[layer][t]
            kl[layer] += float(np.sum(p * (np.log(p) - np.log(q))))
            top1[layer] += float(np.argmax(q) == np.argmax(p))
    return kl / len(positions), top1 / len(positions)


def test_autoregressive_profile_matches_position_by_position_reference(four_layer_ar):
    prompt = Prompt((BOS_ID, 4, 11, 0, 19, 7, 7, 2, 15))
    trace = forward(four_layer_ar, prompt)
    kl, top1 = reference_profile(four_layer_ar, trace, range(len(prompt)))

    profile = lens_profile(four_layer_ar, [prompt])
    assert np.allclose(profile.mean_kl, kl, rtol=1e-9, atol=1e-12)
    assert profile.top1_overlap.tolist() == top1.tolist()


def test_masked_profile_matches_position_by_position_reference(four_layer_masked):
    prompt = Prompt(tuple(np.random.default_rng(2).integers(0, 20, size=20)))
    masked, positions = mask_prompt(prompt, 0.15, child_rng(8, STREAM_LENS, content_key(prompt.token_ids)))
    trace = forward(four_layer_masked, masked)
    kl, top1 = reference_profile(four_layer_masked, trace, positions)

    profile = lens_profile(four_layer_masked, [prompt], seed=8, mask_rate=0.15)
    assert profile.n_positions == len(positions) == 3
    assert np.allclose(profile.mean_kl, kl, rtol=1e-9, atol=1e-12)
    assert profile.top1_overlap.tolist() == top1.tolist()


def test_masked_profile_of_union_equals_merged_profiles(masked_model, prompts):
    union = lens_profile(masked_model, prompts, seed=6)
    merged = lens_profile(masked_model, prompts[:2], seed=6).merge(lens_profile(masked_model, prompts[2:], seed=6))
    assert merged.n_positions == union.n_positions
    assert np.allclose(merged.kl_sum, union.kl_sum, rtol=1e-12, atol=0)
    assert np.array_equal(merged.agree_count, union.agree_count)
    assert np.allclose(merged.mean_kl, union.mean_kl, rtol=1e-12, atol=0)


def test_masked_profile_ignores_prompt_order(masked_model, prompts):
    forwards = lens_profile(masked_model, prompts, seed=2)
    backwards = lens_profile(masked_model, prompts[::-1], seed=2)
    assert np.array_equal(forwards.agree_count, backwards.agree_count)
    assert np.allclose(forwards.kl_sum, backwards.kl_sum, rtol=1e-12, atol=0)
