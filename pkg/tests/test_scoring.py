import numpy as np
import pytest

from core.errors import AssayFormatError, ScoringError
from core.model import AA_TO_ID, BOS_ID, MASK_ID, encode_sequence, forward, readout
from core.numerics import log_softmax
from services.scoring_service import (Assay, Mutation, Variant, apply_mutations, ar_score, ar_variant_score,
                                      average_spearman, format_mutation, layerwise_spearman,
                                      masked_marginal_score, parse_assay, parse_mutation, score_variants)

WILDTYPE = 'MKTAYIAK'


def test_mutation_codes():
    mutation = parse_mutation('W24K')
    assert mutation == Mutation('W', 24, 'K')
    assert format_mutation(mutation) == 'W24K'
    with pytest.raises(AssayFormatError):
        parse_mutation('24K')


def test_parse_assay_reads_multi_mutants():
    data = b"mutant,DMS_score,mutated_sequence\nK2A,0.5,ignored\nK2A:Y5F,-1.25,ignored\n"
    assay = parse_assay(data, WILDTYPE, 'demo')
    assert len(assay) == 2
    assert assay.variants[1].mutations == (Mutation('K', 2, 'A'), Mutation('Y', 5, 'F'))
    assert assay.measurements.tolist() == [0.5, -1.25]


def test_parse_assay_reports_mismatched_rows():
    data = b"mutant,DMS_score\nK2A,0.5\nA2C,0.1\nY5F,0.2\nG5A,0.3\n"
    with pytest.raises(AssayFormatError) as info:
        parse_assay(data, WILDTYPE)
    assert info.value.rows == [2, 4]


def test_parse_assay_missing_column():
    with pytest.raises(AssayFormatError, match='DMS_score'):
        parse_assay(b"mutant,score\nK2A,1\n", WILDTYPE)


def test_parse_assay_position_out_of_range():
    with pytest.raises(AssayFormatError) as info:
        parse_assay(b"mutant,DMS_score\nK20A,1\n", WILDTYPE)
    assert info.value.rows == [1]


def test_parse_assay_rejects_repeated_positions():
    data = b"mutant,DMS_score\nK2A:K2C,0.5\nT3G,0.1\n"
    with pytest.raises(AssayFormatError, match="same position twice") as info:
        parse_assay(data, WILDTYPE)
    assert info.value.rows == [1]
    assert info.value.code == "assay_format"


def test_apply_mutations():
    assert apply_mutations(WILDTYPE, [Mutation('M', 1, 'A'), Mutation('K', 8, 'R')]) == 'AKTAYIAR'
    with pytest.raises(AssayFormatError):
        apply_mutations(WILDTYPE, [Mutation('M', 1, 'A'), Mutation('M', 1, 'C')])


def masked_oracle(model, wildtype, mutation, layer):
    ids, _ = encode_sequence(wildtype)
    ids[mutation.index] = MASK_ID
    trace = forward(model, ids)
    logits = readout(model, trace.states[layer][mutation.index])
    log_probs = log_softmax(logits)
    return log_probs[AA_TO_ID[mutation.mutant_aa]] - log_probs[AA_TO_ID[mutation.wildtype_aa]]


def test_masked_marginal_matches_per_position_oracle(masked_model64):
    mutation = Mutation('Y', 5, 'W')
    for layer in (1, 2):
        expected = masked_oracle(masked_model64, WILDTYPE, mutation, layer)
        assert masked_marginal_score(masked_model64, WILDTYPE, [mutation], layer) == pytest.approx(expected, abs=1e-6)


def test_multi_mutation_score_is_exact_sum(masked_model):
    a, b = Mutation('K', 2, 'A'), Mutation('I', 6, 'L')
    single = masked_marginal_score(masked_model, WILDTYPE, [a], 2) + masked_marginal_score(masked_model, WILDTYPE, [b], 2)
    assert masked_marginal_score(masked_model, WILDTYPE, [a, b], 2) == single


def test_final_layer_masked_score_uses_native_logits(masked_model):
    mutation = Mutation('T', 3, 'G')
    ids, _ = encode_sequence(WILDTYPE)
    ids[2] = MASK_ID
    log_probs = log_softmax(forward(masked_model, ids).logits)
    expected = log_probs[2, AA_TO_ID['G']] - log_probs[2, AA_TO_ID['T']]
    assert masked_marginal_score(masked_model, WILDTYPE, [mutation], masked_model.num_layers) == expected


def test_masked_scoring_rejects_autoregressive_model(ar_model):
    with pytest.raises(ScoringError):
        masked_marginal_score(ar_model, WILDTYPE, [Mutation('K', 2, 'A')], 1)


def ar_prefix_oracle(model, sequence, layer):
    """Sum of next-token log-probs, each from a separate forward over the prefix only"""
    ids = [BOS_ID] + [AA_TO_ID[c] for c in sequence]
    total = 0.0
    for t in range(1, len(ids)):
        trace = forward(model, ids[:t])
        logits = readout(model, trace.states[layer][t - 1])
        total += log_softmax(logits)[ids[t]]
    return total


def test_ar_score_matches_prefix_oracle(ar_model64):
    for layer in (1, 2):
        expected = ar_prefix_oracle(ar_model64, 'MKTAYI', layer)
        assert ar_score(ar_model64, 'MKTAYI', layer) == pytest.approx(expected, abs=1e-6)


def test_ar_scoring_rejects_non_standard_letters(ar_model):
    with pytest.raises(ScoringError, match="1 non-standard letter"):
        ar_score(ar_model, "MKXAY", 1)
    with pytest.raises(ScoringError, match="non-standard"):
        ar_variant_score(ar_model, "MKTAYIAB", [Mutation("K", 2, "A")], 1)


def test_ar_length_normalisation(ar_model):
    total = ar_score(ar_model, 'MKTAY', 2)
    assert ar_score(ar_model, 'MKTAY', 2, length_normalize=True) == pytest.approx(total / 5)


def test_ar_variant_score_is_likelihood_ratio(ar_model):
    mutation = Mutation('K', 2, 'E')
    expected = ar_score(ar_model, 'METAYIAK', 1) - ar_score(ar_model, WILDTYPE, 1)
    assert ar_variant_score(ar_model, WILDTYPE, [mutation], 1) == pytest.approx(expected)


def test_layer_out_of_range(masked_model):
    with pytest.raises(ScoringError):
        masked_marginal_score(masked_model, WILDTYPE, [Mutation('K', 2, 'A')], 0)


def make_assay(measurements):
    codes = [Mutation('K', 2, 'A'), Mutation('T', 3, 'G'), Mutation('Y', 5, 'W'), Mutation('K', 8, 'R')]
    return Assay('toy', WILDTYPE, [Variant((m,), v) for m, v in zip(codes, measurements)])


def test_layerwise_spearman_table(masked_model):
    table = layerwise_spearman(masked_model, make_assay([0.1, 0.4, -0.3, 0.9]))
    assert table.scores.shape == (2, 4)
    assert table.relative_depth.tolist() == [0.5, 1.0]
    frame = table.spearman_frame()
    assert list(frame.columns) == ['layer', 'relative_depth', 'assay_id', 'spearman']
    variants = table.variant_frame()
    assert list(variants.columns) == ['layer', 'assay_id', 'mutant', 'score']
    assert len(variants) == 8


def test_zero_variance_assay_gives_undefined_rho(masked_model):
    table = layerwise_spearman(masked_model, make_assay([1.0, 1.0, 1.0, 1.0]))
    assert table.rho == [None, None]
    assert table.spearman_frame()['spearman'].isna().all()


def test_layerwise_spearman_is_thread_independent(ar_model):
    assay = make_assay([0.1, 0.4, -0.3, 0.9])
    one = layerwise_spearman(ar_model, assay, threads=1)
    two = layerwise_spearman(ar_model, assay, threads=2)
    assert np.array_equal(one.scores, two.scores)


def test_average_spearman_skips_undefined(masked_model):
    a = layerwise_spearman(masked_model, make_assay([0.1, 0.4, -0.3, 0.9]))
    b = layerwise_spearman(masked_model, make_assay([1.0, 1.0, 1.0, 1.0]))
    mean = average_spearman([a, b])
    assert mean.assay_id == '__mean__'
    assert mean.rho == a.rho
    assert average_spearman([b, b]).rho == [None, None]


SINGLES = [Mutation('K', 2, 'A'), Mutation('T', 3, 'G'), Mutation('A', 4, 'W'), Mutation('Y', 5, 'W'),
           Mutation('I', 6, 'L'), Mutation('K', 8, 'R')]


def test_synonymous_variant_scores_zero(masked_model, ar_model):
    same = [Mutation('K', 2, 'K')]
    for layer in (1, 2):
        assert masked_marginal_score(masked_model, WILDTYPE, same, layer) == 0.0
        assert ar_variant_score(ar_model, WILDTYPE, same, layer) == 0.0


def test_measurements_equal_to_final_layer_scores_correlate_perfectly(masked_model, ar_model):
    for model in (masked_model, ar_model):
        unscored = Assay('toy', WILDTYPE, [Variant((m,), 0.0) for m in SINGLES])
        final = score_variants(model, unscored)[-1]
        assay = Assay('toy', WILDTYPE, [Variant((m,), float(v)) for m, v in zip(SINGLES, final)])
        table = layerwise_spearman(model, assay)
        assert table.rho[-1] == pytest.approx(1.0, abs=1e-12)


def test_zero_update_model_gives_identical_rho_at_every_layer(zero_update_masked):
    assay = Assay('toy', WILDTYPE, [Variant((m,), v) for m, v in zip(SINGLES, [0.3, -1.0, 2.2, 0.1, -0.4, 1.5])])
    table = layerwise_spearman(zero_update_masked, assay)
    assert np.array_equal(table.scores[0], table.scores[1])
    assert np.array_equal(table.scores[0], table.scores[2])
    assert table.rho[0] == table.rho[1] == table.rho[2]


def test_rho_ignores_measurement_scale_and_row_order(masked_model):
    values = [0.3, -1.0, 2.2, 0.1, -0.4, 1.5]
    base = layerwise_spearman(masked_model, Assay('toy', WILDTYPE, [Variant((m,), v) for m, v in zip(SINGLES, values)]))
    scaled = layerwise_spearman(masked_model,
                                Assay('toy', WILDTYPE, [Variant((m,), 7.5 * v) for m, v in zip(SINGLES, values)]))
    order = [4, 0, 5, 2, 1, 3]
    shuffled = layerwise_spearman(masked_model,
                                  Assay('toy', WILDTYPE, [Variant((SINGLES[i],), values[i]) for i in order]))
    assert scaled.rho == base.rho
    assert shuffled.rho == pytest.approx(base.rho, abs=1e-12)
