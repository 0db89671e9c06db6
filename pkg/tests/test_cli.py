import json

import numpy as np
import pytest

from app import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from backend.storage.results import read_csv


@pytest.fixture(scope='module')
def workspace(tmp_path_factory):
    """Synthetic data plus a tiny masked model, shared by the command tests"""
    root = tmp_path_factory.mktemp('cli')
    data, model = root / 'data', root / 'model'
    assert main(['synth', '--out', str(data), '--seed', '7', '--states', '3', '--num-prompts', '6',
                 '--prompt-length', '16', '--wildtype-length', '6', '--num-assays', '2',
                 '--noise-sigma', '0.1']) == EXIT_OK
    assert main(['train', '--out', str(model), '--seed', '7', '--generator', str(data / 'generator.json'),
                 '--layers', '2', '--d-model', '8', '--heads', '2', '--d-ff', '16', '--max-seq-len', '32',
                 '--steps', '5', '--batch-size', '4', '--seq-len', '12', '--heldout-size', '4',
                 '--eval-every', '5', '--grad-shards', '2']) == EXIT_OK
    assert main(['train', '--out', str(root / 'deep'), '--seed', '8', '--generator', str(data / 'generator.json'),
                 '--layers', '4', '--d-model', '8', '--heads', '2', '--d-ff', '16', '--max-seq-len', '32',
                 '--steps', '3', '--batch-size', '4', '--seq-len', '12', '--heldout-size', '4',
                 '--eval-every', '3', '--grad-shards', '1']) == EXIT_OK
    return root


def test_synth_outputs(workspace):
    data = workspace / 'data'
    for name in ('generator.json', 'prompts.fasta', 'wildtype_0.fasta', 'wildtype_1.fasta',
                 'assay_0.csv', 'assay_1.csv', 'manifest.json'):
        assert (data / name).exists()
    assay = read_csv(data / 'assay_0.csv')
    assert list(assay.columns) == ['mutant', 'DMS_score', 'mutated_sequence']
    assert len(assay) == 19 * 6


def test_train_outputs_and_manifest(workspace):
    model = workspace / 'model'
    curve = read_csv(model / 'train_curve.csv')
    assert curve['step'].tolist() == [0, 1, 2, 3, 4, 5]
    assert (model / 'train_curve.svg').exists()
    manifest = json.loads((model / 'manifest.json').read_text())
    assert manifest['command'] == 'train'
    assert manifest['seed'] == 7
    assert len(manifest['model_fingerprint']) == 64
    assert 'model.dpw' in manifest['outputs']


def run_skiplayer(workspace, out, threads):
    return main(['skiplayer', '--out', str(out), '--seed', '3', '--threads', str(threads), '--repeats', '2',
                 '--model', str(workspace / 'model' / 'model.dpw'),
                 '--prompts', str(workspace / 'data' / 'prompts.fasta')])


def test_skiplayer_is_reproducible(workspace, tmp_path):
    assert run_skiplayer(workspace, tmp_path / 'a', 1) == EXIT_OK
    assert run_skiplayer(workspace, tmp_path / 'b', 3) == EXIT_OK
    for name in ('skiplayer_propagated.csv', 'skiplayer_output.csv'):
        assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()
    propagated = read_csv(tmp_path / 'a' / 'skiplayer_propagated.csv')
    assert list(propagated.columns) == ['model', 'source_layer', 'downstream_layer', 'max_l2', 'max_rel_l2']
    assert set(propagated['model']) == {'model'}
    assert (tmp_path / 'a' / 'skiplayer_heatmap.svg').exists()


def test_lens_final_layer_agrees_with_itself(workspace, tmp_path):
    assert main(['lens', '--out', str(tmp_path), '--model', str(workspace / 'model' / 'model.dpw'),
                 '--prompts', str(workspace / 'data' / 'prompts.fasta')]) == EXIT_OK
    profile = read_csv(tmp_path / 'lens_profile.csv')
    final = profile.iloc[-1]
    assert final['layer'] == 2
    assert final['mean_kl'] <= 1e-9
    assert final['top1_overlap'] == 1.0


def test_score_two_assays_adds_mean(workspace, tmp_path):
    data = workspace / 'data'
    assert main(['score', '--out', str(tmp_path), '--model', str(workspace / 'model' / 'model.dpw'),
                 '--assay', str(data / 'assay_0.csv'), '--wildtype', str(data / 'wildtype_0.fasta'),
                 '--assay', str(data / 'assay_1.csv'), '--wildtype', str(data / 'wildtype_1.fasta')]) == EXIT_OK
    scores = read_csv(tmp_path / 'scores.csv')
    assert list(scores.columns) == ['model', 'layer', 'relative_depth', 'assay_id', 'spearman']
    assert scores['assay_id'].tolist() == ['assay_0', 'assay_0', 'assay_1', 'assay_1', '__mean__', '__mean__']
    variants = read_csv(tmp_path / 'variant_scores.csv')
    assert len(variants) == 2 * 2 * 19 * 6


def test_zero_variance_assay_reports_na(workspace, tmp_path):
    (tmp_path / 'flat.csv').write_text('mutant,DMS_score\nM1A,1.0\nM1C,1.0\nM1D,1.0\n')
    (tmp_path / 'wt.fasta').write_text('>wt\nMKTAYI\n')
    assert main(['score', '--out', str(tmp_path / 'out'), '--model', str(workspace / 'model' / 'model.dpw'),
                 '--assay', str(tmp_path / 'flat.csv'), '--wildtype', str(tmp_path / 'wt.fasta')]) == EXIT_OK
    scores = read_csv(tmp_path / 'out' / 'scores.csv')
    assert scores['spearman'].isna().all()
    assert 'NA' in (tmp_path / 'out' / 'scores.csv').read_text()


def test_unknown_flag_is_a_usage_error(capsys):
    assert main(['lens', '--bogus']) == EXIT_USAGE
    assert 'error=usage' in capsys.readouterr().err


def test_missing_model_file(tmp_path, capsys):
    code = main(['lens', '--out', str(tmp_path), '--model', str(tmp_path / 'none.dpw'),
                 '--prompts', str(tmp_path / 'none.fasta')])
    assert code == EXIT_FAILURE
    assert 'error=missing_file' in capsys.readouterr().err


def test_malformed_assay_exits_with_code(workspace, tmp_path, capsys):
    (tmp_path / 'bad.csv').write_text('mutant,DMS_score\nW1A,1.0\nM1C,2.0\n')
    (tmp_path / 'wt.fasta').write_text('>wt\nMKTAYI\n')
    code = main(['score', '--out', str(tmp_path / 'out'), '--model', str(workspace / 'model' / 'model.dpw'),
                 '--assay', str(tmp_path / 'bad.csv'), '--wildtype', str(tmp_path / 'wt.fasta')])
    assert code == EXIT_FAILURE
    err = capsys.readouterr().err
    assert 'error=assay_format' in err
    assert 'row(s) 1' in err


def test_directory_as_model_is_an_io_error(tmp_path, capsys):
    (tmp_path / 'prompts.txt').write_text('MKTAYIAKQR\n')
    code = main(['lens', '--out', str(tmp_path / 'out'), '--model', str(tmp_path),
                 '--prompts', str(tmp_path / 'prompts.txt')])
    assert code == EXIT_FAILURE
    assert 'error=io' in capsys.readouterr().err


def test_lens_compares_models_on_relative_depth(workspace, tmp_path):
    assert main(['lens', '--out', str(tmp_path), '--seed', '2',
                 '--model', str(workspace / 'model' / 'model.dpw'), '--model', str(workspace / 'deep' / 'model.dpw'),
                 '--prompts', str(workspace / 'data' / 'prompts.fasta')]) == EXIT_OK
    profile = read_csv(tmp_path / 'lens_profile.csv')
    assert profile['model'].tolist() == ['model_model'] * 2 + ['deep_model'] * 4
    assert profile['relative_depth'].tolist() == [0.5, 1.0, 0.25, 0.5, 0.75, 1.0]
    svg = (tmp_path / 'lens_kl.svg').read_text()
    assert 'model_model: mean KL' in svg and 'deep_model: mean KL' in svg

    manifest = json.loads((tmp_path / 'manifest.json').read_text())
    assert sorted(manifest['models']) == ['deep_model', 'model_model']
    assert manifest['model_fingerprint'] is None


def test_skiplayer_and_score_accept_several_models(workspace, tmp_path):
    models = ['--model', str(workspace / 'model' / 'model.dpw'), '--model', str(workspace / 'deep' / 'model.dpw')]
    data = workspace / 'data'
    assert main(['skiplayer', '--out', str(tmp_path / 'skip'), '--repeats', '1', *models,
                 '--prompts', str(data / 'prompts.fasta')]) == EXIT_OK
    output = read_csv(tmp_path / 'skip' / 'skiplayer_output.csv')
    assert output.groupby('model').size().to_dict() == {'deep_model': 4, 'model_model': 2}
    assert (tmp_path / 'skip' / 'skiplayer_heatmap_deep_model.svg').exists()
    assert (tmp_path / 'skip' / 'skiplayer_heatmap_model_model.svg').exists()

    assert main(['score', '--out', str(tmp_path / 'score'), *models,
                 '--assay', str(data / 'assay_0.csv'), '--wildtype', str(data / 'wildtype_0.fasta')]) == EXIT_OK
    scores = read_csv(tmp_path / 'score' / 'scores.csv')
    deep = scores[scores['model'] == 'deep_model']
    assert deep['relative_depth'].tolist() == [0.25, 0.5, 0.75, 1.0]
