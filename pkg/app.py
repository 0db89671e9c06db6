#!/usr/bin/env python3
"""
DepthProbe Command-Line Application
Runs the synth, train, skiplayer, lens and score experiments and writes CSV, SVG and manifest outputs

Usage:
    python app.py synth --out data --seed 7
    python app.py train --generator data/generator.json --out model --seed 7
    python app.py skiplayer --model model/model.dpw --prompts data/prompts.fasta --out skip --seed 7
    python app.py lens --model model/model.dpw --model other/model.dpw --prompts data/prompts.fasta --out lens
    python app.py score --model model/model.dpw --assay data/assay_0.csv --wildtype data/wildtype_0.fasta --out score
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from backend.storage import RunManifest, fingerprint_file, load_model, write_csv
from config import EXPERIMENT_CONFIG, get_config, get_thread_count
from core.errors import DepthProbeError
from core.model import Model, ModelConfig, ObjectiveMode
from core.sequence_io import load_prompts, read_wildtype, write_fasta
from services.intervention_service import EvalTarget, skiplayer_experiment
from services.lens_service import lens_profile
from services.scoring_service import MEAN_ASSAY_ID, average_spearman, layerwise_spearman, parse_assay
from services.synth_generator import (build_generator, load_generator, make_assay, sample_sequences,
                                      save_generator, write_assay_csv)
from services.training_service import TrainConfig, train
from utils.logging_setup import configure_logging
from utils.rng import STREAM_SYNTH, child_rng
from utils.svg_report import LineSeries, emit_heatmap, emit_lines, write_svg

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad command line"""


class DepthProbeParser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of printing usage and exiting"""

    def error(self, message):
        raise UsageError(message)


def parse_bool(value: str) -> bool:
    lowered = str(value).strip().lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got '{value}'")


def non_negative_int(value: str) -> int:
    number = int(value)
    if number < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value}")
    return number


# ==============================================================================
# COMMANDS
# ==============================================================================

def _start_manifest(args: argparse.Namespace, model_paths: Sequence[Path] = ()) -> RunManifest:
    snapshot: Dict[str, Any] = {}
    for key, value in sorted(vars(args).items()):
        if key in ('handler', 'threads'):
            continue
        if isinstance(value, Path):
            value = str(value)
        elif isinstance(value, list):
            value = [str(v) for v in value]
        snapshot[key] = value
    models = {label: fingerprint_file(path) for label, path in zip(model_labels(model_paths), model_paths)}
    fingerprint = next(iter(models.values())) if len(models) == 1 else None
    return RunManifest(command=args.command, config=snapshot, seed=args.seed, model_fingerprint=fingerprint,
                       models=models)


def model_labels(paths: Sequence[Path]) -> List[str]:
    """File stems, widened with the parent directory (then an index) until unique"""
    paths = [Path(p) for p in paths]
    labels = [p.stem for p in paths]
    if len(set(labels)) < len(labels):
        labels = [f'{p.parent.name}_{p.stem}' if p.parent.name else p.stem for p in paths]
    if len(set(labels)) < len(labels):
        labels = [f'{index}_{label}' for index, label in enumerate(labels)]
    return labels


def _load_models(paths: Sequence[Path]) -> List[Tuple[str, Model]]:
    return [(label, load_model(path)) for label, path in zip(model_labels(paths), paths)]


def _with_model(frame: pd.DataFrame, label: str) -> pd.DataFrame:
    frame = frame.copy()
    frame.insert(0, 'model', label)
    return frame


def _series_name(label: str, name: str, many: bool) -> str:
    return f'{label}: {name}' if many else name


def cmd_synth(args: argparse.Namespace) -> List[Path]:
    """Generator, prompt FASTA and synthetic assays"""
    out = get_config().init_output_dir(args.out)
    manifest = _start_manifest(args)
    threads = get_thread_count(args.threads)

    generator = build_generator(args.states, args.concentration, child_rng(args.seed, STREAM_SYNTH, 0))
    outputs = [save_generator(generator, out / 'generator.json')]

    prompts = sample_sequences(generator, args.num_prompts, args.prompt_length, args.seed,
                               keys=(STREAM_SYNTH, 1), threads=threads)
    outputs.append(write_fasta(out / 'prompts.fasta', [(f'prompt_{i}', s) for i, s in enumerate(prompts)]))

    wildtypes = sample_sequences(generator, args.num_assays, args.wildtype_length, args.seed,
                                 keys=(STREAM_SYNTH, 2), threads=threads)
    for index, wildtype in enumerate(wildtypes):
        assay = make_assay(generator, wildtype, args.noise_sigma, child_rng(args.seed, STREAM_SYNTH, 3, index),
                           assay_id=f'assay_{index}')
        outputs.append(write_fasta(out / f'wildtype_{index}.fasta', [(f'wildtype_{index}', wildtype)]))
        outputs.append(write_assay_csv(assay, out / f'assay_{index}.csv'))

    manifest.finish(outputs).write(out)
    return outputs


def cmd_train(args: argparse.Namespace) -> List[Path]:
    """Train a model on generator samples"""
    out = get_config().init_output_dir(args.out)
    manifest = _start_manifest(args)
    generator = load_generator(args.generator)

    model_config = ModelConfig(
        num_layers=args.layers,
        d_model=args.d_model,
        num_heads=args.heads,
        d_ff=args.d_ff,
        max_seq_len=args.max_seq_len,
        objective_mode=ObjectiveMode.parse(args.objective),
    )
    config = TrainConfig(
        model=model_config,
        mask_rate=args.mask_rate,
        steps=args.steps,
        batch_size=args.batch_size,
        seq_len=args.seq_len,
        learning_rate=args.lr,
        seed=args.seed,
        grad_shards=args.grad_shards,
        heldout_size=args.heldout_size,
        eval_every=args.eval_every,
    )
    result = train(config, generator, out_dir=out, threads=get_thread_count(args.threads))

    curve = result.curve
    progress = curve['step'].to_numpy(dtype=np.float64) / config.steps
    svg = emit_lines(
        [LineSeries('train loss', progress, curve['loss'].to_numpy()),
         LineSeries('held-out loss', progress, curve['heldout_loss'].to_numpy())],
        title='Training loss', x_label='training progress', y_label='cross-entropy (nats)')
    outputs = result.outputs + [write_svg(svg, out / 'train_curve.svg')]

    manifest.model_fingerprint = fingerprint_file(result.checkpoint)
    manifest.finish(outputs).write(out)
    return outputs


def cmd_skiplayer(args: argparse.Namespace) -> List[Path]:
    """Skip every layer of every model and record propagated and output effects"""
    out = get_config().init_output_dir(args.out)
    manifest = _start_manifest(args, args.model)
    threads = get_thread_count(args.threads)
    models = _load_models(args.model)
    many = len(models) > 1

    propagated_frames, output_frames, series, outputs = [], [], [], []
    for label, model in models:
        prompts = load_prompts(args.prompts, model.config.objective_mode).prompts
        matrix = skiplayer_experiment(model, prompts, repeats=args.repeats, seed=args.seed,
                                      mask_rate=args.mask_rate, eval_target=args.eval_target, threads=threads)
        output_frame = matrix.output_frame()
        propagated_frames.append(_with_model(matrix.propagated_frame(), label))
        output_frames.append(_with_model(output_frame, label))

        depth = output_frame['relative_depth'].to_numpy()
        series.append(LineSeries(_series_name(label, 'max prob L2', many), depth,
                                 output_frame['max_prob_l2'].to_numpy()))
        series.append(LineSeries(_series_name(label, 'max logit L2', many), depth,
                                 output_frame['max_logit_l2'].to_numpy()))

        L = model.num_layers
        heatmap = emit_heatmap(matrix.propagated[:, 1:], row_labels=range(L), col_labels=range(1, L + 1))
        name = f'skiplayer_heatmap_{label}.svg' if many else 'skiplayer_heatmap.svg'
        outputs.append(write_svg(heatmap, out / name))

    output_svg = emit_lines(series, title='Output effect of skipping each layer',
                            x_label='relative depth of skipped layer', y_label='max L2 change')
    outputs += [
        write_csv(pd.concat(propagated_frames, ignore_index=True), out / 'skiplayer_propagated.csv'),
        write_csv(pd.concat(output_frames, ignore_index=True), out / 'skiplayer_output.csv'),
        write_svg(output_svg, out / 'skiplayer_output.svg'),
    ]
    manifest.finish(outputs).write(out)
    return outputs


def cmd_lens(args: argparse.Namespace) -> List[Path]:
    """LogitLens KL and top-1 agreement per layer, one profile per model"""
    out = get_config().init_output_dir(args.out)
    manifest = _start_manifest(args, args.model)
    threads = get_thread_count(args.threads)
    models = _load_models(args.model)
    many = len(models) > 1

    frames, kl_series, top1_series = [], [], []
    for label, model in models:
        prompts = load_prompts(args.prompts, model.config.objective_mode).prompts
        profile = lens_profile(model, prompts, seed=args.seed, mask_rate=args.mask_rate, threads=threads)
        frames.append(_with_model(profile.to_frame(), label))
        depth = profile.relative_depth
        kl_series.append(LineSeries(_series_name(label, 'mean KL', many), depth, profile.mean_kl))
        top1_series.append(LineSeries(_series_name(label, 'top-1 overlap', many), depth, profile.top1_overlap))

    kl_svg = emit_lines(kl_series, title='KL(final || layer) by depth', y_label='mean KL (nats)')
    top1_svg = emit_lines(top1_series, title='Top-1 agreement with the final layer', y_label='top-1 overlap')

    outputs = [
        write_csv(pd.concat(frames, ignore_index=True), out / 'lens_profile.csv'),
        write_svg(kl_svg, out / 'lens_kl.svg'),
        write_svg(top1_svg, out / 'lens_top1.svg'),
    ]
    manifest.finish(outputs).write(out)
    return outputs


def cmd_score(args: argparse.Namespace) -> List[Path]:
    """Layer-wise zero-shot scoring of one or more assays with one or more models"""
    if len(args.assay) != len(args.wildtype):
        raise UsageError(f"got {len(args.assay)} --assay but {len(args.wildtype)} --wildtype")
    out = get_config().init_output_dir(args.out)
    manifest = _start_manifest(args, args.model)
    threads = get_thread_count(args.threads)

    assays = []
    for assay_path, wildtype_path in zip(args.assay, args.wildtype):
        assay_path = Path(assay_path)
        if not assay_path.exists():
            raise FileNotFoundError(f"Assay file not found: {assay_path}")
        wildtype = read_wildtype(wildtype_path).sequence
        assays.append(parse_assay(assay_path.read_bytes(), wildtype, assay_id=assay_path.stem))

    models = _load_models(args.model)
    many = len(models) > 1
    spearman_frames, variant_frames, series = [], [], []
    for label, model in models:
        tables = [layerwise_spearman(model, assay, length_normalize=args.length_normalize, threads=threads)
                  for assay in assays]
        if len(tables) > 1:
            tables.append(average_spearman(tables))
        for table in tables:
            spearman_frames.append(_with_model(table.spearman_frame(), label))
            name = 'mean' if table.assay_id == MEAN_ASSAY_ID else table.assay_id
            series.append(LineSeries(_series_name(label, name, many), table.relative_depth,
                                     [np.nan if r is None else r for r in table.rho]))
            if table.assay_id != MEAN_ASSAY_ID:
                variant_frames.append(_with_model(table.variant_frame(), label))

    svg = emit_lines(series, title='Spearman correlation by depth', y_label='Spearman rho')
    outputs = [
        write_csv(pd.concat(spearman_frames, ignore_index=True), out / 'scores.csv'),
        write_csv(pd.concat(variant_frames, ignore_index=True), out / 'variant_scores.csv'),
        write_svg(svg, out / 'spearman.svg'),
    ]
    manifest.finish(outputs).write(out)
    return outputs


# ==============================================================================
# ARGUMENTS
# ==============================================================================

def _common(parser: argparse.ArgumentParser, needs_model: bool = False, needs_prompts: bool = False) -> None:
    parser.add_argument('--out', type=Path, required=True, help='Output directory')
    parser.add_argument('--seed', type=non_negative_int, default=get_config().DEFAULT_SEED, help='Master seed')
    parser.add_argument('--threads', type=int, default=None, help='Worker cap (default: machine parallelism)')
    if needs_model:
        parser.add_argument('--model', type=Path, action='append', required=True,
                            help='Model weights (.dpw); repeat to compare models on relative depth')
    if needs_prompts:
        parser.add_argument('--prompts', type=Path, required=True, help='Prompt file (FASTA or one sequence per line)')


def build_parser() -> argparse.ArgumentParser:
    synth_defaults = EXPERIMENT_CONFIG['synth']
    train_defaults = EXPERIMENT_CONFIG['training']
    model_defaults = EXPERIMENT_CONFIG['model']
    skip_defaults = EXPERIMENT_CONFIG['skiplayer']

    parser = DepthProbeParser(prog='depthprobe', description='Depth analysis toolkit for small protein transformers')
    commands = parser.add_subparsers(dest='command', required=True, parser_class=DepthProbeParser)

    synth = commands.add_parser('synth', help='Build a synthetic generator, prompts and assays')
    _common(synth)
    synth.add_argument('--states', type=int, default=synth_defaults['num_states'], help='Hidden states K')
    synth.add_argument('--concentration', type=float, default=synth_defaults['concentration'])
    synth.add_argument('--num-prompts', type=int, default=synth_defaults['num_prompts'])
    synth.add_argument('--prompt-length', type=int, default=synth_defaults['prompt_length'])
    synth.add_argument('--wildtype-length', type=int, default=synth_defaults['wildtype_length'])
    synth.add_argument('--noise-sigma', type=float, default=synth_defaults['noise_sigma'])
    synth.add_argument('--num-assays', type=int, default=synth_defaults['num_assays'])
    synth.set_defaults(handler=cmd_synth)

    trainer = commands.add_parser('train', help='Train a model on synthetic sequences')
    _common(trainer)
    trainer.add_argument('--generator', type=Path, required=True, help='generator.json written by synth')
    trainer.add_argument('--objective', choices=[m.value for m in ObjectiveMode], default=ObjectiveMode.MASKED.value)
    trainer.add_argument('--layers', type=int, default=model_defaults['num_layers'])
    trainer.add_argument('--d-model', type=int, default=model_defaults['d_model'])
    trainer.add_argument('--heads', type=int, default=model_defaults['num_heads'])
    trainer.add_argument('--d-ff', type=int, default=model_defaults['d_ff'])
    trainer.add_argument('--max-seq-len', type=int, default=model_defaults['max_seq_len'])
    trainer.add_argument('--steps', type=int, default=train_defaults['steps'])
    trainer.add_argument('--batch-size', type=int, default=train_defaults['batch_size'])
    trainer.add_argument('--seq-len', type=int, default=train_defaults['seq_len'])
    trainer.add_argument('--lr', type=float, default=train_defaults['learning_rate'])
    trainer.add_argument('--mask-rate', type=float, default=train_defaults['mask_rate'])
    trainer.add_argument('--grad-shards', type=int, default=train_defaults['grad_shards'])
    trainer.add_argument('--heldout-size', type=int, default=train_defaults['heldout_size'])
    trainer.add_argument('--eval-every', type=int, default=train_defaults['eval_every'])
    trainer.set_defaults(handler=cmd_train)

    skip = commands.add_parser('skiplayer', help='Layer-skip propagated-effect experiment')
    _common(skip, needs_model=True, needs_prompts=True)
    skip.add_argument('--repeats', type=int, default=skip_defaults['repeats'])
    skip.add_argument('--mask-rate', type=float, default=skip_defaults['mask_rate'])
    skip.add_argument('--eval-target', choices=[t.value for t in EvalTarget], default=EvalTarget.MASKED.value)
    skip.set_defaults(handler=cmd_skiplayer)

    lens = commands.add_parser('lens', help='LogitLens depth profile')
    _common(lens, needs_model=True, needs_prompts=True)
    lens.add_argument('--mask-rate', type=float, default=EXPERIMENT_CONFIG['lens']['mask_rate'])
    lens.set_defaults(handler=cmd_lens)

    score = commands.add_parser('score', help='Layer-wise zero-shot mutation scoring')
    _common(score, needs_model=True)
    score.add_argument('--assay', action='append', required=True, help='Assay CSV (repeatable)')
    score.add_argument('--wildtype', action='append', required=True, help='Wildtype FASTA, one per --assay')
    score.add_argument('--length-normalize', type=parse_bool, nargs='?', const=True,
                       default=EXPERIMENT_CONFIG['scoring']['length_normalize'])
    score.set_defaults(handler=cmd_score)

    return parser


def _report(code: str, message: str) -> None:
    one_line = ' '.join(str(message).split())
    print(f"error={code} message={one_line}", file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse, run one command and map failures to exit codes"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        _report('usage', e)
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return int(e.code or 0)

    configure_logging()
    try:
        outputs = args.handler(args)
    except UsageError as e:
        _report('usage', e)
        return EXIT_USAGE
    except DepthProbeError as e:
        _report(e.code, e)
        return EXIT_FAILURE
    except FileNotFoundError as e:
        _report('missing_file', e)
        return EXIT_FAILURE
    except OSError as e:
        _report('io', e)
        return EXIT_FAILURE

    logger.info(f"{args.command} finished with {len(outputs)} output files in {args.out}")
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
