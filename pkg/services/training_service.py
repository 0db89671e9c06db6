#!/usr/bin/env python3
"""
Desk-scale Training Service for DepthProbe
Masked and next-token training of the toy transformer with hand-derived gradients and Adam
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from backend.storage.container import save_model
from backend.storage.results import write_csv
from config import EXPERIMENT_CONFIG
from core.errors import NumericsError, TrainingError
from core.model import (BOS_ID, MASK_ID, Model, ModelConfig, ObjectiveMode, gelu_grad, init_model, layer_norm,
                        mask_count, merge_heads, run_blocks, split_heads, tensor_shapes)
from core.numerics import log_softmax, softmax
from services.synth_generator import SeqGenerator, sample_batch
from utils.parallel import ordered_map
from utils.rng import STREAM_HELDOUT, STREAM_INIT, STREAM_TRAIN, child_rng

logger = logging.getLogger(__name__)

IGNORE_INDEX = -1
CHECKPOINT_NAME = 'model.dpw'
CURVE_NAME = 'train_curve.csv'

_TRAIN = EXPERIMENT_CONFIG['training']


@dataclass(frozen=True)
class TrainConfig:
    """Training recipe; the objective is the model config's objective mode"""
    model: ModelConfig = field(default_factory=ModelConfig)
    mask_rate: float = _TRAIN['mask_rate']
    steps: int = _TRAIN['steps']
    batch_size: int = _TRAIN['batch_size']
    seq_len: int = _TRAIN['seq_len']
    learning_rate: float = _TRAIN['learning_rate']
    beta1: float = _TRAIN['beta1']
    beta2: float = _TRAIN['beta2']
    epsilon: float = _TRAIN['epsilon']
    seed: int = 0
    grad_shards: int = _TRAIN['grad_shards']
    heldout_size: int = _TRAIN['heldout_size']
    eval_every: int = _TRAIN['eval_every']

    def __post_init__(self):
        if not 0.0 < self.mask_rate < 1.0:
            raise TrainingError(f"mask rate must be in (0, 1), got {self.mask_rate}")
        if self.steps < 1:
            raise TrainingError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1 or self.heldout_size < 1 or self.grad_shards < 1 or self.eval_every < 1:
            raise TrainingError("batch_size, heldout_size, grad_shards and eval_every must be positive")
        if self.seq_len < 2:
            raise TrainingError(f"seq_len must be >= 2, got {self.seq_len}")
        needed = self.seq_len + (1 if self.objective is ObjectiveMode.AUTOREGRESSIVE else 0)
        if needed > self.model.max_seq_len:
            raise TrainingError(f"seq_len {self.seq_len} does not fit max_seq_len {self.model.max_seq_len}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0) or self.learning_rate <= 0 or self.epsilon <= 0:
            raise TrainingError("invalid optimizer hyperparameters")

    @property
    def objective(self) -> ObjectiveMode:
        return self.model.objective_mode

    def to_dict(self) -> Dict:
        return {
            'model': self.model.to_dict(),
            'objective': self.objective.value,
            'mask_rate': self.mask_rate,
            'steps': self.steps,
            'batch_size': self.batch_size,
            'seq_len': self.seq_len,
            'learning_rate': self.learning_rate,
            'beta1': self.beta1,
            'beta2': self.beta2,
            'epsilon': self.epsilon,
            'seed': self.seed,
            'grad_shards': self.grad_shards,
            'heldout_size': self.heldout_size,
            'eval_every': self.eval_every,
        }


@dataclass
class OptimizerState:
    """Adam moments per tensor plus the step counter"""
    first: Dict[str, np.ndarray]
    second: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, model: Model) -> 'OptimizerState':
        shapes = tensor_shapes(model.config)
        return cls(first={n: np.zeros(s) for n, s in shapes.items()},
                   second={n: np.zeros(s) for n, s in shapes.items()})


@dataclass
class Batch:
    """Input ids (B, T) and targets (B, T); IGNORE_INDEX marks positions without a loss"""
    input_ids: np.ndarray
    targets: np.ndarray

    @property
    def num_targets(self) -> int:
        return int(np.count_nonzero(self.targets != IGNORE_INDEX))

    def __len__(self) -> int:
        return self.input_ids.shape[0]


def make_batch(letters: np.ndarray, objective: Union[str, ObjectiveMode], mask_rate: float,
               rng: np.random.Generator) -> Batch:
    """
    Build model inputs from (B, n) letter ids

    Masked: ceil(rate * n) positions per row become MASK and are the only targets.
    Autoregressive: BOS is prepended and position t predicts token t + 1.
    """
    letters = np.asarray(letters, dtype=np.int64)
    B, n = letters.shape
    if ObjectiveMode.parse(objective) is ObjectiveMode.MASKED:
        inputs = letters.copy()
        targets = np.full_like(letters, IGNORE_INDEX)
        count = min(n, max(1, mask_count(mask_rate, n)))
        for row in range(B):
            positions = rng.choice(n, size=count, replace=False)
            targets[row, positions] = letters[row, positions]
            inputs[row, positions] = MASK_ID
        return Batch(inputs, targets)

    inputs = np.concatenate([np.full((B, 1), BOS_ID, dtype=np.int64), letters], axis=1)
    targets = np.concatenate([letters, np.full((B, 1), IGNORE_INDEX, dtype=np.int64)], axis=1)
    return Batch(inputs, targets)


# ==============================================================================
# BACKWARD PASS
# ==============================================================================

def _sum_bt(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """sum over batch and time of outer(x, dy): (B,T,i), (B,T,o) -> (i, o)"""
    return np.tensordot(x, dy, axes=([0, 1], [0, 1]))


def _layer_norm_backward(dy: np.ndarray, gain: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x_hat, inv_std = cache
    d_gain = (dy * x_hat).sum(axis=(0, 1))
    d_bias = dy.sum(axis=(0, 1))
    dx_hat = dy * gain
    dx = inv_std * (dx_hat - dx_hat.mean(axis=-1, keepdims=True)
                    - x_hat * (dx_hat * x_hat).mean(axis=-1, keepdims=True))
    return dx, d_gain, d_bias


def _attention_backward(model: Model, layer: int, d_out: np.ndarray, cache, grads: Dict[str, np.ndarray]) -> np.ndarray:
    prefix = f'blocks.{layer}.attn'
    a, q, k, v, probs, ctx = cache
    grads[f'{prefix}.w_o'] += _sum_bt(ctx, d_out)
    grads[f'{prefix}.b_o'] += d_out.sum(axis=(0, 1))

    d_ctx = split_heads(d_out @ model.w(f'{prefix}.w_o').T, model.config.num_heads)
    d_probs = d_ctx @ v.transpose(0, 1, 3, 2)
    dv = probs.transpose(0, 1, 3, 2) @ d_ctx
    d_scores = probs * (d_probs - (d_probs * probs).sum(axis=-1, keepdims=True))
    d_scores /= math.sqrt(model.config.head_dim)
    dq = d_scores @ k
    dk = d_scores.transpose(0, 1, 3, 2) @ q

    da = np.zeros_like(a)
    for name, d_heads in (('q', dq), ('k', dk), ('v', dv)):
        d_proj = merge_heads(d_heads)
        grads[f'{prefix}.w_{name}'] += _sum_bt(a, d_proj)
        grads[f'{prefix}.b_{name}'] += d_proj.sum(axis=(0, 1))
        da += d_proj @ model.w(f'{prefix}.w_{name}').T
    return da


def _mlp_backward(model: Model, layer: int, d_out: np.ndarray, cache, grads: Dict[str, np.ndarray]) -> np.ndarray:
    prefix = f'blocks.{layer}.mlp'
    b, u, g = cache
    grads[f'{prefix}.w_out'] += _sum_bt(g, d_out)
    grads[f'{prefix}.b_out'] += d_out.sum(axis=(0, 1))
    du = (d_out @ model.w(f'{prefix}.w_out').T) * gelu_grad(u)
    grads[f'{prefix}.w_in'] += _sum_bt(b, du)
    grads[f'{prefix}.b_in'] += du.sum(axis=(0, 1))
    return du @ model.w(f'{prefix}.w_in').T


def _loss_sums(model: Model, input_ids: np.ndarray, targets: np.ndarray) -> Tuple[float, Dict[str, np.ndarray], int]:
    """Summed cross-entropy, summed gradients and target count of one shard"""
    grads = {name: np.zeros(shape) for name, shape in tensor_shapes(model.config).items()}
    valid = targets != IGNORE_INDEX
    n_targets = int(np.count_nonzero(valid))
    if n_targets == 0:
        return 0.0, grads, 0

    eps = model.config.layer_norm_eps
    run = run_blocks(model, input_ids, model.config.causal, keep_cache=True)
    h_final = run.states[-1]
    z, final_cache = layer_norm(h_final, model.w('final_norm.gain'), model.w('final_norm.bias'), eps)
    logits = z @ model.w('unembed.weight') + model.w('unembed.bias')

    safe_targets = np.where(valid, targets, 0)
    log_probs = log_softmax(logits)
    picked = np.take_along_axis(log_probs, safe_targets[..., None], axis=-1)[..., 0]
    loss_sum = float(-picked[valid].sum())

    d_logits = softmax(logits)
    rows, cols = np.nonzero(valid)
    d_logits[rows, cols, safe_targets[rows, cols]] -= 1.0
    d_logits *= valid[..., None]

    grads['unembed.weight'] += _sum_bt(z, d_logits)
    grads['unembed.bias'] += d_logits.sum(axis=(0, 1))
    dh, d_gain, d_bias = _layer_norm_backward(d_logits @ model.w('unembed.weight').T,
                                              model.w('final_norm.gain'), final_cache)
    grads['final_norm.gain'] += d_gain
    grads['final_norm.bias'] += d_bias

    for layer in reversed(range(model.num_layers)):
        prefix = f'blocks.{layer}'
        cache = run.caches[layer]
        # h_next = h_mid + mlp(ln2(h_mid)), h_mid = h + attn(ln1(h))
        d_ln2 = _mlp_backward(model, layer, dh, cache['mlp'], grads)
        d_mid, d_gain, d_bias = _layer_norm_backward(d_ln2, model.w(f'{prefix}.ln2.gain'), cache['ln2'])
        grads[f'{prefix}.ln2.gain'] += d_gain
        grads[f'{prefix}.ln2.bias'] += d_bias
        dh_mid = dh + d_mid

        d_ln1 = _attention_backward(model, layer, dh_mid, cache['attn'], grads)
        d_in, d_gain, d_bias = _layer_norm_backward(d_ln1, model.w(f'{prefix}.ln1.gain'), cache['ln1'])
        grads[f'{prefix}.ln1.gain'] += d_gain
        grads[f'{prefix}.ln1.bias'] += d_bias
        dh = dh_mid + d_in

    T = input_ids.shape[1]
    np.add.at(grads['tok_embed'], input_ids.reshape(-1), dh.reshape(-1, dh.shape[-1]))
    grads['pos_embed'][:T] += dh.sum(axis=0)
    return loss_sum, grads, n_targets


def loss_and_grads(model: Model, batch: Batch, objective: Optional[Union[str, ObjectiveMode]] = None,
                   shards: int = 1, threads: int = 1) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Mean cross-entropy over target positions and its gradient for every tensor

    The batch is split into `shards` contiguous row groups whose sums are added
    in shard order, so the result does not depend on `threads`.
    """
    if objective is not None and ObjectiveMode.parse(objective) is not model.config.objective_mode:
        raise TrainingError(f"batch objective {ObjectiveMode.parse(objective).value} does not match the model")
    total_targets = batch.num_targets
    if total_targets == 0:
        raise TrainingError("batch has no target positions")

    bounds = np.array_split(np.arange(len(batch)), max(1, shards))
    pieces = [(batch.input_ids[rows], batch.targets[rows]) for rows in bounds if rows.size]
    partials = ordered_map(lambda piece: _loss_sums(model, *piece), pieces, threads)

    loss_sum, grads, _ = partials[0]
    for partial_loss, partial_grads, _ in partials[1:]:
        loss_sum += partial_loss
        for name, grad in partial_grads.items():
            grads[name] += grad

    scale = 1.0 / total_targets
    for name in grads:
        grads[name] *= scale
    return loss_sum * scale, grads


def evaluate_loss(model: Model, batch: Batch) -> float:
    """Mean cross-entropy without gradients"""
    if batch.num_targets == 0:
        raise TrainingError("batch has no target positions")
    run = run_blocks(model, batch.input_ids, model.config.causal)
    z, _ = layer_norm(run.states[-1], model.w('final_norm.gain'), model.w('final_norm.bias'),
                      model.config.layer_norm_eps)
    log_probs = log_softmax(z @ model.w('unembed.weight') + model.w('unembed.bias'))
    valid = batch.targets != IGNORE_INDEX
    picked = np.take_along_axis(log_probs, np.where(valid, batch.targets, 0)[..., None], axis=-1)[..., 0]
    return float(-picked[valid].sum() / batch.num_targets)


# ==============================================================================
# OPTIMIZER
# ==============================================================================

def adam_update(param: np.ndarray, grad: np.ndarray, first: np.ndarray, second: np.ndarray, step: int,
                config: TrainConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam update of a single tensor; `step` counts from 1"""
    first = config.beta1 * first + (1.0 - config.beta1) * grad
    second = config.beta2 * second + (1.0 - config.beta2) * grad * grad
    first_hat = first / (1.0 - config.beta1 ** step)
    second_hat = second / (1.0 - config.beta2 ** step)
    param = param - config.learning_rate * first_hat / (np.sqrt(second_hat) + config.epsilon)
    return param, first, second


def adam_step(model: Model, grads: Dict[str, np.ndarray], state: OptimizerState,
              config: TrainConfig) -> Tuple[Model, OptimizerState]:
    """Apply Adam to every tensor; aborts on the first non-finite gradient"""
    shapes = tensor_shapes(model.config)
    for name, shape in shapes.items():
        if name not in grads or np.shape(grads[name]) != shape:
            raise TrainingError(f"gradient for '{name}' missing or misshapen")
        if not np.all(np.isfinite(grads[name])):
            raise TrainingError(f"non-finite gradient in tensor '{name}'", code='non_finite_gradient')

    step = state.step + 1
    params, first, second = {}, {}, {}
    for name in shapes:
        params[name], first[name], second[name] = adam_update(
            model.params[name].astype(np.float64), grads[name], state.first[name], state.second[name], step, config)
    return model.with_params(params), OptimizerState(first, second, step)


# ==============================================================================
# TRAINING LOOP
# ==============================================================================

@dataclass
class TrainResult:
    model: Model
    curve: pd.DataFrame
    initial_heldout_loss: float
    final_heldout_loss: float
    checkpoint: Optional[Path] = None
    outputs: List[Path] = field(default_factory=list)


def heldout_batch(config: TrainConfig, generator: SeqGenerator) -> Batch:
    letters = sample_batch(generator, config.heldout_size, config.seq_len, child_rng(config.seed, STREAM_HELDOUT, 0))
    return make_batch(letters, config.objective, config.mask_rate, child_rng(config.seed, STREAM_HELDOUT, 1))


def training_batch(config: TrainConfig, generator: SeqGenerator, step: int) -> Batch:
    letters = sample_batch(generator, config.batch_size, config.seq_len, child_rng(config.seed, STREAM_TRAIN, step, 0))
    return make_batch(letters, config.objective, config.mask_rate, child_rng(config.seed, STREAM_TRAIN, step, 1))


def initial_model(config: TrainConfig) -> Model:
    """Seeded model with a zero unembedding, so every first prediction is uniform"""
    return init_model(config.model, child_rng(config.seed, STREAM_INIT), zero_readout=True)


def train(config: TrainConfig, generator: SeqGenerator, out_dir: Optional[Union[str, Path]] = None,
          threads: int = 1) -> TrainResult:
    """
    Train from the seeded initialisation

    Writes model.dpw and train_curve.csv (step, loss, heldout_loss) when out_dir is given.
    Identical config and generator give bit-identical weights whatever `threads` is.
    """
    model = initial_model(config)
    state = OptimizerState.zeros(model)
    heldout = heldout_batch(config, generator)
    initial_loss = evaluate_loss(model, heldout)
    logger.info(f"Training {model!r} for {config.steps} steps; initial held-out loss {initial_loss:.4f}")

    rows = [{'step': 0, 'loss': np.nan, 'heldout_loss': initial_loss}]
    heldout_loss = initial_loss
    for step in range(1, config.steps + 1):
        batch = training_batch(config, generator, step)
        try:
            loss, grads = loss_and_grads(model, batch, shards=config.grad_shards, threads=threads)
        except NumericsError as e:
            raise TrainingError(f"loss diverged at step {step}", code='diverged') from e
        if not math.isfinite(loss):
            raise TrainingError(f"loss diverged at step {step}", code='diverged')
        try:
            model, state = adam_step(model, grads, state, config)
        except TrainingError as e:
            raise TrainingError(f"step {step}: {e}", code=e.code) from e

        row = {'step': step, 'loss': loss, 'heldout_loss': np.nan}
        if step % config.eval_every == 0 or step == config.steps:
            heldout_loss = evaluate_loss(model, heldout)
            row['heldout_loss'] = heldout_loss
            logger.info(f"step {step}: train loss {loss:.4f}, held-out loss {heldout_loss:.4f}")
        rows.append(row)

    curve = pd.DataFrame(rows, columns=['step', 'loss', 'heldout_loss'])
    result = TrainResult(model=model, curve=curve, initial_heldout_loss=initial_loss, final_heldout_loss=heldout_loss)

    if out_dir is not None:
        out_dir = Path(out_dir)
        result.checkpoint = save_model(model, out_dir / CHECKPOINT_NAME)
        result.outputs = [result.checkpoint, write_csv(curve, out_dir / CURVE_NAME)]

    logger.info(f"Training finished: held-out loss {initial_loss:.4f} -> {heldout_loss:.4f}")
    return result
