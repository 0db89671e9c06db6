#!/usr/bin/env python3
"""
Layer-Skip Intervention Service for DepthProbe
Skips one block's update at chosen positions and measures how far the change propagates

Future positions are the tokens after a split point (autoregressive models) or the
held-out, non-intervened masked tokens (masked models).
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import EXPERIMENT_CONFIG
from core.errors import DepthProbeError, InterventionError
from core.model import Model, ObjectiveMode, Prompt, ResidualTrace, forward, mask_prompt
from core.numerics import row_l2_norms, softmax
from utils.parallel import ordered_map
from utils.rng import STREAM_SKIPLAYER, child_rng, content_key

logger = logging.getLogger(__name__)

SKIP_DEFAULTS = EXPERIMENT_CONFIG['skiplayer']


class InterventionKind(Enum):
    """How the intervened positions were chosen"""
    AR_SPLIT = "ar_split"
    MASKED_SUBSET = "masked_subset"


class EvalTarget(Enum):
    """Which non-intervened positions count as future positions in masked mode"""
    MASKED = "masked"   # remaining masked positions only
    ALL = "all"         # every non-intervened position

    @classmethod
    def parse(cls, value: Union[str, 'EvalTarget']) -> 'EvalTarget':
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InterventionError(f"Unknown eval target: {value}")


class OutputSpace(Enum):
    PROBABILITIES = "probabilities"
    LOGITS = "logits"


@dataclass(frozen=True)
class InterventionSpec:
    """Which layer is skipped, where, and where the effect is measured"""
    source_layer: int
    kind: InterventionKind
    eval_positions: Tuple[int, ...]
    intervened_masked: Tuple[int, ...] = ()
    intervened_unmasked: Tuple[int, ...] = ()
    split_position: Optional[int] = None

    @property
    def intervened_positions(self) -> Tuple[int, ...]:
        return tuple(sorted(set(self.intervened_masked) | set(self.intervened_unmasked)))

    def at_layer(self, source_layer: int) -> 'InterventionSpec':
        return replace(self, source_layer=source_layer)

    def validate(self, length: int, num_layers: int) -> None:
        if not 0 <= self.source_layer < num_layers:
            raise InterventionError(f"source layer {self.source_layer} outside [0, {num_layers})")
        positions = set(self.intervened_positions) | set(self.eval_positions)
        if positions and (min(positions) < 0 or max(positions) >= length):
            raise InterventionError(f"spec positions outside prompt of length {length}")
        if set(self.intervened_positions) & set(self.eval_positions):
            raise InterventionError("eval positions overlap intervened positions")


def _subset_size(fraction: float, total: int) -> int:
    return int(math.floor(fraction * total + 0.5))


def sample_intervention(mode: Union[str, ObjectiveMode], length: int, masked_positions: Sequence[int],
                        rng: np.random.Generator, source_layer: int = 0,
                        eval_target: Union[str, EvalTarget] = EvalTarget.MASKED,
                        min_fraction: float = SKIP_DEFAULTS['min_fraction'],
                        max_fraction: float = SKIP_DEFAULTS['max_fraction']) -> InterventionSpec:
    """
    Draw one skip-layer intervention

    Autoregressive: split t_s uniform over 1 < t_s < T-1; intervene on t <= t_s,
    evaluate t > t_s.
    Masked: intervene on a uniform [min, max] fraction of the masked positions
    (at least one masked position is always held out) and an independently drawn
    fraction of the non-masked positions (at least one when any exist); evaluate the remaining masked positions
    (or every non-intervened position with eval_target=all).
    """
    mode = ObjectiveMode.parse(mode)
    eval_target = EvalTarget.parse(eval_target)

    if mode is ObjectiveMode.AUTOREGRESSIVE:
        if length < 4:
            raise InterventionError(f"autoregressive split needs T >= 4, got {length}")
        split = int(rng.integers(2, length - 1))
        return InterventionSpec(
            source_layer=source_layer,
            kind=InterventionKind.AR_SPLIT,
            intervened_unmasked=tuple(range(split + 1)),
            eval_positions=tuple(range(split + 1, length)),
            split_position=split,
        )

    masked = sorted(set(int(p) for p in masked_positions))
    if len(masked) < 2:
        raise InterventionError(f"masked intervention needs >= 2 masked positions, got {len(masked)}")
    unmasked = [t for t in range(length) if t not in set(masked)]

    masked_fraction = rng.uniform(min_fraction, max_fraction)
    n_masked = min(max(_subset_size(masked_fraction, len(masked)), 1), len(masked) - 1)
    chosen_masked = tuple(sorted(int(p) for p in rng.choice(masked, size=n_masked, replace=False)))

    unmasked_fraction = rng.uniform(min_fraction, max_fraction)
    chosen_unmasked = ()
    if unmasked:
        n_unmasked = min(max(_subset_size(unmasked_fraction, len(unmasked)), 1), len(unmasked))
        chosen_unmasked = tuple(sorted(int(p) for p in rng.choice(unmasked, size=n_unmasked, replace=False)))

    intervened = set(chosen_masked) | set(chosen_unmasked)
    if eval_target is EvalTarget.MASKED:
        eval_positions = tuple(p for p in masked if p not in intervened)
    else:
        eval_positions = tuple(t for t in range(length) if t not in intervened)

    return InterventionSpec(
        source_layer=source_layer,
        kind=InterventionKind.MASKED_SUBSET,
        intervened_masked=chosen_masked,
        intervened_unmasked=chosen_unmasked,
        eval_positions=eval_positions,
    )


def skipped_forward(model: Model, prompt: Union[Prompt, Sequence[int]], spec: InterventionSpec,
                    masked_positions: Iterable[int] = ()) -> ResidualTrace:
    """
    Forward pass with block `spec.source_layer`'s update removed at the intervened positions

    h̄_{s+1}[t] = h̄_s[t] for intervened t; every other position gets the normal
    update computed from the unmodified layer-s inputs.
    """
    length = len(prompt)
    spec.validate(length, model.num_layers)
    expected_kind = (InterventionKind.AR_SPLIT if model.config.causal else InterventionKind.MASKED_SUBSET)
    if spec.kind is not expected_kind:
        raise InterventionError(f"{spec.kind.value} spec does not fit a "
                                f"{model.config.objective_mode.value} model")
    return forward(model, prompt, skip_layer=spec.source_layer, skip_positions=spec.intervened_positions,
                   masked_positions=masked_positions)


def _check_pair(normal: ResidualTrace, skipped: ResidualTrace, eval_positions: Sequence[int]) -> List[int]:
    if normal.states.shape != skipped.states.shape or not np.array_equal(normal.token_ids, skipped.token_ids):
        raise InterventionError("traces come from different prompts or models")
    positions = sorted(set(int(t) for t in eval_positions))
    if not positions:
        raise InterventionError("empty eval position set")
    if positions[0] < 0 or positions[-1] >= normal.length:
        raise InterventionError("eval positions outside the trace")
    return positions


def propagated_effects(normal: ResidualTrace, skipped: ResidualTrace, eval_positions: Sequence[int],
                       source_layer: Optional[int] = None, relative: bool = False) -> np.ndarray:
    """
    max_t ||h_l[t] - h̄_l[t]||_2 over eval positions, for every l > s

    Returns:
        vector of length L - s; entry i is downstream state s + 1 + i.
        With relative=True each norm is divided by ||h_l[t]||_2.
    """
    positions = _check_pair(normal, skipped, eval_positions)
    s = skipped.skipped_layer if source_layer is None else source_layer
    if s is None:
        raise InterventionError("source layer unknown: pass source_layer or a skipped trace")

    effects = []
    for layer in range(s + 1, normal.num_layers + 1):
        diff = (normal.states[layer][positions].astype(np.float64)
                - skipped.states[layer][positions].astype(np.float64))
        norms = row_l2_norms(diff)
        if relative:
            norms = norms / np.maximum(row_l2_norms(normal.states[layer][positions]), np.finfo(np.float64).tiny)
        effects.append(float(norms.max()))
    return np.asarray(effects, dtype=np.float64)


def output_effect(normal: ResidualTrace, skipped: ResidualTrace, eval_positions: Sequence[int],
                  space: Union[str, OutputSpace] = OutputSpace.PROBABILITIES) -> float:
    """max_t ||y[t] - ȳ[t]||_2 over eval positions, y = probabilities (default) or logits"""
    positions = _check_pair(normal, skipped, eval_positions)
    space = OutputSpace(space.value if isinstance(space, OutputSpace) else str(space).lower())
    y = normal.logits[positions]
    y_bar = skipped.logits[positions]
    if space is OutputSpace.PROBABILITIES:
        y, y_bar = softmax(y), softmax(y_bar)
    return float(row_l2_norms(y - y_bar).max())


def removed_update_norms(normal: ResidualTrace, source_layer: int, positions: Sequence[int]) -> np.ndarray:
    """Norm of block `source_layer`'s update at the given positions (what a skip removes there)"""
    update = normal.update(source_layer)[list(positions)]
    return row_l2_norms(update)


# ==============================================================================
# EFFECT MATRIX
# ==============================================================================

@dataclass
class EffectMatrix:
    """
    Max-aggregated skip effects

    propagated / relative have shape (L, L+1): row = source layer s, column =
    residual state index l (h_0..h_L). Entries with l <= s are NaN.
    """
    num_layers: int
    propagated: np.ndarray
    relative: np.ndarray
    output_prob: np.ndarray
    output_logit: np.ndarray
    runs: np.ndarray
    repeats: int = 0
    prompt_count: int = 0
    eval_target: str = EvalTarget.MASKED.value
    aggregation: str = 'max'

    @classmethod
    def empty(cls, num_layers: int, repeats: int = 0, eval_target: str = EvalTarget.MASKED.value) -> 'EffectMatrix':
        grid = np.full((num_layers, num_layers + 1), np.nan)
        for s in range(num_layers):
            grid[s, s + 1:] = 0.0
        return cls(
            num_layers=num_layers,
            propagated=grid.copy(),
            relative=grid.copy(),
            output_prob=np.zeros(num_layers),
            output_logit=np.zeros(num_layers),
            runs=np.zeros(num_layers, dtype=np.int64),
            repeats=repeats,
            eval_target=eval_target,
        )

    def defined_mask(self) -> np.ndarray:
        return ~np.isnan(self.propagated)

    def record(self, source_layer: int, effects: np.ndarray, relative: np.ndarray,
               prob_effect: float, logit_effect: float) -> None:
        s = source_layer
        self.propagated[s, s + 1:] = np.maximum(self.propagated[s, s + 1:], effects)
        self.relative[s, s + 1:] = np.maximum(self.relative[s, s + 1:], relative)
        self.output_prob[s] = max(self.output_prob[s], prob_effect)
        self.output_logit[s] = max(self.output_logit[s], logit_effect)
        self.runs[s] += 1

    def merge(self, other: 'EffectMatrix') -> 'EffectMatrix':
        """Elementwise max of two matrices over the same model depth"""
        if other.num_layers != self.num_layers:
            raise InterventionError("cannot merge effect matrices of different depth")
        return EffectMatrix(
            num_layers=self.num_layers,
            propagated=np.maximum(self.propagated, other.propagated),
            relative=np.maximum(self.relative, other.relative),
            output_prob=np.maximum(self.output_prob, other.output_prob),
            output_logit=np.maximum(self.output_logit, other.output_logit),
            runs=self.runs + other.runs,
            repeats=max(self.repeats, other.repeats),
            prompt_count=self.prompt_count + other.prompt_count,
            eval_target=self.eval_target,
        )

    def source_means(self) -> np.ndarray:
        """Mean propagated effect per source layer over its defined downstream states"""
        means = np.full(self.num_layers, np.nan)
        for s in range(self.num_layers):
            row = self.propagated[s, s + 1:]
            means[s] = float(np.mean(row)) if row.size else np.nan
        return means

    def propagated_frame(self) -> pd.DataFrame:
        rows = []
        for s in range(self.num_layers):
            for layer in range(s + 1, self.num_layers + 1):
                rows.append({
                    'source_layer': s,
                    'downstream_layer': layer,
                    'max_l2': self.propagated[s, layer],
                    'max_rel_l2': self.relative[s, layer],
                })
        return pd.DataFrame(rows, columns=['source_layer', 'downstream_layer', 'max_l2', 'max_rel_l2'])

    def output_frame(self) -> pd.DataFrame:
        """Output effects per source layer; relative_depth places layer s at (s + 1) / L"""
        return pd.DataFrame({
            'source_layer': np.arange(self.num_layers),
            'relative_depth': np.arange(1, self.num_layers + 1) / self.num_layers,
            'max_prob_l2': self.output_prob,
            'max_logit_l2': self.output_logit,
        })


def collect_effects(model: Model, prompt: Union[Prompt, Sequence[int]], specs: Iterable[InterventionSpec],
                    masked_positions: Iterable[int] = (), normal: Optional[ResidualTrace] = None,
                    eval_target: str = EvalTarget.MASKED.value) -> EffectMatrix:
    """Run every spec against one prompt and max-aggregate the effects"""
    masked_positions = tuple(masked_positions)
    if normal is None:
        normal = forward(model, prompt, masked_positions=masked_positions)
    matrix = EffectMatrix.empty(model.num_layers, eval_target=eval_target)

    for spec in specs:
        skipped = skipped_forward(model, prompt, spec, masked_positions=masked_positions)
        matrix.record(
            spec.source_layer,
            propagated_effects(normal, skipped, spec.eval_positions),
            propagated_effects(normal, skipped, spec.eval_positions, relative=True),
            output_effect(normal, skipped, spec.eval_positions, OutputSpace.PROBABILITIES),
            output_effect(normal, skipped, spec.eval_positions, OutputSpace.LOGITS),
        )
    matrix.prompt_count = 1
    return matrix


@dataclass
class _PreparedPrompt:
    index: int
    origin: str
    prompt: Prompt
    masked_positions: Tuple[int, ...]
    specs: List[InterventionSpec] = field(default_factory=list)
    normal: Optional[ResidualTrace] = None


def skiplayer_experiment(model: Model, prompts: Sequence[Union[Prompt, Sequence[int]]],
                         repeats: int = SKIP_DEFAULTS['repeats'], seed: int = 0,
                         mask_rate: float = SKIP_DEFAULTS['mask_rate'],
                         eval_target: Union[str, EvalTarget] = EvalTarget.MASKED,
                         threads: int = 1) -> EffectMatrix:
    """
    Skip every source layer on every prompt `repeats` times and keep the maxima

    Each prompt draws its mask and its `repeats` intervention specs from a seed
    stream keyed by its token content; the same specs are applied at every source layer. Work fans
    out over (prompt, source layer) pairs and is merged by elementwise max, so
    the result does not depend on the worker count.
    """
    if not prompts:
        raise InterventionError("skiplayer experiment needs at least one prompt")
    if repeats < 1:
        raise InterventionError(f"repeats must be >= 1, got {repeats}")
    eval_target = EvalTarget.parse(eval_target)
    mode = model.config.objective_mode
    L = model.num_layers

    prepared: List[_PreparedPrompt] = []
    for index, prompt in enumerate(prompts):
        if not isinstance(prompt, Prompt):
            prompt = Prompt(tuple(prompt))
        rng = child_rng(seed, STREAM_SKIPLAYER, content_key(prompt.token_ids))
        try:
            masked_positions: Tuple[int, ...] = ()
            if mode is ObjectiveMode.MASKED:
                prompt, masked_positions = mask_prompt(prompt, mask_rate, rng)
            item = _PreparedPrompt(index, prompt.origin, prompt, masked_positions)
            for _ in range(repeats):
                item.specs.append(sample_intervention(mode, len(prompt), masked_positions, rng,
                                                      eval_target=eval_target))
        except DepthProbeError as e:
            raise InterventionError(f"prompt {index} ({prompt.origin}): {e}") from e
        prepared.append(item)

    def trace_prompt(item: _PreparedPrompt) -> ResidualTrace:
        return forward(model, item.prompt, masked_positions=item.masked_positions)

    for item, trace in zip(prepared, ordered_map(trace_prompt, prepared, threads)):
        item.normal = trace

    tasks = [(item, s) for item in prepared for s in range(L)]

    def run_task(task: Tuple[_PreparedPrompt, int]) -> EffectMatrix:
        item, s = task
        try:
            return collect_effects(model, item.prompt, [spec.at_layer(s) for spec in item.specs],
                                   masked_positions=item.masked_positions, normal=item.normal,
                                   eval_target=eval_target.value)
        except DepthProbeError as e:
            raise InterventionError(f"prompt {item.index} ({item.origin}), source layer {s}: {e}") from e

    logger.info(f"Skiplayer experiment: {len(prepared)} prompts x {L} source layers x {repeats} repeats")
    result = EffectMatrix.empty(L, repeats=repeats, eval_target=eval_target.value)
    for partial in ordered_map(run_task, tasks, threads):
        result = result.merge(partial)

    result.prompt_count = len(prepared)
    result.repeats = repeats
    return result
