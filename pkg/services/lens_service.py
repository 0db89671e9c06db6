#!/usr/bin/env python3
"""
LogitLens Depth Profiling Service for DepthProbe
Reads every intermediate residual state through the final norm and unembedding
and compares the implied distribution with the model's final prediction
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import EXPERIMENT_CONFIG
from core.errors import DepthProbeError, ModelError
from core.model import Model, ObjectiveMode, Prompt, ResidualTrace, forward, mask_prompt, readout
from core.numerics import kl_divergence_rows, softmax
from utils.parallel import ordered_map
from utils.rng import STREAM_LENS, child_rng, content_key

logger = logging.getLogger(__name__)


class EvalPolicy(Enum):
    MASKED_POSITIONS = "masked-positions"
    ALL_AR_POSITIONS = "all-AR-positions"


def lens_distributions(model: Model, trace: ResidualTrace,
                       positions: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    p_l = softmax(readout(h_l)) for l = 1..L

    Readout always runs on the full (T, d) state so the layer-L rows are the
    trace's own final distribution bit for bit.

    Returns:
        array (L, P, V); index l-1 holds layer l
    """
    if trace.num_layers != model.num_layers:
        raise ModelError("trace depth does not match the model")
    rows = slice(None) if positions is None else list(positions)
    distributions = []
    for layer in range(1, trace.num_layers + 1):
        logits = trace.logits if layer == trace.num_layers else readout(model, trace.states[layer])
        distributions.append(softmax(logits)[rows])
    return np.stack(distributions)


@dataclass
class LensProfile:
    """
    Per-layer LogitLens statistics accumulated as sums so profiles merge exactly

    Index i refers to layer i + 1.
    """
    num_layers: int
    kl_sum: np.ndarray
    agree_count: np.ndarray
    n_positions: int
    kl_clamped: int
    eval_policy: str
    aggregation: str = 'mean'

    @classmethod
    def empty(cls, num_layers: int, eval_policy: str) -> 'LensProfile':
        return cls(num_layers, np.zeros(num_layers), np.zeros(num_layers, dtype=np.int64), 0, 0, eval_policy)

    @property
    def mean_kl(self) -> np.ndarray:
        if self.n_positions == 0:
            return np.full(self.num_layers, np.nan)
        return self.kl_sum / self.n_positions

    @property
    def top1_overlap(self) -> np.ndarray:
        if self.n_positions == 0:
            return np.full(self.num_layers, np.nan)
        return self.agree_count / self.n_positions

    @property
    def relative_depth(self) -> np.ndarray:
        return np.arange(1, self.num_layers + 1) / self.num_layers

    def merge(self, other: 'LensProfile') -> 'LensProfile':
        """Position-weighted combination"""
        if other.num_layers != self.num_layers:
            raise ModelError("cannot merge lens profiles of different depth")
        return LensProfile(
            num_layers=self.num_layers,
            kl_sum=self.kl_sum + other.kl_sum,
            agree_count=self.agree_count + other.agree_count,
            n_positions=self.n_positions + other.n_positions,
            kl_clamped=self.kl_clamped + other.kl_clamped,
            eval_policy=self.eval_policy,
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'layer': np.arange(1, self.num_layers + 1),
            'relative_depth': self.relative_depth,
            'mean_kl': self.mean_kl,
            'top1_overlap': self.top1_overlap,
            'n_positions': np.full(self.num_layers, self.n_positions),
        })


def profile_trace(model: Model, trace: ResidualTrace, positions: Sequence[int], eval_policy: str) -> LensProfile:
    """LensProfile of one trace at the given positions"""
    positions = list(positions)
    profile = LensProfile.empty(model.num_layers, eval_policy)
    if not positions:
        return profile

    distributions = lens_distributions(model, trace, positions)
    final = distributions[-1]
    final_top1 = np.argmax(final, axis=-1)
    for index in range(model.num_layers):
        values, clamped = kl_divergence_rows(final, distributions[index])
        profile.kl_sum[index] = float(np.sum(values))
        profile.agree_count[index] = int(np.count_nonzero(np.argmax(distributions[index], axis=-1) == final_top1))
        profile.kl_clamped += clamped
    profile.n_positions = len(positions)
    return profile


def _prepare(model: Model, prompt: Union[Prompt, Sequence[int]], seed: int,
             mask_rate: float) -> Tuple[ResidualTrace, List[int]]:
    if not isinstance(prompt, Prompt):
        prompt = Prompt(tuple(prompt))
    if model.config.objective_mode is ObjectiveMode.MASKED:
        rng = child_rng(seed, STREAM_LENS, content_key(prompt.token_ids))
        masked, positions = mask_prompt(prompt, mask_rate, rng)
        return forward(model, masked, masked_positions=positions), list(positions)
    # every position of an autoregressive prompt predicts its successor
    trace = forward(model, prompt)
    return trace, list(range(trace.length))


def lens_profile(model: Model, prompts: Sequence[Union[Prompt, Sequence[int]]], seed: int = 0,
                 mask_rate: float = EXPERIMENT_CONFIG['lens']['mask_rate'], threads: int = 1) -> LensProfile:
    """
    KL(p_L || p_l) and top-1 agreement per layer, averaged over positions then prompts

    Masked models are masked at `mask_rate` and evaluated only on masked tokens;
    autoregressive models are evaluated at every position. Each prompt's mask is
    keyed by its token content, so profiles of disjoint prompt sets merge into
    the profile of their union.
    """
    policy = (EvalPolicy.MASKED_POSITIONS if model.config.objective_mode is ObjectiveMode.MASKED
              else EvalPolicy.ALL_AR_POSITIONS).value

    def run(task) -> LensProfile:
        index, prompt = task
        try:
            trace, positions = _prepare(model, prompt, seed, mask_rate)
            return profile_trace(model, trace, positions, policy)
        except DepthProbeError as e:
            raise ModelError(f"lens prompt {index}: {e}") from e

    profile = LensProfile.empty(model.num_layers, policy)
    for partial in ordered_map(run, list(enumerate(prompts)), threads):
        profile = profile.merge(partial)

    if profile.kl_clamped:
        logger.warning(f"{profile.kl_clamped} lens position(s) needed KL clamping")
    logger.info(f"Lens profile over {len(prompts)} prompts, {profile.n_positions} positions")
    return profile


def lens_kl_profile(model: Model, prompts: Sequence[Union[Prompt, Sequence[int]]], seed: int = 0,
                    mask_rate: float = EXPERIMENT_CONFIG['lens']['mask_rate'], threads: int = 1) -> np.ndarray:
    """Mean KL(p_L || p_l) per layer l = 1..L"""
    return lens_profile(model, prompts, seed=seed, mask_rate=mask_rate, threads=threads).mean_kl


def lens_top1_profile(model: Model, prompts: Sequence[Union[Prompt, Sequence[int]]], seed: int = 0,
                      mask_rate: float = EXPERIMENT_CONFIG['lens']['mask_rate'], threads: int = 1) -> np.ndarray:
    """Fraction of evaluated positions where argmax p_l equals argmax p_L, per layer"""
    return lens_profile(model, prompts, seed=seed, mask_rate=mask_rate, threads=threads).top1_overlap
