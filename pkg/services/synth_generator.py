#!/usr/bin/env python3
"""
Synthetic Sequence Generator Service for DepthProbe
Hidden-Markov protein-like sequences with an exact likelihood oracle and synthetic DMS assays

The generator stands in for a natural sequence database: it has enough sequential
structure for a small transformer to learn, and its exact log-likelihood gives the
ground-truth fitness of every single substitution.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from backend.storage.results import write_csv
from core.errors import GeneratorError
from core.model import AA_TO_ID, AMINO_ACIDS
from services.scoring_service import Assay, Mutation, Variant
from utils.parallel import ordered_map
from utils.rng import STREAM_SYNTH, child_rng

logger = logging.getLogger(__name__)

NUM_LETTERS = len(AMINO_ACIDS)
ROW_TOLERANCE = 1e-9

# every entry keeps at least this much mass so all sequences stay possible
PROB_FLOOR = 1e-6


@dataclass
class SeqGenerator:
    """
    K-state hidden Markov model emitting the 20 amino acids

    Attributes:
        transition: (K, K), row i is P(next state | state i)
        emission: (K, 20), row i is P(letter | state i)
        initial: (K,) distribution of the first hidden state
    """
    transition: np.ndarray
    emission: np.ndarray
    initial: np.ndarray

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.emission = np.asarray(self.emission, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        K = self.initial.shape[0] if self.initial.ndim == 1 else -1
        if K < 1:
            raise GeneratorError("initial distribution must be a non-empty vector")
        if self.transition.shape != (K, K):
            raise GeneratorError(f"transition shape {self.transition.shape} does not match {K} states")
        if self.emission.shape != (K, NUM_LETTERS):
            raise GeneratorError(f"emission shape {self.emission.shape}, expected ({K}, {NUM_LETTERS})")
        for name, rows in (('transition', self.transition), ('emission', self.emission),
                           ('initial', self.initial[None, :])):
            if not np.all(np.isfinite(rows)) or np.any(rows < 0):
                raise GeneratorError(f"{name} has negative or non-finite entries")
            if np.max(np.abs(rows.sum(axis=1) - 1.0)) > ROW_TOLERANCE:
                raise GeneratorError(f"{name} rows do not sum to 1")

    @property
    def num_states(self) -> int:
        return self.initial.shape[0]

    def to_dict(self) -> dict:
        return {
            'num_states': self.num_states,
            'alphabet': AMINO_ACIDS,
            'initial': self.initial.tolist(),
            'transition': self.transition.tolist(),
            'emission': self.emission.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'SeqGenerator':
        if data.get('alphabet', AMINO_ACIDS) != AMINO_ACIDS:
            raise GeneratorError("generator alphabet differs from the model vocabulary")
        try:
            return cls(transition=data['transition'], emission=data['emission'], initial=data['initial'])
        except KeyError as e:
            raise GeneratorError(f"generator file missing field {e}") from e


def _dirichlet_rows(rng: np.random.Generator, concentration: float, rows: int, cols: int) -> np.ndarray:
    draws = rng.dirichlet(np.full(cols, concentration), size=rows)
    mixed = (1.0 - cols * PROB_FLOOR) * draws + PROB_FLOOR
    return mixed / mixed.sum(axis=1, keepdims=True)


def build_generator(num_states: int, concentration: float, rng: np.random.Generator) -> SeqGenerator:
    """
    Draw every stochastic row from a symmetric Dirichlet(concentration)

    Small concentrations give peaked, strongly structured rows; large ones approach uniform.
    """
    if num_states < 2:
        raise GeneratorError(f"need at least 2 hidden states, got {num_states}")
    if not concentration > 0:
        raise GeneratorError(f"concentration must be positive, got {concentration}")

    initial = _dirichlet_rows(rng, concentration, 1, num_states)[0]
    transition = _dirichlet_rows(rng, concentration, num_states, num_states)
    emission = _dirichlet_rows(rng, concentration, num_states, NUM_LETTERS)
    logger.debug(f"Built {num_states}-state generator (concentration {concentration})")
    return SeqGenerator(transition=transition, emission=emission, initial=initial)


def _draw(cumulative: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row of `cumulative` (n, m) with uniforms u (n,)"""
    index = (cumulative <= u[:, None]).sum(axis=1)
    return np.minimum(index, cumulative.shape[1] - 1)


def sample_batch(gen: SeqGenerator, count: int, length: int, rng: np.random.Generator) -> np.ndarray:
    """(count, length) letter ids, sampled in parallel along the batch axis"""
    if length < 1 or count < 1:
        raise GeneratorError(f"count and length must be >= 1, got {count} x {length}")
    cum_initial = np.cumsum(gen.initial)
    cum_transition = np.cumsum(gen.transition, axis=1)
    cum_emission = np.cumsum(gen.emission, axis=1)

    uniforms = rng.random((length, 2, count))
    letters = np.empty((count, length), dtype=np.int64)
    state = _draw(np.broadcast_to(cum_initial, (count, gen.num_states)), uniforms[0, 0])
    for t in range(length):
        if t > 0:
            state = _draw(cum_transition[state], uniforms[t, 0])
        letters[:, t] = _draw(cum_emission[state], uniforms[t, 1])
    return letters


def sample_sequence(gen: SeqGenerator, length: int, rng: np.random.Generator) -> str:
    """One amino-acid string of the given length"""
    ids = sample_batch(gen, 1, length, rng)[0]
    return ''.join(AMINO_ACIDS[i] for i in ids)


def sample_sequences(gen: SeqGenerator, count: int, length: int, seed: int, keys: Tuple[int, ...] = (STREAM_SYNTH,),
                     threads: int = 1) -> List[str]:
    """`count` sequences, sequence i drawn from child_rng(seed, *keys, i)"""
    def draw(index: int) -> str:
        return sample_sequence(gen, length, child_rng(seed, *keys, index))

    return ordered_map(draw, range(count), threads)


def _letter_ids(sequence: str) -> np.ndarray:
    ids = []
    for position, letter in enumerate(sequence.strip().upper(), start=1):
        if letter not in AA_TO_ID:
            raise GeneratorError(f"letter '{letter}' at position {position} is outside the amino-acid alphabet")
        ids.append(AA_TO_ID[letter])
    if not ids:
        raise GeneratorError("empty sequence")
    return np.asarray(ids, dtype=np.int64)


def true_loglik(gen: SeqGenerator, sequence: str) -> float:
    """Exact log P(sequence) by the forward algorithm in log space"""
    ids = _letter_ids(sequence)
    with np.errstate(divide='ignore'):
        log_initial = np.log(gen.initial)
        log_transition = np.log(gen.transition)
        log_emission = np.log(gen.emission)

    log_alpha = log_initial + log_emission[:, ids[0]]
    for token in ids[1:]:
        log_alpha = logsumexp(log_alpha[:, None] + log_transition, axis=0) + log_emission[:, token]
    return float(logsumexp(log_alpha))


def make_assay(gen: SeqGenerator, wildtype: str, noise_sigma: float, rng: np.random.Generator,
               assay_id: str = 'synthetic') -> Assay:
    """
    Every single substitution of the wildtype (19 per position), measured as
    true_loglik(mutant) - true_loglik(wildtype) plus N(0, noise_sigma) noise
    """
    if noise_sigma < 0:
        raise GeneratorError(f"noise_sigma must be >= 0, got {noise_sigma}")
    wildtype = wildtype.strip().upper()
    base = true_loglik(gen, wildtype)

    mutations = []
    for index, wildtype_aa in enumerate(wildtype):
        for mutant_aa in AMINO_ACIDS:
            if mutant_aa != wildtype_aa:
                mutations.append(Mutation(wildtype_aa, index + 1, mutant_aa))

    noise = rng.normal(0.0, noise_sigma, size=len(mutations)) if noise_sigma > 0 else np.zeros(len(mutations))
    assay = Assay(assay_id=assay_id, wildtype=wildtype)
    for mutation, jitter in zip(mutations, noise):
        mutant = wildtype[:mutation.index] + mutation.mutant_aa + wildtype[mutation.index + 1:]
        measurement = true_loglik(gen, mutant) - base + float(jitter)
        if not np.isfinite(measurement):
            raise GeneratorError(f"non-finite measurement for {mutation.code}")
        assay.variants.append(Variant((mutation,), measurement))

    logger.info(f"Built synthetic assay '{assay_id}': {len(assay)} variants over {len(wildtype)} positions")
    return assay


def save_generator(gen: SeqGenerator, path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(gen.to_dict(), f, indent=2, sort_keys=True)
    return path


def load_generator(path: Union[str, Path]) -> SeqGenerator:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Generator file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise GeneratorError(f"{path} is not valid JSON: {e}") from e
    return SeqGenerator.from_dict(data)


def write_assay_csv(assay: Assay, path: Union[str, Path]) -> Path:
    """ProteinGym-style CSV: mutant, DMS_score, mutated_sequence"""
    return write_csv(assay.to_frame(), path, columns=['mutant', 'DMS_score', 'mutated_sequence'])
