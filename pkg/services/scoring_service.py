#!/usr/bin/env python3
"""
Layer-wise Mutation Effect Scoring Service for DepthProbe
Zero-shot variant scoring from early-exit readouts and Spearman evaluation against DMS assays

Masked models: masked-marginal scores, log p_l(mutant) - log p_l(wildtype) with the
mutated position masked in the wildtype, summed over the mutations of a variant.
Autoregressive models: log-likelihood ratio of mutant vs. wildtype under layer-l readouts.
"""

import io
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.errors import AssayFormatError, ScoringError
from core.model import AA_TO_ID, MASK_ID, Model, ObjectiveMode, encode_sequence, forward, readout
from core.numerics import log_softmax, spearman
from utils.parallel import ordered_map

logger = logging.getLogger(__name__)

MUTATION_PATTERN = re.compile(r'^([A-Z])(\d+)([A-Z])$')
MUTANT_COLUMN = 'mutant'
SCORE_COLUMN = 'DMS_score'
MEAN_ASSAY_ID = '__mean__'


@dataclass(frozen=True)
class Mutation:
    """Single substitution, 1-based position"""
    wildtype_aa: str
    position: int
    mutant_aa: str

    @property
    def code(self) -> str:
        return format_mutation(self)

    @property
    def index(self) -> int:
        return self.position - 1


def parse_mutation(code: str) -> Mutation:
    """'W24K' -> Mutation('W', 24, 'K')"""
    match = MUTATION_PATTERN.match(code.strip())
    if not match:
        raise AssayFormatError(f"Malformed mutation code '{code}'")
    wildtype_aa, position, mutant_aa = match.group(1), int(match.group(2)), match.group(3)
    if position < 1:
        raise AssayFormatError(f"Mutation position must be >= 1 in '{code}'")
    if mutant_aa not in AA_TO_ID:
        raise AssayFormatError(f"Mutant residue '{mutant_aa}' is not a standard amino acid in '{code}'")
    return Mutation(wildtype_aa, position, mutant_aa)


def format_mutation(mutation: Mutation) -> str:
    return f"{mutation.wildtype_aa}{mutation.position}{mutation.mutant_aa}"


def format_variant(mutations: Sequence[Mutation]) -> str:
    return ':'.join(format_mutation(m) for m in mutations)


@dataclass(frozen=True)
class Variant:
    mutations: Tuple[Mutation, ...]
    measurement: float

    @property
    def code(self) -> str:
        return format_variant(self.mutations)


@dataclass
class Assay:
    """Wildtype plus measured variants"""
    assay_id: str
    wildtype: str
    variants: List[Variant] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.variants)

    @property
    def measurements(self) -> np.ndarray:
        return np.array([v.measurement for v in self.variants], dtype=np.float64)

    def to_frame(self) -> pd.DataFrame:
        """ProteinGym-style columns"""
        return pd.DataFrame({
            MUTANT_COLUMN: [v.code for v in self.variants],
            SCORE_COLUMN: [v.measurement for v in self.variants],
            'mutated_sequence': [apply_mutations(self.wildtype, v.mutations) for v in self.variants],
        })


def check_consistent(wildtype: str, mutations: Iterable[Mutation]) -> Optional[str]:
    """Reason the mutations do not fit the wildtype, or None"""
    for mutation in mutations:
        if mutation.position > len(wildtype):
            return f"position {mutation.position} beyond wildtype length {len(wildtype)}"
        if wildtype[mutation.index] != mutation.wildtype_aa:
            return (f"wildtype mismatch at {mutation.position}: sequence has "
                    f"'{wildtype[mutation.index]}', code says '{mutation.wildtype_aa}'")
    return None


def parse_assay(data: Union[bytes, str], wildtype: str, assay_id: str = 'assay') -> Assay:
    """
    Parse a ProteinGym-style CSV (columns `mutant`, `DMS_score`)

    `mutated_sequence`, if present, is ignored; codes are applied to `wildtype`.
    Row numbers in errors count data rows from 1.
    """
    if isinstance(data, str):
        data = data.encode('utf-8')
    try:
        frame = pd.read_csv(io.BytesIO(data), dtype={MUTANT_COLUMN: str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise AssayFormatError(f"Unreadable assay CSV: {e}") from e

    missing = [c for c in (MUTANT_COLUMN, SCORE_COLUMN) if c not in frame.columns]
    if missing:
        raise AssayFormatError(f"Assay CSV missing column(s): {', '.join(missing)}")

    wildtype = wildtype.strip().upper()
    assay = Assay(assay_id=assay_id, wildtype=wildtype)
    malformed, duplicated, mismatched, bad_scores = [], [], [], []
    reasons = []

    for row_number, (code, score) in enumerate(zip(frame[MUTANT_COLUMN], frame[SCORE_COLUMN]), start=1):
        try:
            mutations = tuple(parse_mutation(part) for part in str(code).split(':'))
        except AssayFormatError as e:
            malformed.append(row_number)
            reasons.append(str(e))
            continue
        positions = [m.position for m in mutations]
        if len(positions) != len(set(positions)):
            duplicated.append(row_number)
            continue
        reason = check_consistent(wildtype, mutations)
        if reason:
            mismatched.append(row_number)
            reasons.append(reason)
            continue
        try:
            measurement = float(score)
        except (TypeError, ValueError):
            measurement = math.nan
        if not math.isfinite(measurement):
            bad_scores.append(row_number)
            continue
        assay.variants.append(Variant(mutations, measurement))

    if malformed:
        raise AssayFormatError(f"Malformed mutation codes ({reasons[0]})", rows=malformed)
    if duplicated:
        raise AssayFormatError("Variant mutates the same position twice", rows=duplicated)
    if mismatched:
        raise AssayFormatError(f"Mutations inconsistent with wildtype ({reasons[0]})", rows=mismatched)
    if bad_scores:
        raise AssayFormatError("Non-finite DMS_score", rows=bad_scores)

    logger.info(f"Parsed assay '{assay_id}' with {len(assay)} variants")
    return assay


def apply_mutations(wildtype: str, mutations: Iterable[Mutation]) -> str:
    """Substitute every mutation into the wildtype"""
    mutations = list(mutations)
    positions = [m.position for m in mutations]
    if len(positions) != len(set(positions)):
        raise AssayFormatError(f"Duplicate positions in variant {format_variant(mutations)}")
    reason = check_consistent(wildtype, mutations)
    if reason:
        raise AssayFormatError(reason)
    letters = list(wildtype)
    for mutation in mutations:
        letters[mutation.index] = mutation.mutant_aa
    return ''.join(letters)


# ==============================================================================
# SCORERS
# ==============================================================================

def _check_layer(model: Model, layer: int) -> None:
    if not 1 <= layer <= model.num_layers:
        raise ScoringError(f"layer {layer} outside [1, {model.num_layers}]")


def _layer_log_probs(model: Model, trace) -> np.ndarray:
    """(L, T, V) log-probabilities of the readout at every layer l = 1..L"""
    rows = []
    for layer in range(1, model.num_layers + 1):
        logits = trace.logits if layer == model.num_layers else readout(model, trace.states[layer])
        rows.append(log_softmax(logits))
    return np.stack(rows)


class MaskedMarginalScorer:
    """
    Masked-marginal scores for one wildtype at every layer

    One forward pass per distinct mutated position (the wildtype with that
    position masked); its per-layer log-probabilities are cached.
    """

    def __init__(self, model: Model, wildtype: str):
        if model.config.objective_mode is not ObjectiveMode.MASKED:
            raise ScoringError("masked-marginal scoring needs a masked-mode model")
        self.model = model
        self.wildtype = wildtype.strip().upper()
        ids, unknown = encode_sequence(self.wildtype, ObjectiveMode.MASKED)
        if unknown:
            raise ScoringError(f"wildtype contains {unknown} non-standard letter(s)")
        if len(ids) > model.config.max_seq_len:
            raise ScoringError(f"wildtype length {len(ids)} exceeds max_seq_len {model.config.max_seq_len}")
        self.wildtype_ids = np.asarray(ids, dtype=np.int64)
        self._cache: Dict[int, np.ndarray] = {}

    def position_log_probs(self, index: int) -> np.ndarray:
        """(L, V) log-probabilities at 0-based `index` with that position masked"""
        if index not in self._cache:
            self._cache[index] = self._compute(index)
        return self._cache[index]

    def prefetch(self, indices: Iterable[int], threads: int = 1) -> None:
        todo = sorted(set(int(i) for i in indices) - set(self._cache))
        for index, log_probs in zip(todo, ordered_map(self._compute, todo, threads)):
            self._cache[index] = log_probs

    def _compute(self, index: int) -> np.ndarray:
        masked = self.wildtype_ids.copy()
        masked[index] = MASK_ID
        trace = forward(self.model, masked, masked_positions=(index,))
        return _layer_log_probs(self.model, trace)[:, index, :]

    def score_all_layers(self, mutations: Sequence[Mutation]) -> np.ndarray:
        """Scores at layers 1..L, shape (L,)"""
        reason = check_consistent(self.wildtype, mutations)
        if reason:
            raise ScoringError(reason)
        total = np.zeros(self.model.num_layers)
        for mutation in mutations:
            if mutation.mutant_aa == mutation.wildtype_aa:
                continue
            log_probs = self.position_log_probs(mutation.index)
            total = total + (log_probs[:, AA_TO_ID[mutation.mutant_aa]] - log_probs[:, AA_TO_ID[mutation.wildtype_aa]])
        return total


def masked_marginal_score(model: Model, wildtype: str, mutations: Sequence[Mutation], layer: int) -> float:
    """
    Sum over mutations of log p_l(mutant) - log p_l(wildtype), each with its
    position masked in the wildtype and read out at layer l
    """
    _check_layer(model, layer)
    for mutation in mutations:
        if mutation.position > len(wildtype.strip()):
            raise ScoringError(f"position {mutation.position} out of range for wildtype of length "
                               f"{len(wildtype.strip())}")
    return float(MaskedMarginalScorer(model, wildtype).score_all_layers(mutations)[layer - 1])


def _ar_ids(model: Model, sequence: str) -> np.ndarray:
    if model.config.objective_mode is not ObjectiveMode.AUTOREGRESSIVE:
        raise ScoringError("likelihood scoring needs an autoregressive model")
    ids, unknown = encode_sequence(sequence, ObjectiveMode.AUTOREGRESSIVE)
    if unknown:
        raise ScoringError(f"sequence contains {unknown} non-standard letter(s)")
    if len(ids) > model.config.max_seq_len:
        raise ScoringError(f"sequence length {len(ids)} (with BOS) exceeds max_seq_len {model.config.max_seq_len}")
    return np.asarray(ids, dtype=np.int64)


def ar_loglik_all_layers(model: Model, sequence: str, length_normalize: bool = False) -> np.ndarray:
    """sum_t log p_l(x_t | x_<t) at layers 1..L; BOS is context only, the last token is a target"""
    ids = _ar_ids(model, sequence)
    trace = forward(model, ids)
    log_probs = _layer_log_probs(model, trace)
    targets = ids[1:]
    per_token = log_probs[:, np.arange(len(targets)), targets]
    totals = per_token.sum(axis=-1)
    if length_normalize and len(targets):
        totals = totals / len(targets)
    return totals


def ar_score(model: Model, sequence: str, layer: int, length_normalize: bool = False) -> float:
    """Log-likelihood of a sequence under layer-l early-exit readouts"""
    _check_layer(model, layer)
    return float(ar_loglik_all_layers(model, sequence, length_normalize)[layer - 1])


def ar_variant_score(model: Model, wildtype: str, mutations: Sequence[Mutation], layer: int,
                     length_normalize: bool = False) -> float:
    """ar_score(mutant) - ar_score(wildtype)"""
    mutant = apply_mutations(wildtype, mutations)
    return ar_score(model, mutant, layer, length_normalize) - ar_score(model, wildtype, layer, length_normalize)


# ==============================================================================
# LAYER-WISE EVALUATION
# ==============================================================================

@dataclass
class ScoreTable:
    """Per-layer variant scores and Spearman correlation for one assay"""
    assay_id: str
    num_layers: int
    variant_codes: List[str]
    scores: np.ndarray               # (L, n_variants)
    rho: List[Optional[float]]       # per layer; None = undefined
    length_normalize: bool = False

    @property
    def relative_depth(self) -> np.ndarray:
        return np.arange(1, self.num_layers + 1) / self.num_layers

    def spearman_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'layer': np.arange(1, self.num_layers + 1),
            'relative_depth': self.relative_depth,
            'assay_id': self.assay_id,
            'spearman': [np.nan if r is None else r for r in self.rho],
        })

    def variant_frame(self) -> pd.DataFrame:
        rows = []
        for index in range(self.num_layers):
            for code, score in zip(self.variant_codes, self.scores[index]):
                rows.append({'layer': index + 1, 'assay_id': self.assay_id, 'mutant': code, 'score': score})
        return pd.DataFrame(rows, columns=['layer', 'assay_id', 'mutant', 'score'])


def score_variants(model: Model, assay: Assay, length_normalize: bool = False, threads: int = 1) -> np.ndarray:
    """(L, n_variants) scores with the scorer that matches the model's objective"""
    if model.config.objective_mode is ObjectiveMode.MASKED:
        scorer = MaskedMarginalScorer(model, assay.wildtype)
        scorer.prefetch((m.index for v in assay.variants for m in v.mutations), threads)
        columns = [scorer.score_all_layers(v.mutations) for v in assay.variants]
    else:
        wildtype_ll = ar_loglik_all_layers(model, assay.wildtype, length_normalize)

        def mutant_ll(variant: Variant) -> np.ndarray:
            return ar_loglik_all_layers(model, apply_mutations(assay.wildtype, variant.mutations), length_normalize)

        columns = [ll - wildtype_ll for ll in ordered_map(mutant_ll, assay.variants, threads)]

    if not columns:
        return np.zeros((model.num_layers, 0))
    return np.stack(columns, axis=1)


def layerwise_spearman(model: Model, assay: Assay, length_normalize: bool = False, threads: int = 1) -> ScoreTable:
    """
    Score every variant at every layer and correlate with the measurements

    Layers whose scores (or measurements) have zero variance get an undefined rho.
    """
    if len(assay) < 2:
        raise ScoringError(f"assay '{assay.assay_id}' needs at least 2 variants, has {len(assay)}")
    scores = score_variants(model, assay, length_normalize, threads)
    measurements = assay.measurements
    rho = [spearman(scores[index], measurements) for index in range(model.num_layers)]

    undefined = sum(r is None for r in rho)
    if undefined:
        logger.warning(f"assay '{assay.assay_id}': Spearman undefined at {undefined} layer(s)")
    logger.info(f"Scored {len(assay)} variants of '{assay.assay_id}' at {model.num_layers} layers")
    return ScoreTable(
        assay_id=assay.assay_id,
        num_layers=model.num_layers,
        variant_codes=[v.code for v in assay.variants],
        scores=scores,
        rho=rho,
        length_normalize=length_normalize,
    )


def average_spearman(tables: Sequence[ScoreTable]) -> ScoreTable:
    """Mean of per-assay rho at each layer; undefined values are left out, all-undefined stays undefined"""
    if not tables:
        raise ScoringError("no score tables to average")
    depth = tables[0].num_layers
    if any(t.num_layers != depth for t in tables):
        raise ScoringError("score tables come from models of different depth")

    rho: List[Optional[float]] = []
    for index in range(depth):
        defined = [t.rho[index] for t in tables if t.rho[index] is not None]
        rho.append(float(np.mean(defined)) if defined else None)
    return ScoreTable(MEAN_ASSAY_ID, depth, [], np.zeros((depth, 0)), rho, tables[0].length_normalize)
