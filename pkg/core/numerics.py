#!/usr/bin/env python3
"""
Numeric kernels and statistics for DepthProbe
Stable softmax / log-softmax, KL divergence, rank correlation, top-1 and L2 helpers

Arrays are stored as numpy float32 or float64; every reduction accumulates in float64.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from config import EXPERIMENT_CONFIG
from core.errors import NumericsError

logger = logging.getLogger(__name__)

KL_CLAMP = EXPERIMENT_CONFIG['numerics']['kl_clamp']

# Returned by spearman when either input has zero variance
NO_CORRELATION = None


@dataclass(frozen=True)
class KLResult:
    """KL divergence value plus whether any q entry had to be clamped"""
    value: float
    clamped: bool = False

    def __float__(self) -> float:
        return self.value


def _as_float64(values, name: str = 'input') -> np.ndarray:
    array = np.asarray(values, dtype=np.float64)
    if array.size == 0:
        raise NumericsError(f"{name} is empty")
    if not np.all(np.isfinite(array)):
        raise NumericsError(f"{name} contains non-finite values")
    return array


def softmax(logits, axis: int = -1) -> np.ndarray:
    """
    Max-subtracted softmax along `axis`

    Args:
        logits: finite vector or matrix

    Returns:
        float64 probabilities summing to 1 along `axis`
    """
    x = _as_float64(logits, 'logits')
    shifted = x - np.max(x, axis=axis, keepdims=True)
    exps = np.exp(shifted)
    return exps / np.sum(exps, axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    """logits - max - log(sum(exp(logits - max)))"""
    x = _as_float64(logits, 'logits')
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def kl_divergence_rows(p, q) -> Tuple[np.ndarray, int]:
    """
    Row-wise KL(p || q) in nats

    Terms with p_i = 0 contribute 0. Where p_i > 0 and q_i = 0, q_i is
    clamped to KL_CLAMP and the row is counted as clamped.

    Returns:
        (per-row KL values, number of clamped rows)
    """
    p = np.atleast_2d(_as_float64(p, 'p'))
    q = np.atleast_2d(_as_float64(q, 'q'))
    if p.shape != q.shape:
        raise NumericsError(f"shape mismatch: p {p.shape} vs q {q.shape}")

    support = p > 0
    needs_clamp = support & (q <= 0)
    clamped_rows = np.any(needs_clamp, axis=-1)
    q_safe = np.where(needs_clamp, KL_CLAMP, q)

    terms = np.zeros_like(p)
    terms[support] = p[support] * (np.log(p[support]) - np.log(q_safe[support]))
    values = np.sum(terms, axis=-1)

    n_clamped = int(np.count_nonzero(clamped_rows))
    if n_clamped:
        logger.warning(f"KL divergence clamped q to {KL_CLAMP} in {n_clamped} row(s)")
    return values, n_clamped


def kl_divergence(p, q) -> KLResult:
    """KL(p || q) for a single pair of distributions"""
    values, n_clamped = kl_divergence_rows(np.ravel(p)[None, :], np.ravel(q)[None, :])
    return KLResult(value=float(values[0]), clamped=n_clamped > 0)


def kl_value(p, q) -> float:
    return kl_divergence(p, q).value


def rank_average(values) -> np.ndarray:
    """1-based ranks; tied entries share their mean rank"""
    return rankdata(_as_float64(values), method='average')


def spearman(a, b) -> Optional[float]:
    """
    Spearman rank correlation as Pearson correlation of average ranks

    Returns:
        correlation in [-1, 1], or NO_CORRELATION if either input has zero variance
    """
    a = _as_float64(a, 'a').ravel()
    b = _as_float64(b, 'b').ravel()
    if a.shape != b.shape:
        raise NumericsError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise NumericsError("spearman needs at least 2 observations")

    ra = rank_average(a)
    rb = rank_average(b)
    ra = ra - ra.mean()
    rb = rb - rb.mean()

    sxx = float(np.dot(ra, ra))
    syy = float(np.dot(rb, rb))
    if sxx == 0.0 or syy == 0.0:
        return NO_CORRELATION

    rho = float(np.dot(ra, rb)) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, rho)))


def argmax_top1(values) -> int:
    """Index of the maximum; ties resolve to the lowest index"""
    array = np.asarray(values)
    if array.size == 0:
        raise NumericsError("argmax of an empty vector")
    return int(np.argmax(array))


def l2_diff(a, b) -> float:
    """Euclidean distance with float64 accumulation"""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise NumericsError(f"length mismatch: {a.size} vs {b.size}")
    diff = a - b
    return float(np.sqrt(np.dot(diff, diff)))


def row_l2_norms(matrix) -> np.ndarray:
    """L2 norm of every row of a 2-D array, float64"""
    matrix = np.asarray(matrix, dtype=np.float64)
    return np.sqrt(np.einsum('ij,ij->i', matrix, matrix))


def depth_quartile_means(values: Sequence[float]) -> Tuple[float, float]:
    """
    Mean of the first and last quartile of a per-layer series

    Undefined (None / NaN) entries are ignored. Quartile width is at least one layer.
    """
    series = np.array([np.nan if v is None else float(v) for v in values], dtype=np.float64)
    if series.size == 0:
        raise NumericsError("empty depth series")
    width = max(1, series.size // 4)
    first = series[:width]
    last = series[-width:]
    if np.all(np.isnan(first)) or np.all(np.isnan(last)):
        raise NumericsError("quartile contains no defined values")
    return float(np.nanmean(first)), float(np.nanmean(last))
