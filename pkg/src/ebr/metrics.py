"""Task metrics: sentence/corpus BLEU and Spearman rank correlation.

BLEU is reported on the 0-100 scale so margin weights and temperatures keep
their intended magnitudes. The sentence-level default smooths precisions of
order >= 2 with add-1, because unsmoothed sentence BLEU of short sampled
hypotheses is usually 0 and carries no ranking signal; the corpus-level
default is unsmoothed.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .corpus import TokenSeq
from .errors import AlignmentError, EmptyInput, InvalidConfig, UndefinedCorrelation

SMOOTHINGS = ("none", "add_k", "exponential")


@dataclass(frozen=True)
class BleuConfig:
    max_order: int = 4
    smoothing: str = "add_k"
    k: float = 1.0

    def __post_init__(self):
        if self.max_order < 1:
            raise InvalidConfig("max_order must be >= 1")
        if self.smoothing not in SMOOTHINGS:
            raise InvalidConfig(f"smoothing must be one of {SMOOTHINGS}")
        if self.smoothing == "add_k" and not self.k > 0:
            raise InvalidConfig("add_k smoothing requires k > 0")

    @classmethod
    def sentence_default(cls) -> "BleuConfig":
        return cls(max_order=4, smoothing="add_k", k=1.0)

    @classmethod
    def corpus_default(cls) -> "BleuConfig":
        return cls(max_order=4, smoothing="none")


def _tokens(seq) -> tuple:
    if isinstance(seq, TokenSeq):
        return seq.tokens
    return tuple(seq)


def _ngrams(tokens: tuple, n: int) -> Counter:
    return Counter(tokens[i : i + n] for i in range(len(tokens) - n + 1))


def _pair_stats(hyp: tuple, ref: tuple, max_order: int):
    """Clipped match and total counts per order for one hypothesis/reference."""
    matches = [0] * max_order
    totals = [0] * max_order
    for n in range(1, max_order + 1):
        totals[n - 1] = max(len(hyp) - n + 1, 0)
        if totals[n - 1] == 0:
            continue
        hyp_counts = _ngrams(hyp, n)
        ref_counts = _ngrams(ref, n)
        matches[n - 1] = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
    return matches, totals


def _bleu_from_stats(matches, totals, hyp_len: int, ref_len: int, cfg: BleuConfig) -> float:
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    invcnt = 1
    for n in range(1, cfg.max_order + 1):
        m, t = matches[n - 1], totals[n - 1]
        if cfg.smoothing == "add_k" and n >= 2:
            p = (m + cfg.k) / (t + cfg.k)
        elif cfg.smoothing == "exponential" and m == 0:
            p = 1.0 / (2**invcnt * max(t, 1))
            invcnt += 1
        else:
            p = m / t if t > 0 else 0.0
        if p <= 0.0:
            return 0.0
        log_sum += math.log(p)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_sum / cfg.max_order)


def sentence_bleu(hyp, ref, cfg: BleuConfig | None = None) -> float:
    """Clipped n-gram precision geometric mean x brevity penalty, in [0, 100].

    An empty hypothesis scores 0.0; an empty reference is an error.
    """
    cfg = cfg or BleuConfig.sentence_default()
    hyp_t, ref_t = _tokens(hyp), _tokens(ref)
    if len(ref_t) == 0:
        raise EmptyInput("reference must be non-empty")
    if len(hyp_t) == 0:
        return 0.0
    matches, totals = _pair_stats(hyp_t, ref_t, cfg.max_order)
    return _bleu_from_stats(matches, totals, len(hyp_t), len(ref_t), cfg)


def corpus_bleu(hyps, refs, cfg: BleuConfig | None = None) -> float:
    """Micro-averaged BLEU: n-gram statistics pool over the corpus first."""
    cfg = cfg or BleuConfig.corpus_default()
    if len(hyps) != len(refs):
        raise AlignmentError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if len(hyps) == 0:
        raise EmptyInput("corpus_bleu needs at least one pair")
    matches = [0] * cfg.max_order
    totals = [0] * cfg.max_order
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp_t, ref_t = _tokens(hyp), _tokens(ref)
        if len(ref_t) == 0:
            raise EmptyInput("reference must be non-empty")
        m, t = _pair_stats(hyp_t, ref_t, cfg.max_order)
        for i in range(cfg.max_order):
            matches[i] += m[i]
            totals[i] += t[i]
        hyp_len += len(hyp_t)
        ref_len += len(ref_t)
    return _bleu_from_stats(matches, totals, hyp_len, ref_len, cfg)


# --- rank correlation -----------------------------------------------------


def fractional_ranks(values) -> np.ndarray:
    """1-based ranks, ties averaged; sums to n(n+1)/2."""
    arr = np.asarray(values, dtype=np.float64)
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(len(arr), dtype=np.float64)
    i = 0
    while i < len(arr):
        j = i
        while j + 1 < len(arr) and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        mean_rank = 0.5 * (i + j) + 1.0
        ranks[order[i : j + 1]] = mean_rank
        i = j + 1
    return ranks


@dataclass(frozen=True)
class RankVector:
    values: tuple[float, ...]
    ranks: tuple[float, ...]

    @classmethod
    def from_values(cls, values) -> "RankVector":
        return cls(tuple(float(v) for v in values), tuple(fractional_ranks(values)))


def spearman(a, b) -> float:
    """Pearson correlation of fractional ranks; in [-1, 1].

    Raises UndefinedCorrelation when either side is constant.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise AlignmentError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise EmptyInput("spearman needs at least two points")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise UndefinedCorrelation("rank correlation undefined for constant input")
    ra = fractional_ranks(a) - (a.size + 1) / 2.0
    rb = fractional_ranks(b) - (b.size + 1) / 2.0
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    rho = float(ra @ rb) / denom
    return min(1.0, max(-1.0, rho))
