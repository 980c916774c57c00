"""Decoding and re-ranking strategies, with per-corpus evaluation reports.

All sample-based strategies applied with the same seed see identical
candidate sets (per-sentence seeds derive from the run seed and the sentence
index), which keeps method comparisons apples-to-apples and makes evaluation
deterministic regardless of the worker thread count.

The energy slot of the model bundle accepts either an EnergyModel or a plain
callable ``f(hypothesis, ref) -> energy``; the callable form exists so tests
can inject stub scorers (for example, energy := -sentence BLEU turns the
energy ranker into the oracle).
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .basemodel import BaseTranslator, CandidateSet, beam_decode, sample
from .corpus import ParallelCorpus, TokenSeq
from .errors import InvalidConfig, MissingModel, MissingReference
from .lm import NgramLM, lm_logprob, pll_score
from .metrics import BleuConfig, corpus_bleu, sentence_bleu

STRATEGY_KINDS = (
    "beam",
    "sample_logprob",
    "lm_fusion",
    "mlm_fusion",
    "ebr",
    "nce_ebr",
    "oracle",
)

NEG_INF = float("-inf")
POS_INF = float("inf")


@dataclass(frozen=True)
class Strategy:
    kind: str
    width: int = 5
    lam: float = 0.01
    length_normalize: bool = False

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise InvalidConfig(f"unknown strategy {self.kind!r}")
        if self.width < 1:
            raise InvalidConfig("beam width must be >= 1")
        if self.lam < 0:
            raise InvalidConfig("fusion weight must be >= 0")

    @property
    def name(self) -> str:
        if self.kind == "beam":
            return f"beam{self.width}"
        if self.kind in ("lm_fusion", "mlm_fusion"):
            return f"{self.kind}(lam={self.lam})"
        return self.kind


@dataclass
class ModelBundle:
    base: BaseTranslator | None = None
    lm: NgramLM | None = None
    mlm: object | None = None
    energy: object | None = None


def _require(model, name: str, strategy: Strategy):
    if model is None:
        raise MissingModel(f"strategy {strategy.name} requires the {name} model")
    return model


def _base_scores(cands: CandidateSet, strategy: Strategy) -> list[float]:
    if strategy.length_normalize:
        return [c.base_logprob / (len(c.hypothesis) + 1) for c in cands.candidates]
    return [c.base_logprob for c in cands.candidates]


def strategy_scores(
    cands: CandidateSet,
    strategy: Strategy,
    models: ModelBundle,
    ref: TokenSeq | None = None,
) -> list[float]:
    """Every candidate's score under the strategy (native orientation:
    energies for ebr/nce_ebr, higher-is-better otherwise)."""
    kind = strategy.kind
    if kind == "beam":
        raise InvalidConfig("beam is a decoding strategy, not a re-ranking one")
    if kind == "sample_logprob":
        return _base_scores(cands, strategy)
    if kind == "lm_fusion":
        lm = _require(models.lm, "lm", strategy)
        base = _base_scores(cands, strategy)
        return [
            b + strategy.lam * lm_logprob(lm, c.hypothesis) if len(c.hypothesis) else NEG_INF
            for b, c in zip(base, cands.candidates)
        ]
    if kind == "mlm_fusion":
        mlm = _require(models.mlm, "mlm", strategy)
        base = _base_scores(cands, strategy)
        return [
            b + strategy.lam * pll_score(mlm, c.hypothesis) if len(c.hypothesis) else NEG_INF
            for b, c in zip(base, cands.candidates)
        ]
    if kind in ("ebr", "nce_ebr"):
        energy = _require(models.energy, "energy", strategy)
        if callable(energy):
            return [
                energy(c.hypothesis, ref) if len(c.hypothesis) else POS_INF
                for c in cands.candidates
            ]
        scoreable = [c.hypothesis for c in cands.candidates if len(c.hypothesis)]
        scored = iter(energy.energies(scoreable)) if scoreable else iter(())
        return [
            float(next(scored)) if len(c.hypothesis) else POS_INF for c in cands.candidates
        ]
    if ref is None:
        raise MissingReference("oracle ranking needs the reference")
    return [
        sentence_bleu(c.hypothesis, ref, BleuConfig.sentence_default())
        for c in cands.candidates
    ]


def _argbest(scores: list[float], minimize: bool) -> int:
    best = 0
    for i in range(1, len(scores)):
        if (scores[i] < scores[best]) if minimize else (scores[i] > scores[best]):
            best = i
    return best


def rerank_one(
    cands: CandidateSet,
    strategy: Strategy,
    models: ModelBundle,
    ref: TokenSeq | None = None,
) -> TokenSeq:
    """The strategy's choice from the candidate set; ties go to the lowest index."""
    scores = strategy_scores(cands, strategy, models, ref)
    minimize = strategy.kind in ("ebr", "nce_ebr")
    return cands.candidates[_argbest(scores, minimize)].hypothesis


@dataclass
class EvalConfig:
    k: int = 100
    temp: float = 1.0
    seed: int = 0
    threads: int | None = None  # None: take EBR_THREADS, default 1
    sentence_bleu_cfg: BleuConfig = field(default_factory=BleuConfig.sentence_default)
    corpus_bleu_cfg: BleuConfig = field(default_factory=BleuConfig.corpus_default)

    def __post_init__(self):
        if self.k < 1 or not self.temp > 0:
            raise InvalidConfig("bad evaluation configuration")

    def worker_count(self) -> int:
        if self.threads is not None:
            return max(1, self.threads)
        return max(1, int(os.environ.get("EBR_THREADS", "1")))


@dataclass
class SentenceResult:
    src: TokenSeq
    ref: TokenSeq
    chosen: TokenSeq
    scores: list[float]
    chosen_bleu: float
    seconds: float


@dataclass
class RerankReport:
    strategy: str
    corpus: str
    bleu: float
    per_sentence: list[SentenceResult]
    mean_seconds_per_sentence: float

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy,
            "corpus": self.corpus,
            "bleu": self.bleu,
            "per_sentence": [
                {
                    "src": s.src.surface,
                    "chosen": s.chosen.surface,
                    "scores": [_json_float(x) for x in s.scores],
                    "ref": s.ref.surface,
                    "chosen_bleu": s.chosen_bleu,
                }
                for s in self.per_sentence
            ],
            "mean_seconds_per_sentence": self.mean_seconds_per_sentence,
        }


def _json_float(x: float) -> float | str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def sentence_seed(run_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([run_seed & 0x7FFFFFFF, index]).generate_state(1)[0] & 0x7FFFFFFF)


def evaluate(
    corpus: ParallelCorpus,
    strategy: Strategy,
    models: ModelBundle,
    cfg: EvalConfig,
) -> RerankReport:
    """Apply the strategy to every sentence and report corpus BLEU and timing.

    Per-sentence work parallelizes over EBR_THREADS workers; results are
    identical for any worker count because each sentence's randomness comes
    from its own derived seed.
    """
    if corpus.split == "train":
        raise InvalidConfig("evaluate expects a held-out (valid/test) split")
    base = _require(models.base, "base", strategy)

    def run_sentence(i: int) -> SentenceResult:
        src, ref = corpus.pairs[i]
        t0 = time.perf_counter()
        if strategy.kind == "beam":
            chosen = beam_decode(base, src, strategy.width)
            scores: list[float] = []
        else:
            cands = sample(base, src, cfg.k, cfg.temp, sentence_seed(cfg.seed, i))
            scores = strategy_scores(cands, strategy, models, ref)
            minimize = strategy.kind in ("ebr", "nce_ebr")
            chosen = cands.candidates[_argbest(scores, minimize)].hypothesis
        seconds = time.perf_counter() - t0
        chosen_bleu = sentence_bleu(chosen, ref, cfg.sentence_bleu_cfg)
        return SentenceResult(src, ref, chosen, scores, chosen_bleu, seconds)

    indices = range(len(corpus))
    workers = cfg.worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_sentence, indices))
    else:
        results = [run_sentence(i) for i in indices]

    bleu = corpus_bleu(
        [r.chosen for r in results], [r.ref for r in results], cfg.corpus_bleu_cfg
    )
    mean_seconds = sum(r.seconds for r in results) / max(1, len(results))
    return RerankReport(strategy.name, corpus.language_pair, bleu, results, mean_seconds)


def write_report_json(report: RerankReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, sort_keys=True, indent=1)
        fh.write("\n")


TIMING_KEYS = ("mean_seconds_per_sentence", "seconds")


def strip_timing(doc):
    """Copy of a report JSON document without wall-clock fields."""
    if isinstance(doc, dict):
        return {k: strip_timing(v) for k, v in doc.items() if k not in TIMING_KEYS}
    if isinstance(doc, list):
        return [strip_timing(v) for v in doc]
    return doc
