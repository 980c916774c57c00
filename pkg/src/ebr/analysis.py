"""Diagnostic analyses: rank-correlation histograms, length-binned BLEU,
shuffle sensitivity of the energy, and mechanical choice diffs between
re-ranking strategies."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .basemodel import BaseTranslator, sample, seed_rng
from .corpus import ParallelCorpus, TokenSeq
from .energy import EnergyModel
from .errors import AlignmentError, InvalidConfig, UndefinedCorrelation
from .metrics import BleuConfig, corpus_bleu, sentence_bleu, spearman
from .rerank import RerankReport, sentence_seed

N_BINS = 20


@dataclass
class SpearmanDistribution:
    bin_edges: np.ndarray  # 21 edges over [-1, 1]
    counts: np.ndarray  # 20 bins
    rhos: list[float]
    excluded: int

    @property
    def mean_rho(self) -> float:
        return float(np.mean(self.rhos)) if self.rhos else float("nan")

    def to_json(self) -> dict:
        return {
            "bin_edges": [float(e) for e in self.bin_edges],
            "counts": [int(c) for c in self.counts],
            "mean_rho": self.mean_rho,
            "excluded": self.excluded,
            "n": len(self.rhos),
        }


def spearman_distribution(
    corpus: ParallelCorpus,
    base: BaseTranslator,
    scorer,
    k: int,
    seed: int,
    energy: EnergyModel | None = None,
    temp: float = 1.0,
) -> SpearmanDistribution:
    """Per-sentence rank correlation between candidate BLEU and a scorer.

    ``scorer`` is "base_logprob", "energy" (negated so higher is better), or
    a callable (hypothesis, ref) -> score. Sentences whose BLEU or score
    vector is constant have no defined correlation and are excluded (the
    count is reported).
    """
    if k < 3:
        raise InvalidConfig("need k >= 3 candidates per sentence")
    if scorer == "energy" and energy is None:
        raise InvalidConfig("scorer 'energy' needs an energy model")
    bleu_cfg = BleuConfig.sentence_default()
    rhos: list[float] = []
    excluded = 0
    for i, (src, ref) in enumerate(corpus.pairs):
        cands = sample(base, src, k, temp, sentence_seed(seed, i))
        bleus = [sentence_bleu(c.hypothesis, ref, bleu_cfg) for c in cands.candidates]
        if scorer == "base_logprob":
            scores = [c.base_logprob for c in cands.candidates]
        elif scorer == "energy":
            scores = [
                -energy.energy(c.hypothesis) if len(c.hypothesis) else float("-inf")
                for c in cands.candidates
            ]
        else:
            scores = [scorer(c.hypothesis, ref) for c in cands.candidates]
        try:
            rhos.append(spearman(bleus, scores))
        except UndefinedCorrelation:
            excluded += 1
    edges = np.linspace(-1.0, 1.0, N_BINS + 1)
    counts, _ = np.histogram(rhos, bins=edges)
    return SpearmanDistribution(edges, counts, rhos, excluded)


def write_histogram_gnuplot(dist: SpearmanDistribution, path) -> None:
    """Two columns: bin center, count."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, c in enumerate(dist.counts):
            center = 0.5 * (dist.bin_edges[i] + dist.bin_edges[i + 1])
            fh.write(f"{center!r} {int(c)}\n")


@dataclass
class LengthBinRow:
    label: str
    lo: int
    hi: int | None  # None: unbounded
    count: int
    bleu: float | None  # None: empty bin


def length_binned_bleu(
    report: RerankReport,
    bins: list[int],
    cfg: BleuConfig | None = None,
) -> list[LengthBinRow]:
    """Corpus BLEU over sentences grouped by reference length.

    ``bins`` lists the upper bounds; groups are (0,b1], (b1,b2], ..., (bn,inf).
    """
    if sorted(bins) != list(bins) or any(b < 1 for b in bins):
        raise InvalidConfig("bins must be increasing positive length bounds")
    cfg = cfg or BleuConfig.corpus_default()
    rows = []
    lows = [0] + list(bins)
    highs = list(bins) + [None]
    for lo, hi in zip(lows, highs):
        members = [
            s
            for s in report.per_sentence
            if len(s.ref) > lo and (hi is None or len(s.ref) <= hi)
        ]
        label = f"({lo}, {hi}]" if hi is not None else f"({lo}, )"
        if members:
            score = corpus_bleu([m.chosen for m in members], [m.ref for m in members], cfg)
            rows.append(LengthBinRow(label, lo, hi, len(members), score))
        else:
            rows.append(LengthBinRow(label, lo, hi, 0, None))
    return rows


def write_length_bins_csv(rows: list[LengthBinRow], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("bin,count,bleu\n")
        for r in rows:
            bleu = "" if r.bleu is None else repr(r.bleu)
            fh.write(f"{r.label},{r.count},{bleu}\n")


@dataclass
class ShuffleReport:
    n: int
    local_skipped: int
    mean_original: float
    mean_local: float | None
    mean_global: float
    preference_local: float | None  # fraction with E(original) < E(local)
    preference_global: float

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "local_skipped": self.local_skipped,
            "mean_original": self.mean_original,
            "mean_local": self.mean_local,
            "mean_global": self.mean_global,
            "preference_local": self.preference_local,
            "preference_global": self.preference_global,
        }


def shuffle_energy_test(
    energy: EnergyModel,
    targets: list[TokenSeq],
    window: int = 3,
    seed: int = 0,
) -> ShuffleReport:
    """Energies of original vs locally/globally shuffled targets.

    The local shuffle permutes one random window; sentences shorter than the
    window are skipped for it (and counted). A drawn identity permutation
    leaves energies equal, which counts as a non-preference under the strict
    inequality.
    """
    if window < 2:
        raise InvalidConfig("window must be >= 2")
    if not targets:
        raise InvalidConfig("need at least one target")
    rng = seed_rng(seed, 701)
    orig_e: list[float] = []
    global_e: list[float] = []
    local_e: list[float] = []
    pref_global = 0
    pref_local = 0
    local_skipped = 0
    for y in targets:
        m = len(y)
        perm = rng.permutation(m)
        global_tokens = tuple(y.tokens[j] for j in perm)
        if m >= window:
            start = int(rng.integers(0, m - window + 1))
            wperm = rng.permutation(window)
            local_tokens = list(y.tokens)
            local_tokens[start : start + window] = [
                y.tokens[start + j] for j in wperm
            ]
            shuffles = [TokenSeq(global_tokens, ""), TokenSeq(tuple(local_tokens), "")]
        else:
            local_skipped += 1
            shuffles = [TokenSeq(global_tokens, "")]
        energies = energy.energies([y] + shuffles)
        e0 = float(energies[0])
        orig_e.append(e0)
        global_e.append(float(energies[1]))
        if e0 < energies[1]:
            pref_global += 1
        if len(shuffles) == 2:
            local_e.append(float(energies[2]))
            if e0 < energies[2]:
                pref_local += 1
    n = len(targets)
    n_local = n - local_skipped
    return ShuffleReport(
        n=n,
        local_skipped=local_skipped,
        mean_original=float(np.mean(orig_e)),
        mean_local=float(np.mean(local_e)) if local_e else None,
        mean_global=float(np.mean(global_e)),
        preference_local=pref_local / n_local if n_local else None,
        preference_global=pref_global / n,
    )


@dataclass
class ChoiceDiffRow:
    src: str
    choice_a: str
    choice_b: str
    bleu_a: float
    bleu_b: float


def choice_diff(report_a: RerankReport, report_b: RerankReport) -> list[ChoiceDiffRow]:
    """Sentences where two strategies chose differently, largest BLEU gap first."""
    if len(report_a.per_sentence) != len(report_b.per_sentence):
        raise AlignmentError("reports cover different numbers of sentences")
    rows = []
    for sa, sb in zip(report_a.per_sentence, report_b.per_sentence):
        if sa.src.tokens != sb.src.tokens or sa.ref.tokens != sb.ref.tokens:
            raise AlignmentError("reports were built on different corpora")
        if sa.chosen.tokens != sb.chosen.tokens:
            rows.append(
                ChoiceDiffRow(
                    sa.src.surface, sa.chosen.surface, sb.chosen.surface,
                    sa.chosen_bleu, sb.chosen_bleu,
                )
            )
    rows.sort(key=lambda r: -abs(r.bleu_a - r.bleu_b))
    return rows


def write_choice_diff_csv(rows: list[ChoiceDiffRow], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("src,choice_a,choice_b,bleu_a,bleu_b\n")
        for r in rows:
            fh.write(f"{r.src},{r.choice_a},{r.choice_b},{r.bleu_a!r},{r.bleu_b!r}\n")


def write_json(doc: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
