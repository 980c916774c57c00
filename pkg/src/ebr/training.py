"""Energy-model trainers: rank-based margin training and binary NCE.

Rank training follows the sampling loop exactly: pick a language, pick a
sentence pair, draw k candidates from the base translator, resample two of
them from the energy-reweighted distribution, order them by sentence BLEU
against the gold reference, and accumulate the margin violation
``max(alpha * dBLEU + E(y_high) - E(y_low), 0)`` over the batch before one
Adam update. Note the sign: the higher-BLEU hypothesis must end up with the
*lower* energy by at least the margin, consistent with exp(-E/T) reweighting.

Reproducibility contract: all randomness flows from one generator in a fixed
per-entry order (language if more than one, pair index, candidate seed, two
resampling draws, gold-mixing coin only when gamma > 0), so a run is
bit-reproducible from its seed and replicable from the public ops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .basemodel import BaseTranslator, CandidateSet, logprob, sample, seed_rng
from .corpus import ParallelCorpus, TokenSeq
from .energy import EnergyModel, ResampleConfig, energy_grad, resample_pair
from .errors import (
    ContractViolation,
    DivergedTraining,
    EmptyInput,
    InvalidConfig,
    VocabularyMismatch,
)
from .metrics import BleuConfig, sentence_bleu
from .optim import Adam


def hinge_loss(bleu_h: float, bleu_l: float, e_h: float, e_l: float, alpha: float) -> float:
    """Margin violation for one ordered pair; zero when the higher-BLEU
    hypothesis's energy is below the other's by at least alpha * dBLEU."""
    if bleu_h < bleu_l:
        raise ContractViolation("caller must order the pair: bleu_h >= bleu_l")
    return max(alpha * (bleu_h - bleu_l) + e_h - e_l, 0.0)


@dataclass
class RankTrainConfig:
    alpha: float = 10.0
    temperature: float = 1000.0
    k: int = 100
    gamma: float = 0.0
    lr: float = 0.01
    batch_size: int = 8
    epochs: int = 1
    steps_per_epoch: int | None = None
    l2: float = 0.0
    sample_temp: float = 1.0
    cache_candidates: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0 or not self.temperature > 0:
            raise InvalidConfig("alpha and temperature must be > 0")
        if self.k < 2:
            raise InvalidConfig("k must be >= 2")
        if not 0.0 <= self.gamma <= 1.0:
            raise InvalidConfig("gamma must be in [0, 1]")
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 1:
            raise InvalidConfig("bad training configuration")


@dataclass(frozen=True)
class ScheduleEntry:
    language_pair: str
    corpus: ParallelCorpus
    translator: BaseTranslator


class MultiCorpusSchedule:
    """Corpora sharing one target-side vocabulary, picked by relative size."""

    def __init__(self, entries: list[ScheduleEntry]):
        if not entries:
            raise EmptyInput("schedule needs at least one corpus")
        sizes = []
        vocab_size = entries[0].translator.vocab.size
        for e in entries:
            if len(e.corpus) == 0:
                raise EmptyInput(f"corpus for {e.language_pair} is empty")
            if e.translator.vocab.size != vocab_size:
                raise VocabularyMismatch(
                    f"{e.language_pair} translator vocabulary differs from the others"
                )
            sizes.append(len(e.corpus))
        self.entries = list(entries)
        self.probabilities = np.array(sizes, dtype=np.float64) / sum(sizes)

    def __len__(self):
        return len(self.entries)

    @property
    def total_pairs(self) -> int:
        return sum(len(e.corpus) for e in self.entries)


@dataclass
class TraceRow:
    step: int
    epoch: int
    language_pair: str
    batch_loss: float
    violation_rate: float


@dataclass
class RankTrainResult:
    model: EnergyModel
    epoch_losses: list[float]
    rows: list[TraceRow]
    counters: dict = field(default_factory=dict)


def write_trace_csv(rows: list[TraceRow], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,epoch,language_pair,batch_loss,violation_rate\n")
        for r in rows:
            fh.write(f"{r.step},{r.epoch},{r.language_pair},{r.batch_loss!r},{r.violation_rate!r}\n")


def rank_train(energy: EnergyModel, schedule: MultiCorpusSchedule, cfg: RankTrainConfig) -> RankTrainResult:
    """Rank-based margin training of the energy model over a schedule."""
    for entry in schedule.entries:
        if entry.translator.vocab.size != energy.vocab.size:
            raise VocabularyMismatch("energy model vocabulary differs from a base translator")
    rng = seed_rng(cfg.seed, 601)
    opt = Adam(energy.params, lr=cfg.lr, beta1=0.9, beta2=0.98, eps=1e-8)
    resample_cfg = ResampleConfig(temperature=cfg.temperature, seed=cfg.seed)
    bleu_cfg = BleuConfig.sentence_default()
    lang_cum = np.cumsum(schedule.probabilities)
    steps = cfg.steps_per_epoch or max(1, math.ceil(schedule.total_pairs / cfg.batch_size))
    cache: dict[tuple[int, int], CandidateSet] = {}

    rows: list[TraceRow] = []
    epoch_losses: list[float] = []
    counters = {"pairs": 0, "gold_substitutions": 0, "violations": 0}
    global_step = 0
    for epoch in range(cfg.epochs):
        epoch_total = 0.0
        for _ in range(steps):
            batch_loss = 0.0
            batch_langs: list[str] = []
            grad_batch: list[tuple[TokenSeq, float]] = []
            violations = 0
            for _ in range(cfg.batch_size):
                if len(schedule) > 1:
                    lang_idx = int((rng.random() > lang_cum).sum())
                else:
                    lang_idx = 0
                entry = schedule.entries[lang_idx]
                pair_idx = int(rng.integers(len(entry.corpus)))
                src, gold = entry.corpus.pairs[pair_idx]
                cand_seed = int(rng.integers(2**31 - 1))
                key = (lang_idx, pair_idx)
                if cfg.cache_candidates and key in cache:
                    cands = cache[key]
                else:
                    cands = sample(entry.translator, src, cfg.k, cfg.sample_temp, cand_seed)
                    if cfg.cache_candidates:
                        cache[key] = cands
                y1, y2 = resample_pair(cands, energy, resample_cfg, rng=rng)
                if cfg.gamma > 0 and rng.random() < cfg.gamma:
                    y1 = gold
                    counters["gold_substitutions"] += 1
                counters["pairs"] += 1
                if entry.language_pair not in batch_langs:
                    batch_langs.append(entry.language_pair)
                if len(y1) == 0 or len(y2) == 0:
                    # an empty hypothesis cannot be scored by the energy
                    # model; it ranks worst by convention, so the pair
                    # carries no margin signal
                    counters["empty_pairs"] = counters.get("empty_pairs", 0) + 1
                    continue
                bleu1 = sentence_bleu(y1, gold, bleu_cfg)
                bleu2 = sentence_bleu(y2, gold, bleu_cfg)
                if bleu1 >= bleu2:
                    y_h, y_l, b_h, b_l = y1, y2, bleu1, bleu2
                else:
                    y_h, y_l, b_h, b_l = y2, y1, bleu2, bleu1
                both = energy.energies([y_h, y_l])
                pair_loss = hinge_loss(b_h, b_l, float(both[0]), float(both[1]), cfg.alpha)
                if not np.isfinite(pair_loss):
                    raise DivergedTraining(
                        f"non-finite loss at epoch {epoch} step {global_step}",
                        epoch=epoch,
                        step=global_step,
                    )
                batch_loss += pair_loss
                if pair_loss > 0.0:
                    violations += 1
                    counters["violations"] += 1
                    grad_batch.append((y_h, 1.0))
                    grad_batch.append((y_l, -1.0))
            grads = _batch_grads(energy, grad_batch)
            opt.step(energy.params, grads)
            rows.append(
                TraceRow(global_step, epoch, "+".join(batch_langs), batch_loss, violations / cfg.batch_size)
            )
            epoch_total += batch_loss
            global_step += 1
        epoch_losses.append(epoch_total / steps)
    return RankTrainResult(energy, epoch_losses, rows, counters)


def _batch_grads(energy: EnergyModel, grad_batch: list[tuple[TokenSeq, float]]) -> dict:
    if grad_batch:
        return energy_grad(energy, grad_batch)
    grads = {k: np.zeros_like(v) for k, v in energy.params.items()}
    if energy.l2 > 0:
        grads["w1"] += energy.l2 * energy.params["w1"]
        grads["w2"] += energy.l2 * energy.params["w2"]
    return grads


# --- noise-contrastive estimation -------------------------------------------


@dataclass
class NceConfig:
    noise_ratio: int = 1
    lr: float = 0.01
    batch_size: int = 8
    epochs: int = 1
    sample_temp: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_ratio < 1:
            raise InvalidConfig("noise_ratio must be >= 1")
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 1:
            raise InvalidConfig("bad training configuration")


@dataclass
class NceTrainResult:
    model: EnergyModel
    epoch_losses: list[float]
    rows: list[TraceRow]


def _sigmoid(x: float) -> float:
    return 0.5 * (1.0 + math.tanh(0.5 * x))


def nce_score(energy: EnergyModel, y: TokenSeq, base_lp: float, noise_ratio: int) -> float:
    """Classifier logit s(y) = -E(y) - log P_base(y) + log(noise_ratio)."""
    e = float("inf") if len(y) == 0 else energy.energy(y)
    return -e - base_lp + math.log(noise_ratio)


def nce_train(
    energy: EnergyModel,
    corpus: ParallelCorpus,
    base: BaseTranslator,
    cfg: NceConfig,
) -> NceTrainResult:
    """Binary NCE: gold targets vs noise_ratio base-model samples per gold."""
    if base.vocab.size != energy.vocab.size:
        raise VocabularyMismatch("energy model vocabulary differs from the base translator")
    if len(corpus) == 0:
        raise EmptyInput("training corpus is empty")
    rng = seed_rng(cfg.seed, 607)
    opt = Adam(energy.params, lr=cfg.lr, beta1=0.9, beta2=0.98, eps=1e-8)
    rows: list[TraceRow] = []
    epoch_losses: list[float] = []
    log_nu = math.log(cfg.noise_ratio)
    global_step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(corpus))
        epoch_total = 0.0
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [corpus.pairs[i] for i in order[start : start + cfg.batch_size]]
            batch_loss = 0.0
            wrong = 0
            total = 0
            grad_batch: list[tuple[TokenSeq, float]] = []
            for src, gold in batch:
                noise_seed = int(rng.integers(2**31 - 1))
                noise = sample(base, src, cfg.noise_ratio, cfg.sample_temp, noise_seed)
                s_gold = -energy.energy(gold) - logprob(base, src, gold) + log_nu
                batch_loss += np.logaddexp(0.0, -s_gold)
                grad_batch.append((gold, _sigmoid(-s_gold)))
                total += 1
                if s_gold <= 0:
                    wrong += 1
                for c in noise.candidates:
                    e = float("inf") if len(c.hypothesis) == 0 else energy.energy(c.hypothesis)
                    s_noise = -e - c.base_logprob + log_nu
                    batch_loss += np.logaddexp(0.0, s_noise)
                    if len(c.hypothesis):
                        grad_batch.append((c.hypothesis, -_sigmoid(s_noise)))
                    total += 1
                    if s_noise >= 0:
                        wrong += 1
            if not np.isfinite(batch_loss):
                raise DivergedTraining(
                    f"non-finite loss at epoch {epoch} step {global_step}",
                    epoch=epoch,
                    step=global_step,
                )
            grads = _batch_grads(energy, grad_batch)
            opt.step(energy.params, grads)
            rows.append(
                TraceRow(global_step, epoch, corpus.language_pair, float(batch_loss), wrong / total)
            )
            epoch_total += float(batch_loss)
            n_batches += 1
            global_step += 1
        epoch_losses.append(epoch_total / n_batches)
    return NceTrainResult(energy, epoch_losses, rows)


def nce_discrimination_accuracy(
    energy: EnergyModel,
    corpus: ParallelCorpus,
    base: BaseTranslator,
    noise_ratio: int = 1,
    sample_temp: float = 1.0,
    seed: int = 0,
) -> float:
    """Fraction of gold (s > 0) and noise (s < 0) classified by the sign of s."""
    rng = seed_rng(seed, 613)
    correct = 0
    total = 0
    for src, gold in corpus.pairs:
        s_gold = nce_score(energy, gold, logprob(base, src, gold), noise_ratio)
        correct += 1 if s_gold > 0 else 0
        total += 1
        noise = sample(base, src, noise_ratio, sample_temp, int(rng.integers(2**31 - 1)))
        for c in noise.candidates:
            s_noise = nce_score(energy, c.hypothesis, c.base_logprob, noise_ratio)
            correct += 1 if s_noise < 0 else 0
            total += 1
    return correct / total
