"""Target-side language model scorers for the fusion baselines.

The forward n-gram model scores full sentences (BOS-padded contexts, EOS
terminal, add-k conditionals). The masked scorer produces per-position
conditionals given both sides of the sentence and averages their logs into
a length-normalized pseudo-log-likelihood. Its default realization combines
a forward and a backward n-gram model (renormalized geometric mean); a small
trainable window predictor over a masked center token is the config-selected
alternative.

Scored events range over the "effective" vocabulary: content tokens, UNK,
and EOS. PAD, BOS, and MASK never occur in scoring positions.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_container, save_container
from .corpus import BOS_ID, EOS_ID, MASK_ID, PAD_ID, TokenSeq, Vocabulary
from .errors import EmptyInput, InvalidConfig
from .optim import Adam

NON_EVENT_IDS = (PAD_ID, BOS_ID, MASK_ID)


def effective_size(vocab: Vocabulary) -> int:
    return vocab.size - len(NON_EVENT_IDS)


class NgramLM:
    """Order-n add-k language model with BOS padding and EOS terminal."""

    def __init__(self, order: int, k: float, vocab: Vocabulary):
        if order < 1:
            raise InvalidConfig("order must be >= 1")
        if not k > 0:
            raise InvalidConfig("add-k smoothing requires k > 0")
        self.order = order
        self.k = k
        self.vocab = vocab
        self.ngram_counts: Counter = Counter()
        self.context_counts: Counter = Counter()

    def _events(self, y: TokenSeq, terminal: bool):
        padded = (BOS_ID,) * (self.order - 1) + y.tokens
        if terminal:
            padded += (EOS_ID,)
        n = self.order
        for t in range(self.order - 1, len(padded)):
            yield padded[t - n + 1 : t], padded[t]

    def add_sentence(self, y: TokenSeq) -> None:
        # training counts cover within-sentence transitions; the EOS terminal
        # is a scoring-time event whose mass comes from smoothing
        for context, token in self._events(y, terminal=False):
            self.ngram_counts[context + (token,)] += 1
            self.context_counts[context] += 1

    def cond(self, context: tuple, token: int) -> float:
        num = self.ngram_counts.get(context + (token,), 0) + self.k
        den = self.context_counts.get(context, 0) + self.k * effective_size(self.vocab)
        return num / den

    def cond_vector(self, context: tuple) -> np.ndarray:
        """(|V|,) conditional over effective ids; zero on PAD/BOS/MASK."""
        probs = np.full(self.vocab.size, self.k)
        probs[list(NON_EVENT_IDS)] = 0.0
        for token in range(self.vocab.size):
            if token in NON_EVENT_IDS:
                continue
            c = self.ngram_counts.get(context + (token,), 0)
            if c:
                probs[token] += c
        probs /= self.context_counts.get(context, 0) + self.k * effective_size(self.vocab)
        return probs

    def logprob(self, y: TokenSeq) -> float:
        if len(y) == 0:
            raise EmptyInput("cannot score an empty sequence")
        total = 0.0
        for context, token in self._events(y, terminal=True):
            total += np.log(self.cond(context, token))
        return float(total)

    def save(self, path, vocab_ref: str = "") -> None:
        save_container(path, "ngram_lm", vocab_ref, self._hyper(), self._arrays())

    def _hyper(self) -> dict:
        return {"order": self.order, "k": self.k, "vocab_size": self.vocab.size}

    def _arrays(self, prefix: str = "") -> dict:
        ng = sorted(self.ngram_counts)
        cx = sorted(self.context_counts)
        return {
            prefix + "ngram_keys": np.array(ng, dtype=np.int64).reshape(len(ng), self.order),
            prefix + "ngram_vals": np.array([self.ngram_counts[g] for g in ng], dtype=np.int64),
            prefix + "context_keys": np.array(cx, dtype=np.int64).reshape(len(cx), self.order - 1),
            prefix + "context_vals": np.array([self.context_counts[g] for g in cx], dtype=np.int64),
        }

    @classmethod
    def _from_arrays(cls, hyper: dict, arrays: dict, vocab: Vocabulary, prefix: str = "") -> "NgramLM":
        lm = cls(hyper["order"], hyper["k"], vocab)
        for key, val in zip(arrays[prefix + "ngram_keys"], arrays[prefix + "ngram_vals"]):
            lm.ngram_counts[tuple(int(t) for t in key)] = int(val)
        for key, val in zip(arrays[prefix + "context_keys"], arrays[prefix + "context_vals"]):
            lm.context_counts[tuple(int(t) for t in key)] = int(val)
        return lm

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "NgramLM":
        c = load_container(path)
        if c.model_kind != "ngram_lm":
            raise InvalidConfig(f"expected ngram_lm checkpoint, got {c.model_kind}")
        if c.hyperparams["vocab_size"] != vocab.size:
            raise InvalidConfig("checkpoint vocabulary size does not match")
        return cls._from_arrays(c.hyperparams, c.arrays, vocab)


def train_ngram(targets: list[TokenSeq], order: int, k: float, vocab: Vocabulary) -> NgramLM:
    if not targets:
        raise EmptyInput("need at least one sentence")
    lm = NgramLM(order, k, vocab)
    for y in targets:
        lm.add_sentence(y)
    return lm


def lm_logprob(lm: NgramLM, y: TokenSeq) -> float:
    return lm.logprob(y)


def _reverse(y: TokenSeq) -> TokenSeq:
    return TokenSeq(tuple(reversed(y.tokens)), y.surface)


class NgramMaskedScorer:
    """Bidirectional masked conditionals from forward + backward n-gram LMs.

    The per-position distribution is the renormalized geometric mean of the
    forward conditional (left context) and the backward conditional (right
    context read inward).
    """

    def __init__(self, forward: NgramLM, backward: NgramLM):
        self.forward = forward
        self.backward = backward
        self.vocab = forward.vocab

    @classmethod
    def train(cls, targets: list[TokenSeq], order: int, k: float, vocab: Vocabulary) -> "NgramMaskedScorer":
        fwd = train_ngram(targets, order, k, vocab)
        bwd = train_ngram([_reverse(y) for y in targets], order, k, vocab)
        return cls(fwd, bwd)

    def _contexts(self, y: TokenSeq, i: int) -> tuple[tuple, tuple]:
        n = self.forward.order
        m = len(y)
        left = tuple(
            y.tokens[j] if j >= 0 else BOS_ID for j in range(i - n + 1, i)
        )
        right = tuple(
            y.tokens[j] if j < m else BOS_ID for j in range(i + n - 1, i, -1)
        )
        return left, right

    def masked_vector(self, y: TokenSeq, i: int) -> np.ndarray:
        left, right = self._contexts(y, i)
        combined = np.sqrt(self.forward.cond_vector(left) * self.backward.cond_vector(right))
        return combined / combined.sum()

    def masked_logprob(self, y: TokenSeq, i: int) -> float:
        return float(np.log(self.masked_vector(y, i)[y.tokens[i]]))

    def save(self, path, vocab_ref: str = "") -> None:
        hyper = {
            "order": self.forward.order,
            "k": self.forward.k,
            "vocab_size": self.vocab.size,
        }
        arrays = self.forward._arrays("fwd_") | self.backward._arrays("bwd_")
        save_container(path, "masked_ngram", vocab_ref, hyper, arrays)

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "NgramMaskedScorer":
        c = load_container(path)
        if c.model_kind != "masked_ngram":
            raise InvalidConfig(f"expected masked_ngram checkpoint, got {c.model_kind}")
        fwd = NgramLM._from_arrays(c.hyperparams, c.arrays, vocab, "fwd_")
        bwd = NgramLM._from_arrays(c.hyperparams, c.arrays, vocab, "bwd_")
        return cls(fwd, bwd)


@dataclass
class MaskedMlpConfig:
    window: int = 2
    embed_dim: int = 16
    hidden_dim: int = 32
    epochs: int = 5
    batch_size: int = 32
    lr: float = 5e-3
    seed: int = 0

    def __post_init__(self):
        if self.window < 1 or self.epochs < 1 or not self.lr > 0:
            raise InvalidConfig("bad masked predictor configuration")


class MaskedMlpScorer:
    """Trainable masked token predictor over a fixed context window.

    The input is the window around position i with the center replaced by
    MASK; out-of-range slots are BOS on the left and EOS on the right. One
    hidden tanh layer predicts the masked token over the effective ids.
    """

    PARAM_NAMES = ("embed", "w1", "b1", "w2", "b2")

    def __init__(self, vocab: Vocabulary, cfg: MaskedMlpConfig):
        self.vocab = vocab
        self.cfg = cfg
        width = 2 * cfg.window + 1
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 509]))
        V, d, h = vocab.size, cfg.embed_dim, cfg.hidden_dim
        self.event_ids = np.array([i for i in range(V) if i not in NON_EVENT_IDS])
        self.params = {
            "embed": rng.uniform(-0.1, 0.1, size=(V, d)),
            "w1": rng.normal(0, 1.0 / np.sqrt(width * d), size=(width * d, h)),
            "b1": np.zeros(h),
            "w2": rng.normal(0, 1.0 / np.sqrt(h), size=(h, len(self.event_ids))),
            "b2": np.zeros(len(self.event_ids)),
        }

    def _window_ids(self, y: TokenSeq, i: int) -> np.ndarray:
        w = self.cfg.window
        m = len(y)
        ids = []
        for j in range(i - w, i + w + 1):
            if j == i:
                ids.append(MASK_ID)
            elif j < 0:
                ids.append(BOS_ID)
            elif j >= m:
                ids.append(EOS_ID)
            else:
                ids.append(y.tokens[j])
        return np.array(ids, dtype=np.int64)

    def _forward(self, windows: np.ndarray):
        p = self.params
        x = p["embed"][windows].reshape(windows.shape[0], -1)
        h1 = np.tanh(x @ p["w1"] + p["b1"])
        logits = h1 @ p["w2"] + p["b2"]
        logits -= logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(logits).sum(axis=1, keepdims=True))
        return x, h1, logits - logz

    def masked_vector(self, y: TokenSeq, i: int) -> np.ndarray:
        _, _, logp = self._forward(self._window_ids(y, i)[None, :])
        probs = np.zeros(self.vocab.size)
        probs[self.event_ids] = np.exp(logp[0])
        return probs

    def masked_logprob(self, y: TokenSeq, i: int) -> float:
        return float(np.log(self.masked_vector(y, i)[y.tokens[i]]))

    def fit(self, targets: list[TokenSeq]) -> "MaskedMlpScorer":
        if not targets:
            raise EmptyInput("need at least one sentence")
        event_pos = {int(t): j for j, t in enumerate(self.event_ids)}
        examples = []
        for y in targets:
            for i in range(len(y)):
                examples.append((self._window_ids(y, i), event_pos[y.tokens[i]]))
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, 521]))
        opt = Adam(self.params, lr=self.cfg.lr, beta1=0.9, beta2=0.98, eps=1e-8)
        p = self.params
        for _ in range(self.cfg.epochs):
            order = rng.permutation(len(examples))
            for start in range(0, len(order), self.cfg.batch_size):
                batch = [examples[i] for i in order[start : start + self.cfg.batch_size]]
                windows = np.stack([w for w, _ in batch])
                labels = np.array([l for _, l in batch])
                x, h1, logp = self._forward(windows)
                dlogits = np.exp(logp)
                dlogits[np.arange(len(batch)), labels] -= 1.0
                dlogits /= len(batch)
                grads = {
                    "w2": h1.T @ dlogits,
                    "b2": dlogits.sum(axis=0),
                }
                dh1 = dlogits @ p["w2"].T * (1.0 - h1**2)
                grads["w1"] = x.T @ dh1
                grads["b1"] = dh1.sum(axis=0)
                dx = (dh1 @ p["w1"].T).reshape(windows.shape[0], windows.shape[1], -1)
                gemb = np.zeros_like(p["embed"])
                np.add.at(gemb, windows.ravel(), dx.reshape(-1, self.cfg.embed_dim))
                grads["embed"] = gemb
                opt.step(self.params, grads)
        return self

    def save(self, path, vocab_ref: str = "") -> None:
        hyper = {
            "window": self.cfg.window,
            "embed_dim": self.cfg.embed_dim,
            "hidden_dim": self.cfg.hidden_dim,
            "vocab_size": self.vocab.size,
        }
        save_container(path, "masked_mlp", vocab_ref, hyper, dict(self.params))

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "MaskedMlpScorer":
        c = load_container(path)
        if c.model_kind != "masked_mlp":
            raise InvalidConfig(f"expected masked_mlp checkpoint, got {c.model_kind}")
        cfg = MaskedMlpConfig(
            window=c.hyperparams["window"],
            embed_dim=c.hyperparams["embed_dim"],
            hidden_dim=c.hyperparams["hidden_dim"],
        )
        scorer = cls(vocab, cfg)
        for name in cls.PARAM_NAMES:
            scorer.params[name] = c.arrays[name]
        return scorer


def pll_score(scorer, y: TokenSeq) -> float:
    """Average over positions of the masked log-conditional (length-normalized)."""
    if len(y) == 0:
        raise EmptyInput("cannot score an empty sequence")
    total = sum(scorer.masked_logprob(y, i) for i in range(len(y)))
    return float(total) / len(y)
