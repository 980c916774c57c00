"""Unconditional energy scorer over target token sequences.

The model is an embedding table pooled into a single vector and projected by
a 2-layer tanh perceptron to one scalar. Lower energy means "more like a
good target sentence".

Default pooling is the mean over a fixed local stencil (window 3, constant
coefficients, tanh) applied to the embeddings. The stencil carries no
learnable parameters, so the parameter count stays embedding + projection,
but it breaks permutation invariance: plain mean-over-embeddings cannot
distinguish a sentence from its shuffle, which would make order-sensitivity
analyses vacuous. Plain mean pooling remains available as an ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basemodel import CandidateSet, seed_rng
from .checkpoint import load_container, save_container
from .corpus import TokenSeq, Vocabulary
from .errors import EmptyInput, InsufficientCandidates, InvalidConfig

POOLINGS = ("conv", "mean")

# fixed window-3 stencil: previous, current, next token coefficients
STENCIL_PREV = 0.5
STENCIL_CUR = 1.0
STENCIL_NEXT = -0.5


@dataclass(frozen=True)
class ResampleConfig:
    temperature: float = 1000.0
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise InvalidConfig("temperature must be > 0")


class EnergyModel:
    """Embedding + pooling + 2-layer projection to a scalar energy."""

    PARAM_NAMES = ("embed", "w1", "b1", "w2", "b2")

    def __init__(
        self,
        vocab: Vocabulary,
        embed_dim: int = 64,
        hidden_dim: int = 256,
        pooling: str = "conv",
        freeze_embeddings: bool = False,
        l2: float = 0.0,
        seed: int = 0,
    ):
        if pooling not in POOLINGS:
            raise InvalidConfig(f"pooling must be one of {POOLINGS}")
        if l2 < 0:
            raise InvalidConfig("l2 strength must be >= 0")
        self.vocab = vocab
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.pooling = pooling
        self.freeze_embeddings = freeze_embeddings
        self.l2 = l2
        rng = seed_rng(seed, 401)
        V, d, h = vocab.size, embed_dim, hidden_dim
        self.params = {
            "embed": rng.uniform(-0.1, 0.1, size=(V, d)),
            "w1": rng.normal(0, 1.0 / np.sqrt(d), size=(d, h)),
            "b1": np.zeros(h),
            "w2": rng.normal(0, 1.0 / np.sqrt(h), size=h),
            "b2": np.zeros(1),
        }

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def _forward(self, seqs: list[TokenSeq]):
        """Batched forward pass; returns energies and backward caches."""
        for y in seqs:
            if len(y) == 0:
                raise EmptyInput("cannot score an empty sequence")
        p = self.params
        B = len(seqs)
        lengths = np.array([len(y) for y in seqs])
        L = int(lengths.max())
        ids = np.zeros((B, L), dtype=np.int64)
        mask = np.zeros((B, L, 1))
        for i, y in enumerate(seqs):
            ids[i, : len(y)] = y.tokens
            mask[i, : len(y), 0] = 1.0
        emb = p["embed"][ids] * mask
        if self.pooling == "conv":
            prev = np.zeros_like(emb)
            nxt = np.zeros_like(emb)
            prev[:, 1:] = emb[:, :-1]
            nxt[:, :-1] = emb[:, 1:]
            z = STENCIL_PREV * prev + STENCIL_CUR * emb + STENCIL_NEXT * nxt
            hcv = np.tanh(z) * mask
        else:
            hcv = emb
        pooled = hcv.sum(axis=1) / lengths[:, None]
        a1 = pooled @ p["w1"] + p["b1"]
        h1 = np.tanh(a1)
        energies = h1 @ p["w2"] + p["b2"][0]
        return energies, (ids, mask, lengths, hcv, pooled, h1)

    def energies(self, seqs: list[TokenSeq]) -> np.ndarray:
        return self._forward(seqs)[0]

    def energy(self, y: TokenSeq) -> float:
        return float(self._forward([y])[0][0])

    def grad(self, batch: list[tuple[TokenSeq, float]]) -> dict:
        """Exact gradient of sum_i weight_i * E(y_i) plus the L2 term.

        L2 regularization applies to the projection weight matrices only,
        and embedding gradients are zeroed when embeddings are frozen.
        """
        if not batch:
            raise EmptyInput("gradient of an empty batch")
        p = self.params
        seqs = [y for y, _ in batch]
        weights = np.array([w for _, w in batch], dtype=np.float64)
        _, (ids, mask, lengths, hcv, pooled, h1) = self._forward(seqs)

        grads = {k: np.zeros_like(v) for k, v in p.items()}
        grads["w2"] += h1.T @ weights
        grads["b2"][0] = weights.sum()
        da1 = (weights[:, None] * p["w2"][None, :]) * (1.0 - h1**2)
        grads["w1"] += pooled.T @ da1
        grads["b1"] += da1.sum(axis=0)
        dpooled = da1 @ p["w1"].T
        dh = (dpooled / lengths[:, None])[:, None, :] * mask
        if self.pooling == "conv":
            dz = dh * (1.0 - hcv**2)
            demb = STENCIL_CUR * dz
            demb[:, :-1] += STENCIL_PREV * dz[:, 1:]
            demb[:, 1:] += STENCIL_NEXT * dz[:, :-1]
            demb *= mask
        else:
            demb = dh
        if not self.freeze_embeddings:
            np.add.at(grads["embed"], ids.ravel(), demb.reshape(-1, self.embed_dim))
        if self.l2 > 0:
            grads["w1"] += self.l2 * p["w1"]
            grads["w2"] += self.l2 * p["w2"]
        return grads

    # -- persistence

    def save(self, path, vocab_ref: str = "") -> None:
        hyper = {
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "pooling": self.pooling,
            "freeze_embeddings": self.freeze_embeddings,
            "l2": self.l2,
            "vocab_size": self.vocab.size,
        }
        save_container(path, "energy", vocab_ref, hyper, dict(self.params))

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "EnergyModel":
        c = load_container(path)
        if c.model_kind != "energy":
            raise InvalidConfig(f"expected energy checkpoint, got {c.model_kind}")
        if c.hyperparams["vocab_size"] != vocab.size:
            raise InvalidConfig("checkpoint vocabulary size does not match")
        model = cls(
            vocab,
            c.hyperparams["embed_dim"],
            c.hyperparams["hidden_dim"],
            c.hyperparams["pooling"],
            c.hyperparams["freeze_embeddings"],
            c.hyperparams["l2"],
        )
        for name in model.PARAM_NAMES:
            model.params[name] = c.arrays[name]
        return model


def energy_grad(model: EnergyModel, batch: list[tuple[TokenSeq, float]]) -> dict:
    return model.grad(batch)


def renormalize_energies(energies: np.ndarray, temperature: float) -> np.ndarray:
    """exp(-E/T) normalized over the candidate list, with max-subtraction."""
    scaled = -np.asarray(energies, dtype=np.float64) / temperature
    scaled -= scaled.max()
    w = np.exp(scaled)
    return w / w.sum()

def resample_pair(
    cands: CandidateSet,
    model: EnergyModel,
    cfg: ResampleConfig,
    rng: np.random.Generator | None = None,
) -> tuple[TokenSeq, TokenSeq]:
    """Two independent draws (with replacement) from the renormalized set."""
    if len(cands) < 2:
        raise InsufficientCandidates(f"need at least 2 candidates, got {len(cands)}")
    weights = renormalize_energies(
        model.energies([c.hypothesis for c in cands.candidates]), cfg.temperature
    )
    if rng is None:
        rng = seed_rng(cfg.seed, 409)
    cum = np.cumsum(weights)
    draws = rng.random(2)
    i1 = min(int((draws[0] > cum).sum()), len(cands) - 1)
    i2 = min(int((draws[1] > cum).sum()), len(cands) - 1)
    return cands.candidates[i1].hypothesis, cands.candidates[i2].hypothesis
