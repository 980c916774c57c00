"""Candidate generators behind a shared stepwise decoding interface.

Two implementations of the translator contract:

* ChannelModel: a token-edit noisy channel over a synthetic task. Its
  per-step next-token conditionals come from an exact state-distribution
  filter, so every sampled hypothesis carries its true marginal
  log-probability (summed over all edit alignments, not one sampled path).
* NeuralSeq2Seq: a single-layer recurrent encoder/decoder with additive
  attention, trained by teacher-forced cross entropy with hand-written
  backpropagation in float64 (gradients are checked against central finite
  differences in the tests).

Sampling, beam search, and sequence scoring are generic over the interface:
``begin`` consumes BOS, ``step_logprobs`` gives log p(next token | prefix),
``advance`` consumes a chosen token. Hypotheses never store the terminal
EOS; its log-probability is always included in reported scores, so
``logprob`` reproduces a sample's recorded score bit-for-bit.
"""

from __future__ import annotations

import time
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_container, save_container
from .corpus import BOS_ID, EOS_ID, NUM_RESERVED, ParallelCorpus, SyntheticTask, TokenSeq, Vocabulary
from .errors import DivergedTraining, EmptyInput, InvalidConfig
from .optim import Adam, clip_global_norm

LOG_ZERO = -1.0e9  # saturated log of an impossible event


def seed_rng(*entropy) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(e) & 0x7FFFFFFF for e in entropy]))


@dataclass(frozen=True)
class Candidate:
    hypothesis: TokenSeq
    base_logprob: float
    sentence_bleu: float | None = None


@dataclass(frozen=True)
class CandidateSet:
    source: TokenSeq
    candidates: tuple[Candidate, ...]

    def __len__(self):
        return len(self.candidates)


class BaseTranslator(ABC):
    """Autoregressive translator contract: stepwise next-token log-probabilities."""

    vocab: Vocabulary

    @abstractmethod
    def begin(self, src: TokenSeq, lanes: int):
        """Decoding state for ``lanes`` parallel hypotheses, BOS consumed."""

    @abstractmethod
    def step_logprobs(self, state) -> np.ndarray:
        """(lanes, |V|) log p(next token | consumed prefix)."""

    @abstractmethod
    def advance(self, state, tokens: np.ndarray):
        """Consume one chosen token per lane."""

    @abstractmethod
    def reorder(self, state, indices: np.ndarray):
        """Re-index lanes (beam search bookkeeping)."""

    def max_len(self, src: TokenSeq) -> int:
        return 2 * len(src) + 8


def sample(model: BaseTranslator, src: TokenSeq, k: int, temp: float = 1.0, seed: int = 0) -> CandidateSet:
    """Draw k ancestral samples with exact (temperature-1) log-probabilities.

    Sampling uses the tempered distribution; recorded scores are always the
    model's own log-probabilities. Hypotheses are truncated at max_len with
    the EOS step's log-probability still included.
    """
    if k < 1:
        raise InvalidConfig("k must be >= 1")
    if not temp > 0:
        raise InvalidConfig("temperature must be > 0")
    rng = seed_rng(seed, 101)
    state = model.begin(src, k)
    vocab = model.vocab
    max_len = model.max_len(src)
    alive = np.ones(k, dtype=bool)
    tokens: list[list[int]] = [[] for _ in range(k)]
    for _ in range(max_len):
        lp = model.step_logprobs(state)
        draws = rng.random(k)
        if temp != 1.0:
            tempered = lp / temp
            tempered = tempered - tempered.max(axis=1, keepdims=True)
            probs = np.exp(tempered)
        else:
            probs = np.exp(lp)
        mass = probs.sum(axis=1, keepdims=True)
        probs /= np.where(mass > 0.0, mass, 1.0)  # finished lanes carry no mass
        cum = np.cumsum(probs, axis=1)
        chosen = np.minimum((draws[:, None] > cum).sum(axis=1), lp.shape[1] - 1)
        for lane in range(k):
            if alive[lane]:
                tok = int(chosen[lane])
                if tok == EOS_ID:
                    alive[lane] = False
                else:
                    tokens[lane].append(tok)
        if not alive.any():
            break
        state = model.advance(state, chosen)
    # Score every distinct hypothesis through the canonical logprob path so
    # recorded scores reproduce logprob() bit-for-bit (batched decode math is
    # not bitwise identical to single-lane math).
    seqs = [_to_tokenseq(t, vocab) for t in tokens]
    score_cache: dict[tuple, float] = {}
    cands = []
    for seq in seqs:
        if seq.tokens not in score_cache:
            score_cache[seq.tokens] = logprob(model, src, seq)
        cands.append(Candidate(seq, score_cache[seq.tokens]))
    return CandidateSet(src, tuple(cands))


def _to_tokenseq(ids: list[int], vocab: Vocabulary) -> TokenSeq:
    surface = " ".join(vocab.token_of(t) for t in ids)
    return TokenSeq(tuple(ids), surface)


def attach_bleu(cands: CandidateSet, ref: TokenSeq, bleu_fn) -> CandidateSet:
    """Copy of the candidate set with sentence BLEU vs ``ref`` filled in."""
    scored = tuple(
        Candidate(c.hypothesis, c.base_logprob, bleu_fn(c.hypothesis, ref))
        for c in cands.candidates
    )
    return CandidateSet(cands.source, scored)


def logprob(model: BaseTranslator, src: TokenSeq, tgt: TokenSeq) -> float:
    """Exact log P(tgt, EOS | src): sum of per-step conditionals."""
    state = model.begin(src, 1)
    total = 0.0
    for tok in tgt.tokens:
        lp = model.step_logprobs(state)
        total += lp[0, tok]
        state = model.advance(state, np.array([tok]))
    total += model.step_logprobs(state)[0, EOS_ID]
    return float(total)


def beam_decode(model: BaseTranslator, src: TokenSeq, width: int, max_len: int | None = None) -> TokenSeq:
    """Best completed hypothesis under length-normalized log-probability.

    Ties break deterministically toward lower token id, then earlier
    completion. Width 1 is greedy decoding.
    """
    if width < 1:
        raise InvalidConfig("beam width must be >= 1")
    if max_len is None:
        max_len = model.max_len(src)
    state = model.begin(src, 1)
    live_tokens: list[list[int]] = [[]]
    live_scores = np.zeros(1)
    done: list[tuple[float, list[int]]] = []  # (normalized score, tokens)
    for _ in range(max_len):
        lp = model.step_logprobs(state)
        flat = (live_scores[:, None] + lp).ravel()
        order = np.argsort(-flat, kind="stable")[: width + len(live_tokens)]
        next_tokens: list[list[int]] = []
        next_scores = []
        src_lanes = []
        chosen = []
        for pos in order:
            lane, tok = divmod(int(pos), lp.shape[1])
            score = float(flat[pos])
            if tok == EOS_ID:
                norm = score / (len(live_tokens[lane]) + 1)
                done.append((norm, live_tokens[lane]))
            elif len(next_tokens) < width:
                next_tokens.append(live_tokens[lane] + [tok])
                next_scores.append(score)
                src_lanes.append(lane)
                chosen.append(tok)
        if not next_tokens:
            break
        state = model.reorder(state, np.array(src_lanes))
        state = model.advance(state, np.array(chosen))
        live_tokens = next_tokens
        live_scores = np.array(next_scores)
    else:
        # force-complete anything still live at the length limit
        lp = model.step_logprobs(state)
        for lane in range(len(live_tokens)):
            score = float(live_scores[lane] + lp[lane, EOS_ID])
            done.append((score / (len(live_tokens[lane]) + 1), live_tokens[lane]))
    best = None
    for norm, toks in done:
        if best is None or norm > best[0]:
            best = (norm, toks)
    return _to_tokenseq(best[1], model.vocab)


# --- exact-probability noisy channel ---------------------------------------


class ChannelModel(BaseTranslator):
    """Per-token edit channel around a synthetic task's deterministic output.

    For a source x, the intended output is task.map_reference(x). Each
    intended position then undergoes exactly one edit: copy, substitute
    (uniform over a fixed alternative set), insert (one uniform content token
    emitted before the intended one), or delete. EOS follows the last
    position. Next-token conditionals marginalize over edit alignments with
    a forward filter over the position/pending automaton, so reported
    log-probabilities are exact.
    """

    def __init__(
        self,
        task: SyntheticTask,
        p_copy: float,
        p_substitute: float = 0.0,
        p_insert: float = 0.0,
        p_delete: float = 0.0,
        num_substitutes: int = 1,
    ):
        probs = np.array([p_copy, p_substitute, p_insert, p_delete])
        if (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-12:
            raise InvalidConfig("edit probabilities must be nonnegative and sum to 1")
        if not 1 <= num_substitutes < task.vocab_size:
            raise InvalidConfig("num_substitutes must be in [1, vocab_size)")
        self.task = task
        self.vocab = task.vocabulary()
        self.p_copy, self.p_substitute = float(p_copy), float(p_substitute)
        self.p_insert, self.p_delete = float(p_insert), float(p_delete)
        self.num_substitutes = num_substitutes

    def substitutes(self, token: int) -> list[int]:
        n = self.task.vocab_size
        idx = token - NUM_RESERVED
        return [NUM_RESERVED + (idx + r) % n for r in range(1, self.num_substitutes + 1)]

    def _automaton(self, src: TokenSeq):
        """(DE, M): per-step emission matrix and advance tensors for ``src``."""
        intended = self.task.map_reference(src.tokens)
        m = len(intended)
        n_states = 2 * m + 1  # N_0..N_m then P_0..P_{m-1}
        V = self.vocab.size
        content = list(self.vocab.content_ids)

        # delete closure: D[N_j, N_j'] = p_delete^(j'-j)
        D = np.zeros((n_states, n_states))
        for j in range(m + 1):
            for j2 in range(j, m + 1):
                D[j, j2] = self.p_delete ** (j2 - j)
        for j in range(m):
            D[m + 1 + j, m + 1 + j] = 1.0

        # emissions and destinations from closed states
        Em = np.zeros((n_states, V))
        T = np.zeros((V, n_states, n_states))
        for j in range(m):
            y = intended[j]
            Em[j, y] += self.p_copy
            T[y, j, j + 1] += self.p_copy
            for s in self.substitutes(y):
                Em[j, s] += self.p_substitute / self.num_substitutes
                T[s, j, j + 1] += self.p_substitute / self.num_substitutes
            if self.p_insert > 0:
                for u in content:
                    Em[j, u] += self.p_insert / len(content)
                    T[u, j, m + 1 + j] += self.p_insert / len(content)
            Em[m + 1 + j, y] = 1.0
            T[y, m + 1 + j, j + 1] += 1.0
        Em[m, EOS_ID] = 1.0

        DE = D @ Em
        M = np.einsum("st,vtu->vsu", D, T)
        return DE, M

    def begin(self, src: TokenSeq, lanes: int):
        DE, M = self._automaton(src)
        pi = np.zeros((lanes, DE.shape[0]))
        pi[:, 0] = 1.0
        return [pi, DE, M]

    def step_logprobs(self, state) -> np.ndarray:
        pi, DE, _ = state
        q = pi @ DE
        with np.errstate(divide="ignore"):
            lp = np.where(q > 0.0, np.log(np.maximum(q, 1e-300)), LOG_ZERO)
        return lp

    def advance(self, state, tokens: np.ndarray):
        pi, DE, M = state
        moved = np.einsum("ls,lst->lt", pi, M[np.asarray(tokens, dtype=np.int64)])
        norm = moved.sum(axis=1, keepdims=True)
        safe = np.where(norm > 0.0, norm, 1.0)
        return [moved / safe, DE, M]

    def reorder(self, state, indices: np.ndarray):
        pi, DE, M = state
        return [pi[indices], DE, M]

    def save(self, path, vocab_ref: str = "") -> None:
        hyper = {
            "task": {
                "kind": self.task.kind,
                "vocab_size": self.task.vocab_size,
                "min_len": self.task.min_len,
                "max_len": self.task.max_len,
                "branching": self.task.branching,
                "cipher_shift": self.task.cipher_shift,
                "structure_seed": self.task.structure_seed,
            },
            "p_copy": self.p_copy,
            "p_substitute": self.p_substitute,
            "p_insert": self.p_insert,
            "p_delete": self.p_delete,
            "num_substitutes": self.num_substitutes,
        }
        save_container(path, "channel", vocab_ref, hyper, {})

    @classmethod
    def load(cls, path) -> "ChannelModel":
        c = load_container(path)
        if c.model_kind != "channel":
            raise InvalidConfig(f"expected channel checkpoint, got {c.model_kind}")
        h = c.hyperparams
        return cls(
            SyntheticTask(**h["task"]),
            h["p_copy"],
            h["p_substitute"],
            h["p_insert"],
            h["p_delete"],
            h["num_substitutes"],
        )


def load_translator(path, vocab: Vocabulary) -> BaseTranslator:
    """Open a base-model checkpoint of either kind."""
    from .checkpoint import peek_kind

    kind = peek_kind(path)
    if kind == "channel":
        model = ChannelModel.load(path)
        if model.vocab.size != vocab.size:
            raise InvalidConfig("channel checkpoint vocabulary size does not match")
        return model
    return NeuralSeq2Seq.load(path, vocab)


# --- small attention seq2seq ------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 2e-3
    patience: int = 3
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0 or self.patience < 1:
            raise InvalidConfig("bad training configuration")


class NeuralSeq2Seq(BaseTranslator):
    """Single-layer tanh RNN encoder/decoder with additive attention.

    All parameters are float64; the decoder state after consuming a token
    directly produces the next-token logits, which keeps the training
    forward pass and the stepwise decoding interface numerically identical.
    """

    PARAM_NAMES = (
        "src_emb", "tgt_emb",
        "enc_Wx", "enc_Wh", "enc_b",
        "att_Ws", "att_Uh", "att_v",
        "dec_Wx", "dec_Wh", "dec_Wc", "dec_b",
        "out_W", "out_b",
    )

    def __init__(self, vocab: Vocabulary, embed_dim: int = 32, hidden_dim: int = 64, seed: int = 0):
        self.vocab = vocab
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        V, d, H = vocab.size, embed_dim, hidden_dim
        rng = seed_rng(seed, 211)
        s = {}
        s["src_emb"] = rng.uniform(-0.08, 0.08, size=(V, d))
        s["tgt_emb"] = rng.uniform(-0.08, 0.08, size=(V, d))
        s["enc_Wx"] = rng.normal(0, 1.0 / np.sqrt(d), size=(d, H))
        s["enc_Wh"] = rng.normal(0, 1.0 / np.sqrt(H), size=(H, H))
        s["enc_b"] = np.zeros(H)
        s["att_Ws"] = rng.normal(0, 1.0 / np.sqrt(H), size=(H, H))
        s["att_Uh"] = rng.normal(0, 1.0 / np.sqrt(H), size=(H, H))
        s["att_v"] = rng.normal(0, 1.0 / np.sqrt(H), size=H)
        s["dec_Wx"] = rng.normal(0, 1.0 / np.sqrt(d), size=(d, H))
        s["dec_Wh"] = rng.normal(0, 1.0 / np.sqrt(H), size=(H, H))
        s["dec_Wc"] = rng.normal(0, 1.0 / np.sqrt(H), size=(H, H))
        s["dec_b"] = np.zeros(H)
        s["out_W"] = rng.normal(0, 1.0 / np.sqrt(H), size=(H, V))
        s["out_b"] = np.zeros(V)
        self.params = s

    # -- encoding and stepping

    def _encode(self, src: TokenSeq):
        p = self.params
        ids = list(src.tokens) + [EOS_ID]
        X = p["src_emb"][ids]
        H = np.empty((len(ids), self.hidden_dim))
        h = np.zeros(self.hidden_dim)
        for t in range(len(ids)):
            h = np.tanh(X[t] @ p["enc_Wx"] + h @ p["enc_Wh"] + p["enc_b"])
            H[t] = h
        return H, H @ p["att_Uh"]

    def _dec_step(self, S_prev: np.ndarray, tokens: np.ndarray, H_enc: np.ndarray, U: np.ndarray):
        p = self.params
        q = S_prev @ p["att_Ws"]
        act = np.tanh(q[:, None, :] + U[None, :, :])
        scores = act @ p["att_v"]
        scores -= scores.max(axis=1, keepdims=True)
        alpha = np.exp(scores)
        alpha /= alpha.sum(axis=1, keepdims=True)
        ctx = alpha @ H_enc
        pre = p["tgt_emb"][tokens] @ p["dec_Wx"] + S_prev @ p["dec_Wh"] + ctx @ p["dec_Wc"] + p["dec_b"]
        return np.tanh(pre), (q, act, alpha, ctx)

    def begin(self, src: TokenSeq, lanes: int):
        H_enc, U = self._encode(src)
        S0 = np.tile(H_enc[-1], (lanes, 1))
        S, _ = self._dec_step(S0, np.full(lanes, BOS_ID), H_enc, U)
        return [S, H_enc, U]

    def step_logprobs(self, state) -> np.ndarray:
        S = state[0]
        logits = S @ self.params["out_W"] + self.params["out_b"]
        logits -= logits.max(axis=1, keepdims=True)
        return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))

    def advance(self, state, tokens: np.ndarray):
        S, H_enc, U = state
        S_new, _ = self._dec_step(S, np.asarray(tokens, dtype=np.int64), H_enc, U)
        return [S_new, H_enc, U]

    def reorder(self, state, indices: np.ndarray):
        S, H_enc, U = state
        return [S[indices], H_enc, U]

    # -- training

    def loss_and_grad(self, pairs: list[tuple[TokenSeq, TokenSeq]]):
        """Mean token cross-entropy and its exact gradient over a batch."""
        p = self.params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        total_tokens = sum(len(tgt) + 1 for _, tgt in pairs)
        total_loss = 0.0
        for src, tgt in pairs:
            total_loss += self._pair_backward(src, tgt, grads, 1.0 / total_tokens)
        return total_loss / total_tokens, grads

    def _pair_backward(self, src: TokenSeq, tgt: TokenSeq, grads: dict, scale: float) -> float:
        p = self.params
        d, Hd = self.embed_dim, self.hidden_dim

        src_ids = list(src.tokens) + [EOS_ID]
        X = p["src_emb"][src_ids]
        Ls = len(src_ids)
        H_enc = np.empty((Ls, Hd))
        h = np.zeros(Hd)
        for t in range(Ls):
            h = np.tanh(X[t] @ p["enc_Wx"] + h @ p["enc_Wh"] + p["enc_b"])
            H_enc[t] = h
        U = H_enc @ p["att_Uh"]

        inputs = [BOS_ID] + list(tgt.tokens)
        targets = list(tgt.tokens) + [EOS_ID]
        T = len(inputs)
        S = np.empty((T, Hd))
        caches = []
        s_prev = H_enc[-1]
        loss = 0.0
        dlogits_all = np.empty((T, self.vocab.size))
        for t in range(T):
            s_new, (q, act, alpha, ctx) = self._dec_step(
                s_prev[None, :], np.array([inputs[t]]), H_enc, U
            )
            S[t] = s_new[0]
            caches.append((s_prev, q[0], act[0], alpha[0], ctx[0]))
            logits = S[t] @ p["out_W"] + p["out_b"]
            logits -= logits.max()
            logZ = np.log(np.exp(logits).sum())
            loss -= logits[targets[t]] - logZ
            probs = np.exp(logits - logZ)
            probs[targets[t]] -= 1.0
            dlogits_all[t] = probs
            s_prev = S[t]

        dU_total = np.zeros_like(U)
        dH_enc = np.zeros_like(H_enc)
        ds_next = np.zeros(Hd)
        for t in range(T - 1, -1, -1):
            s_prev, q, act, alpha, ctx = caches[t]
            dlogits = dlogits_all[t] * scale
            grads["out_W"] += np.outer(S[t], dlogits)
            grads["out_b"] += dlogits
            ds = p["out_W"] @ dlogits + ds_next
            du = ds * (1.0 - S[t] ** 2)
            emb_tok = p["tgt_emb"][inputs[t]]
            grads["dec_Wx"] += np.outer(emb_tok, du)
            grads["tgt_emb"][inputs[t]] += p["dec_Wx"] @ du
            grads["dec_Wh"] += np.outer(s_prev, du)
            grads["dec_Wc"] += np.outer(ctx, du)
            grads["dec_b"] += du
            ds_prev = p["dec_Wh"] @ du
            dctx = p["dec_Wc"] @ du
            dalpha = H_enc @ dctx
            dH_enc += np.outer(alpha, dctx)
            de = alpha * (dalpha - float(alpha @ dalpha))
            grads["att_v"] += act.T @ de
            dz = de[:, None] * p["att_v"][None, :] * (1.0 - act**2)
            dq = dz.sum(axis=0)
            dU_total += dz
            grads["att_Ws"] += np.outer(s_prev, dq)
            ds_prev += p["att_Ws"] @ dq
            ds_next = ds_prev

        grads["att_Uh"] += H_enc.T @ dU_total
        dH_enc += dU_total @ p["att_Uh"].T
        dH_enc[-1] += ds_next  # decoder initial state is the last encoder state

        dh_next = np.zeros(Hd)
        for t in range(Ls - 1, -1, -1):
            dh = dH_enc[t] + dh_next
            du = dh * (1.0 - H_enc[t] ** 2)
            grads["enc_Wx"] += np.outer(X[t], du)
            grads["src_emb"][src_ids[t]] += p["enc_Wx"] @ du
            h_prev = H_enc[t - 1] if t > 0 else np.zeros(Hd)
            grads["enc_Wh"] += np.outer(h_prev, du)
            grads["enc_b"] += du
            dh_next = p["enc_Wh"] @ du
        return loss

    def perplexity(self, corpus: ParallelCorpus) -> float:
        total_ce = 0.0
        total_tokens = 0
        for src, tgt in corpus.pairs:
            total_ce -= logprob(self, src, tgt)
            total_tokens += len(tgt) + 1
        return float(np.exp(total_ce / total_tokens))

    # -- persistence

    def save(self, path, vocab_ref: str = "") -> None:
        hyper = {"embed_dim": self.embed_dim, "hidden_dim": self.hidden_dim, "vocab_size": self.vocab.size}
        save_container(path, "neural_seq2seq", vocab_ref, hyper, dict(self.params))

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "NeuralSeq2Seq":
        c = load_container(path)
        if c.model_kind != "neural_seq2seq":
            raise InvalidConfig(f"expected neural_seq2seq checkpoint, got {c.model_kind}")
        if c.hyperparams["vocab_size"] != vocab.size:
            raise InvalidConfig("checkpoint vocabulary size does not match")
        model = cls(vocab, c.hyperparams["embed_dim"], c.hyperparams["hidden_dim"])
        for name in model.PARAM_NAMES:
            model.params[name] = c.arrays[name]
        return model


def train_mle(
    model: NeuralSeq2Seq,
    corpus: ParallelCorpus,
    cfg: TrainConfig,
    valid: ParallelCorpus | None = None,
) -> tuple[NeuralSeq2Seq, list[dict]]:
    """Adam on teacher-forced cross entropy with early stopping.

    Returns the trained model and a per-epoch history of train loss and
    validation perplexity (training perplexity stands in when no validation
    corpus is given).
    """
    if len(corpus) == 0:
        raise EmptyInput("training corpus is empty")
    if corpus.split != "train":
        raise InvalidConfig(f"expected a train split, got {corpus.split!r}")
    opt = Adam(model.params, lr=cfg.lr, beta1=0.9, beta2=0.98, eps=1e-8)
    rng = seed_rng(cfg.seed, 307)
    history: list[dict] = []
    best_ppl = float("inf")
    stale = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(corpus))
        epoch_loss = 0.0
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [corpus.pairs[i] for i in order[start : start + cfg.batch_size]]
            loss, grads = model.loss_and_grad(batch)
            if not np.isfinite(loss):
                raise DivergedTraining(
                    f"non-finite loss at epoch {epoch} step {step}", epoch=epoch, step=step
                )
            clip_global_norm(grads, cfg.clip_norm)
            opt.step(model.params, grads)
            epoch_loss += loss * len(batch)
        eval_corpus = valid if valid is not None else corpus
        ppl = model.perplexity(eval_corpus)
        history.append(
            {"epoch": epoch, "train_loss": epoch_loss / len(corpus), "valid_ppl": ppl}
        )
        if ppl < best_ppl - 1e-9:
            best_ppl = ppl
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return model, history


def timed_sample(model, src, k, temp, seed):
    """sample() plus wall-clock seconds, for timing reports."""
    t0 = time.perf_counter()
    cands = sample(model, src, k, temp, seed)
    return cands, time.perf_counter() - t0
