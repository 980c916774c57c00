"""Parallel corpora, tokenization, vocabularies, and synthetic task generation.

All objects here are immutable after construction and safe to share across
worker threads. Reserved token ids are fixed so that checkpoints and masked
scoring stay stable across runs.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, EmptyInput, InvalidConfig

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
MASK_ID = 4

RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>", "<mask>")
NUM_RESERVED = len(RESERVED_TOKENS)

VOCAB_FORMAT_VERSION = 1

SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class TokenSeq:
    """A tokenized sentence: content token ids plus the original surface string.

    Content ids exclude the reserved ids; BOS/EOS framing is added by models,
    not stored here.
    """

    tokens: tuple[int, ...]
    surface: str

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))

    def __len__(self):
        return len(self.tokens)


class Vocabulary:
    """Token-to-id map with fixed reserved ids 0..4 and optional BPE merges.

    When ``merges`` is non-empty the vocabulary tokenizes whole lines at the
    character level and applies the merges in learned order; otherwise
    tokenization is whitespace words with character fallback.
    """

    def __init__(self, tokens: list[str], merges: list[tuple[str, str]] | None = None):
        self._id_to_token = list(RESERVED_TOKENS) + list(tokens)
        self._token_to_id = {t: i for i, t in enumerate(self._id_to_token)}
        if len(self._token_to_id) != len(self._id_to_token):
            raise InvalidConfig("duplicate tokens in vocabulary")
        self.merges = [tuple(m) for m in (merges or [])]

    @property
    def size(self) -> int:
        return len(self._id_to_token)

    def __len__(self):
        return self.size

    def id_of(self, token: str) -> int | None:
        return self._token_to_id.get(token)

    def token_of(self, token_id: int) -> str:
        return self._id_to_token[token_id]

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    @property
    def content_ids(self) -> range:
        return range(NUM_RESERVED, self.size)

    def encode_word(self, word: str) -> list[int]:
        """Map one whitespace unit to ids: direct lookup, else characters.

        An unseen character maps to UNK.
        """
        wid = self._token_to_id.get(word)
        if wid is not None:
            return [wid]
        return [self._token_to_id.get(ch, UNK_ID) for ch in word]

    def to_json(self) -> dict:
        return {
            "version": VOCAB_FORMAT_VERSION,
            "reserved": {t: i for i, t in enumerate(RESERVED_TOKENS)},
            "tokens": self._id_to_token[NUM_RESERVED:],
            "merges": [list(m) for m in self.merges],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Vocabulary":
        if doc.get("version") != VOCAB_FORMAT_VERSION:
            raise InvalidConfig(f"unsupported vocabulary version: {doc.get('version')!r}")
        return cls(doc["tokens"], [tuple(m) for m in doc["merges"]])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, ensure_ascii=False, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def build_vocabulary(lines: list[str]) -> Vocabulary:
    """Word-level vocabulary over the given lines, plus their characters.

    Words are added in first-seen order, then any characters not already
    present as single-char words, so character fallback stays in-vocabulary
    for any word built from seen characters.
    """
    tokens: list[str] = []
    seen = set()
    chars: list[str] = []
    for line in lines:
        for word in line.split():
            if word not in seen:
                seen.add(word)
                tokens.append(word)
            for ch in word:
                if ch not in seen and ch not in chars:
                    chars.append(ch)
    for ch in chars:
        if ch not in seen:
            seen.add(ch)
            tokens.append(ch)
    return Vocabulary(tokens)


def _normalize(text: str) -> str:
    return " ".join(text.split())


def tokenize(text: str, vocab: Vocabulary) -> TokenSeq:
    """Tokenize ``text`` under ``vocab``; raises EmptyInput on blank input."""
    norm = _normalize(text)
    if not norm:
        raise EmptyInput("cannot tokenize empty or whitespace-only text")
    if vocab.merges:
        ids = _bpe_encode(norm, vocab)
    else:
        ids = []
        for word in norm.split():
            ids.extend(vocab.encode_word(word))
    return TokenSeq(tuple(ids), norm)


def detokenize(tokens, vocab: Vocabulary) -> str:
    """Invert tokenize on the id sequence alone (no stored surface needed)."""
    pieces = [vocab.token_of(t) for t in tokens if t >= NUM_RESERVED or t == UNK_ID]
    if vocab.merges:
        return "".join(pieces)
    return " ".join(pieces)


def _bpe_encode(norm: str, vocab: Vocabulary) -> list[int]:
    units = list(norm)
    for left, right in vocab.merges:
        merged = []
        i = 0
        while i < len(units):
            if i + 1 < len(units) and units[i] == left and units[i + 1] == right:
                merged.append(left + right)
                i += 2
            else:
                merged.append(units[i])
                i += 1
        units = merged
    return [vocab.id_of(u) if u in vocab else UNK_ID for u in units]


def learn_bpe(corpus: "ParallelCorpus", num_merges: int) -> Vocabulary:
    """Character vocabulary plus the ``num_merges`` most frequent pair merges.

    Pair frequencies are counted over whole whitespace-normalized lines (both
    sides of the corpus), so merges may span spaces. Ties break
    lexicographically on the pair.
    """
    if num_merges < 0:
        raise InvalidConfig("num_merges must be >= 0")
    lines = []
    for src, ref in corpus.pairs:
        lines.append(_normalize(src.surface))
        lines.append(_normalize(ref.surface))

    char_tokens: list[str] = []
    seen: set[str] = set()
    for line in lines:
        for ch in line:
            if ch not in seen:
                seen.add(ch)
                char_tokens.append(ch)

    sequences = [list(line) for line in lines if line]
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        counts: Counter = Counter()
        for seq in sequences:
            for a, b in zip(seq, seq[1:]):
                counts[(a, b)] += 1
        if not counts:
            break
        best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        left, right = best
        for si, seq in enumerate(sequences):
            merged = []
            i = 0
            while i < len(seq):
                if i + 1 < len(seq) and seq[i] == left and seq[i + 1] == right:
                    merged.append(left + right)
                    i += 2
                else:
                    merged.append(seq[i])
                    i += 1
            sequences[si] = merged
        unit = left + right
        if unit not in seen:
            seen.add(unit)
            char_tokens.append(unit)

    return Vocabulary(char_tokens, merges)


class ParallelCorpus:
    """Aligned (source, reference) pairs with a split label and language tag."""

    def __init__(self, pairs, language_pair: str, split: str):
        if split not in SPLITS:
            raise InvalidConfig(f"split must be one of {SPLITS}, got {split!r}")
        pairs = list(pairs)
        for src, ref in pairs:
            if len(ref) == 0:
                raise EmptyInput("corpus pair with empty reference")
        self.pairs = pairs
        self.language_pair = language_pair
        self.split = split

    def __len__(self):
        return len(self.pairs)

    def sources(self) -> list[TokenSeq]:
        return [s for s, _ in self.pairs]

    def references(self) -> list[TokenSeq]:
        return [r for _, r in self.pairs]


def save_corpus_text(corpus: ParallelCorpus, src_path, tgt_path) -> None:
    with open(src_path, "w", encoding="utf-8") as fs, open(tgt_path, "w", encoding="utf-8") as ft:
        for src, ref in corpus.pairs:
            fs.write(src.surface + "\n")
            ft.write(ref.surface + "\n")


def load_corpus_text(src_path, tgt_path, vocab: Vocabulary, language_pair: str, split: str) -> ParallelCorpus:
    with open(src_path, encoding="utf-8") as fs:
        src_lines = fs.read().splitlines()
    with open(tgt_path, encoding="utf-8") as ft:
        tgt_lines = ft.read().splitlines()
    if len(src_lines) != len(tgt_lines):
        raise AlignmentError(
            f"source has {len(src_lines)} lines, target has {len(tgt_lines)}"
        )
    pairs = [(tokenize(s, vocab), tokenize(t, vocab)) for s, t in zip(src_lines, tgt_lines)]
    return ParallelCorpus(pairs, language_pair, split)


def save_corpus_tsv(corpus: ParallelCorpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for src, ref in corpus.pairs:
            fh.write(f"{src.surface}\t{ref.surface}\n")


def load_corpus_tsv(path, vocab: Vocabulary, language_pair: str, split: str) -> ParallelCorpus:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh.read().splitlines(), start=1):
            cols = line.split("\t")
            if len(cols) != 2:
                raise AlignmentError(f"line {lineno}: expected 2 tab-separated columns")
            pairs.append((tokenize(cols[0], vocab), tokenize(cols[1], vocab)))
    return ParallelCorpus(pairs, language_pair, split)


# --- synthetic tasks ------------------------------------------------------

TASK_KINDS = ("reverse", "cipher", "noisy_copy")


@dataclass(frozen=True)
class SyntheticTask:
    """Deterministic toy translation task over a small word vocabulary.

    Source sentences follow a first-order Markov language whose transition
    structure is fixed by ``structure_seed`` (not by the per-corpus seed), so
    train/valid/test splits generated with different seeds share one language.
    Targets have the same learnable regularities as sources, which is what an
    unconditional target-side scorer needs to be useful.
    """

    kind: str
    vocab_size: int = 30
    min_len: int = 6
    max_len: int = 12
    branching: int = 4
    cipher_shift: int = 3
    structure_seed: int = 7

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise InvalidConfig(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.vocab_size < 2 or self.min_len < 1 or self.max_len < self.min_len:
            raise InvalidConfig("bad synthetic task dimensions")
        if self.branching < 1 or self.branching > self.vocab_size:
            raise InvalidConfig("branching must be in [1, vocab_size]")

    def word(self, index: int) -> str:
        return f"w{index:02d}"

    def vocabulary(self) -> Vocabulary:
        return Vocabulary([self.word(i) for i in range(self.vocab_size)])

    def successor_table(self) -> np.ndarray:
        """(vocab_size, branching) content-index successors, seed-fixed."""
        rng = np.random.default_rng(np.random.SeedSequence([self.structure_seed, 11]))
        table = np.empty((self.vocab_size, self.branching), dtype=np.int64)
        for i in range(self.vocab_size):
            table[i] = rng.choice(self.vocab_size, size=self.branching, replace=False)
        return table

    def map_reference(self, src_ids: tuple[int, ...]) -> tuple[int, ...]:
        """Reference token ids for a source, per task definition."""
        if self.kind == "reverse":
            return tuple(reversed(src_ids))
        if self.kind == "cipher":
            n = self.vocab_size
            return tuple(
                NUM_RESERVED + ((t - NUM_RESERVED + self.cipher_shift) % n) for t in src_ids
            )
        return tuple(src_ids)


def gen_synthetic(task: SyntheticTask, n: int, seed: int, split: str = "train") -> ParallelCorpus:
    """Generate ``n`` source/reference pairs; byte-identical for equal inputs."""
    if n < 1:
        raise InvalidConfig("n must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
    successors = task.successor_table()
    vocab = task.vocabulary()
    pairs = []
    for _ in range(n):
        length = int(rng.integers(task.min_len, task.max_len + 1))
        idx = int(rng.integers(task.vocab_size))
        indices = [idx]
        for _ in range(length - 1):
            idx = int(successors[idx][rng.integers(task.branching)])
            indices.append(idx)
        src_ids = tuple(NUM_RESERVED + i for i in indices)
        ref_ids = task.map_reference(src_ids)
        src = TokenSeq(src_ids, " ".join(vocab.token_of(t) for t in src_ids))
        ref = TokenSeq(ref_ids, " ".join(vocab.token_of(t) for t in ref_ids))
        pairs.append((src, ref))
    return ParallelCorpus(pairs, f"syn-{task.kind}", split)
