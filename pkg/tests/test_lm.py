import math

import numpy as np
import pytest

from ebr.corpus import SyntheticTask, TokenSeq, build_vocabulary, gen_synthetic, tokenize
from ebr.errors import EmptyInput, InvalidConfig
from ebr.lm import (
    MaskedMlpConfig,
    MaskedMlpScorer,
    NgramLM,
    NgramMaskedScorer,
    effective_size,
    lm_logprob,
    pll_score,
    train_ngram,
)


def seqs(vocab, *lines):
    return [tokenize(line, vocab) for line in lines]


class TestNgramLM:
    def test_hand_counted_add_k_estimate(self):
        # corpus {"a b", "a c"}, bigram, k=1: count(a,b)=1, count(a,.)=2,
        # effective vocab {a,b,c,EOS,UNK} has size 5 -> p(b|a) = 2/7
        vocab = build_vocabulary(["a b c"])
        assert effective_size(vocab) == 5
        lm = train_ngram(seqs(vocab, "a b", "a c"), order=2, k=1.0, vocab=vocab)
        a, b = vocab.id_of("a"), vocab.id_of("b")
        assert lm.cond((a,), b) == pytest.approx((1 + 1) / (2 + 5), abs=1e-15)

    def test_k_to_zero_limit_single_continuation(self):
        vocab = build_vocabulary(["a"])
        lm = train_ngram(seqs(vocab, "a a"), order=2, k=1e-12, vocab=vocab)
        a = vocab.id_of("a")
        assert lm.cond((a,), a) == pytest.approx(1.0, abs=1e-9)

    def test_unigram_permutation_invariance(self):
        vocab = build_vocabulary(["a b c d"])
        lm = train_ngram(seqs(vocab, "a b c", "b d"), order=1, k=0.5, vocab=vocab)
        y = tokenize("a b c d", vocab)
        perm = tokenize("c d a b", vocab)
        assert lm_logprob(lm, y) == pytest.approx(lm_logprob(lm, perm), abs=1e-12)

    def test_logprob_is_sum_of_step_logs(self):
        vocab = build_vocabulary(["a b c"])
        lm = train_ngram(seqs(vocab, "a b c", "a b"), order=2, k=1.0, vocab=vocab)
        y = tokenize("a b", vocab)
        a, b = y.tokens
        from ebr.corpus import BOS_ID, EOS_ID

        want = (
            math.log(lm.cond((BOS_ID,), a))
            + math.log(lm.cond((a,), b))
            + math.log(lm.cond((b,), EOS_ID))
        )
        assert lm_logprob(lm, y) == pytest.approx(want, abs=1e-12)

    def test_extension_lowers_logprob(self):
        vocab = build_vocabulary(["a b c"])
        lm = train_ngram(seqs(vocab, "a b c", "a b", "b c"), order=2, k=1.0, vocab=vocab)
        y = tokenize("a b", vocab)
        longer = tokenize("a b c", vocab)
        assert lm_logprob(lm, longer) < lm_logprob(lm, y)

    def test_conditionals_sum_to_one(self):
        vocab = build_vocabulary(["a b c d e"])
        lm = train_ngram(seqs(vocab, "a b c", "d e a"), order=2, k=0.3, vocab=vocab)
        for ctx in [(vocab.id_of("a"),), (vocab.id_of("e"),), (vocab.id_of("b"),), (99 % 8,)]:
            assert lm.cond_vector(ctx).sum() == pytest.approx(1.0, abs=1e-9)

    def test_empty_sequence_rejected(self):
        vocab = build_vocabulary(["a"])
        lm = train_ngram(seqs(vocab, "a"), order=1, k=1.0, vocab=vocab)
        with pytest.raises(EmptyInput):
            lm_logprob(lm, TokenSeq((), ""))

    def test_bad_config_rejected(self):
        vocab = build_vocabulary(["a"])
        with pytest.raises(InvalidConfig):
            NgramLM(0, 1.0, vocab)
        with pytest.raises(InvalidConfig):
            NgramLM(2, 0.0, vocab)
        with pytest.raises(EmptyInput):
            train_ngram([], 1, 1.0, vocab)

    def test_checkpoint_roundtrip(self, tmp_path):
        vocab = build_vocabulary(["a b c"])
        lm = train_ngram(seqs(vocab, "a b c", "c b"), order=3, k=0.7, vocab=vocab)
        lm.save(tmp_path / "lm.ckpt")
        loaded = NgramLM.load(tmp_path / "lm.ckpt", vocab)
        y = tokenize("a b c", vocab)
        assert lm_logprob(loaded, y) == lm_logprob(lm, y)
        assert loaded.ngram_counts == lm.ngram_counts


class TestNgramMaskedScorer:
    def test_length_one_unigram_equals_unigram_logprob(self):
        vocab = build_vocabulary(["a b"])
        targets = seqs(vocab, "a a b")
        ms = NgramMaskedScorer.train(targets, order=1, k=1.0, vocab=vocab)
        lm = train_ngram(targets, order=1, k=1.0, vocab=vocab)
        y = tokenize("a", vocab)
        assert pll_score(ms, y) == pytest.approx(
            math.log(lm.cond((), vocab.id_of("a"))), abs=1e-12
        )

    def test_three_token_bigram_hand_computation(self):
        # single training sentence "a b c"; forward bigram counts:
        # (BOS,a) (a,b) (b,c) (c,EOS); backward (on "c b a"):
        # (BOS,c) (c,b) (b,a) (a,EOS). k=1, effective size 5.
        # At every position of "a b c" the matched token has
        # p_fwd = p_bwd = 2/6 and all four alternatives 1/6, so the
        # renormalized geometric mean is exactly 1/3. pll = log(1/3).
        vocab = build_vocabulary(["a b c"])
        targets = seqs(vocab, "a b c")
        ms = NgramMaskedScorer.train(targets, order=2, k=1.0, vocab=vocab)
        y = tokenize("a b c", vocab)
        for i in range(3):
            assert ms.masked_logprob(y, i) == pytest.approx(math.log(1 / 3), abs=1e-12)
        assert pll_score(ms, y) == pytest.approx(math.log(1 / 3), abs=1e-12)

    def test_masked_vector_is_distribution(self):
        vocab = build_vocabulary(["a b c d"])
        ms = NgramMaskedScorer.train(seqs(vocab, "a b c d", "b c"), order=2, k=0.4, vocab=vocab)
        y = tokenize("a c d", vocab)
        for i in range(len(y)):
            assert ms.masked_vector(y, i).sum() == pytest.approx(1.0, abs=1e-9)

    def test_position_order_does_not_matter(self):
        vocab = build_vocabulary(["a b c d"])
        ms = NgramMaskedScorer.train(seqs(vocab, "a b c d"), order=2, k=1.0, vocab=vocab)
        y = tokenize("d c b a", vocab)
        forward_order = [ms.masked_logprob(y, i) for i in range(len(y))]
        reverse_order = [ms.masked_logprob(y, i) for i in reversed(range(len(y)))]
        assert forward_order == list(reversed(reverse_order))

    def test_checkpoint_roundtrip(self, tmp_path):
        vocab = build_vocabulary(["a b c"])
        ms = NgramMaskedScorer.train(seqs(vocab, "a b c", "b a"), order=2, k=1.0, vocab=vocab)
        ms.save(tmp_path / "mlm.ckpt")
        loaded = NgramMaskedScorer.load(tmp_path / "mlm.ckpt", vocab)
        y = tokenize("a b", vocab)
        assert pll_score(loaded, y) == pll_score(ms, y)


class TestMaskedMlpScorer:
    def test_distribution_and_determinism(self):
        vocab = build_vocabulary(["a b c d"])
        cfg = MaskedMlpConfig(window=1, embed_dim=6, hidden_dim=8, epochs=1, seed=3)
        scorer = MaskedMlpScorer(vocab, cfg).fit(seqs(vocab, "a b c d", "b c d a"))
        y = tokenize("a b c", vocab)
        vec = scorer.masked_vector(y, 1)
        assert vec.sum() == pytest.approx(1.0, abs=1e-9)
        assert vec[0] == 0.0 and vec[1] == 0.0 and vec[4] == 0.0  # PAD/BOS/MASK excluded
        again = MaskedMlpScorer(vocab, cfg).fit(seqs(vocab, "a b c d", "b c d a"))
        assert pll_score(scorer, y) == pll_score(again, y)

    def test_training_improves_pll(self):
        task = SyntheticTask("noisy_copy", vocab_size=10, min_len=4, max_len=8)
        corpus = gen_synthetic(task, 150, seed=4)
        targets = corpus.references()
        vocab = task.vocabulary()
        cfg = MaskedMlpConfig(window=2, embed_dim=8, hidden_dim=16, epochs=4, seed=5)
        fresh = MaskedMlpScorer(vocab, cfg)
        before = np.mean([pll_score(fresh, y) for y in targets[:30]])
        trained = MaskedMlpScorer(vocab, cfg).fit(targets)
        after = np.mean([pll_score(trained, y) for y in targets[:30]])
        assert after > before

    def test_checkpoint_roundtrip(self, tmp_path):
        vocab = build_vocabulary(["a b c"])
        cfg = MaskedMlpConfig(window=1, embed_dim=4, hidden_dim=6, epochs=1, seed=7)
        scorer = MaskedMlpScorer(vocab, cfg).fit(seqs(vocab, "a b c"))
        scorer.save(tmp_path / "mlp.ckpt")
        loaded = MaskedMlpScorer.load(tmp_path / "mlp.ckpt", vocab)
        y = tokenize("a b", vocab)
        assert pll_score(loaded, y) == pll_score(scorer, y)
