import math

import numpy as np
import pytest
import scipy.stats

from ebr.basemodel import Candidate, CandidateSet, seed_rng
from ebr.corpus import TokenSeq, build_vocabulary
from ebr.energy import (
    EnergyModel,
    ResampleConfig,
    energy_grad,
    renormalize_energies,
    resample_pair,
)
from ebr.errors import EmptyInput, InsufficientCandidates, InvalidConfig


def ts(ids):
    return TokenSeq(tuple(ids), " ".join(str(i) for i in ids))


def make_vocab(n_words=8):
    return build_vocabulary([" ".join(f"t{i}" for i in range(n_words))])


def all_tenths_model(vocab, pooling):
    model = EnergyModel(vocab, embed_dim=2, hidden_dim=256, pooling=pooling)
    for name in model.PARAM_NAMES:
        model.params[name] = np.full_like(model.params[name], 0.1)
    return model


class TestEnergyForward:
    def test_zero_output_layer_gives_zero_energy(self):
        vocab = make_vocab()
        model = EnergyModel(vocab, embed_dim=4, hidden_dim=8, seed=3)
        model.params["w2"][:] = 0.0
        model.params["b2"][:] = 0.0
        for seq in [ts([5]), ts([6, 7]), ts([5, 5, 9, 8])]:
            assert model.energy(seq) == 0.0

    def test_mean_pooling_is_permutation_invariant(self):
        vocab = make_vocab()
        model = EnergyModel(vocab, embed_dim=4, hidden_dim=8, pooling="mean", seed=5)
        rng = np.random.default_rng(0)
        seq = [5, 6, 7, 8, 9]
        base = model.energy(ts(seq))
        for _ in range(5):
            perm = list(rng.permutation(seq))
            assert model.energy(ts(perm)) == pytest.approx(base, abs=1e-12)

    def test_conv_pooling_is_order_sensitive(self):
        vocab = make_vocab()
        model = EnergyModel(vocab, embed_dim=4, hidden_dim=8, pooling="conv", seed=5)
        assert model.energy(ts([5, 6, 7])) != pytest.approx(model.energy(ts([7, 6, 5])), abs=1e-9)

    def test_hand_computed_forward_mean(self):
        vocab = make_vocab()
        model = all_tenths_model(vocab, "mean")
        # pooled = [0.1, 0.1]; each hidden unit tanh(0.02 + 0.1);
        # energy = 256 * 0.1 * tanh(0.12) + 0.1
        want = 256 * 0.1 * math.tanh(0.1 * 0.1 * 2 + 0.1) + 0.1
        assert model.energy(ts([5])) == pytest.approx(want, abs=1e-12)

    def test_hand_computed_forward_conv(self):
        vocab = make_vocab()
        model = all_tenths_model(vocab, "conv")
        # single token: stencil neighbors are zero vectors, so pooled = tanh(0.1)
        pooled = math.tanh(0.1)
        want = 256 * 0.1 * math.tanh(0.1 * pooled * 2 + 0.1) + 0.1
        assert model.energy(ts([5])) == pytest.approx(want, abs=1e-12)

    def test_empty_sequence_rejected(self):
        model = EnergyModel(make_vocab(), embed_dim=4, hidden_dim=8)
        with pytest.raises(EmptyInput):
            model.energy(ts([]))

    def test_parameter_count_formula(self):
        vocab = make_vocab()
        model = EnergyModel(vocab, embed_dim=16, hidden_dim=256)
        V, d = vocab.size, 16
        assert model.param_count == V * d + (d * 256 + 256) + (256 * 1 + 1)

    def test_deterministic_pure_function(self):
        model = EnergyModel(make_vocab(), embed_dim=4, hidden_dim=8, seed=9)
        seq = ts([5, 8, 6])
        assert model.energy(seq) == model.energy(seq)
        batch = [ts([5, 8, 6]), ts([7])]
        assert np.array_equal(model.energies(batch), model.energies(batch))


class TestEnergyGrad:
    def _fd_objective(self, model, batch):
        total = sum(w * e for (_, w), e in zip(batch, model.energies([y for y, _ in batch])))
        if model.l2 > 0:
            total += 0.5 * model.l2 * (
                np.sum(model.params["w1"] ** 2) + np.sum(model.params["w2"] ** 2)
            )
        return float(total)

    @pytest.mark.parametrize("pooling,l2", [("conv", 0.0), ("conv", 0.01), ("mean", 0.0)])
    def test_matches_finite_differences(self, pooling, l2):
        vocab = make_vocab()
        model = EnergyModel(vocab, embed_dim=5, hidden_dim=7, pooling=pooling, l2=l2, seed=11)
        batch = [(ts([5, 6, 7]), 1.0), (ts([8, 9]), -1.0), (ts([6]), 0.5)]
        grads = energy_grad(model, batch)
        rng = np.random.default_rng(23)
        names = list(model.params)
        h = 1e-5
        checked = 0
        while checked < 20:
            name = names[rng.integers(len(names))]
            flat = model.params[name].ravel()
            idx = int(rng.integers(flat.size))
            orig = flat[idx]
            flat[idx] = orig + h
            hi = self._fd_objective(model, batch)
            flat[idx] = orig - h
            lo = self._fd_objective(model, batch)
            flat[idx] = orig
            numeric = (hi - lo) / (2 * h)
            analytic = grads[name].ravel()[idx]
            if abs(numeric) < 1e-9 and abs(analytic) < 1e-9:
                continue
            rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic))
            assert rel <= 1e-4, f"{name}[{idx}]"
            checked += 1

    def test_zero_weights_give_exactly_zero_gradient(self):
        model = EnergyModel(make_vocab(), embed_dim=4, hidden_dim=6, seed=2)
        grads = energy_grad(model, [(ts([5, 6]), 0.0), (ts([7]), 0.0)])
        for name, g in grads.items():
            assert np.all(g == 0.0), name

    def test_absent_token_embedding_grad_is_zero(self):
        model = EnergyModel(make_vocab(), embed_dim=4, hidden_dim=6, seed=2)
        grads = energy_grad(model, [(ts([5, 6]), 1.0)])
        assert np.all(grads["embed"][9] == 0.0)
        assert not np.all(grads["embed"][5] == 0.0)

    def test_frozen_embeddings(self):
        model = EnergyModel(make_vocab(), embed_dim=4, hidden_dim=6, freeze_embeddings=True)
        grads = energy_grad(model, [(ts([5, 6]), 1.0)])
        assert np.all(grads["embed"] == 0.0)
        assert not np.all(grads["w2"] == 0.0)


class TestResampling:
    def _uniform_model(self):
        vocab = make_vocab()
        model = EnergyModel(vocab, embed_dim=4, hidden_dim=8, seed=1)
        model.params["w2"][:] = 0.0
        model.params["b2"][:] = 0.0
        return model

    def _cands(self, n):
        return CandidateSet(ts([5]), tuple(Candidate(ts([5 + i % 4, 6]), -1.0) for i in range(n)))

    def test_hand_computed_two_point_law(self):
        T = 1000.0
        weights = renormalize_energies(np.array([0.0, T * math.log(3.0)]), T)
        assert abs(weights[0] - 0.75) < 1e-12
        assert abs(weights[1] - 0.25) < 1e-12

    def test_sums_to_one(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            e = rng.normal(scale=100.0, size=rng.integers(2, 30))
            assert abs(renormalize_energies(e, 1000.0).sum() - 1.0) < 1e-9

    def test_shift_invariance(self):
        rng = np.random.default_rng(7)
        e = rng.normal(scale=5.0, size=12)
        base = renormalize_energies(e, 17.0)
        for c in (-300.0, 1e-3, 250.0):
            assert np.max(np.abs(renormalize_energies(e + c, 17.0) - base)) < 1e-12

    def test_high_temperature_limit_is_uniform(self):
        e = np.array([0.0, 40.0, -35.0, 12.0])
        w = renormalize_energies(e, 1e12)
        assert np.max(np.abs(w - 0.25)) < 1e-9

    def test_equal_energies_draw_uniformly(self):
        model = self._uniform_model()
        cands = self._cands(4)
        counts = np.zeros(4)
        hyp_to_idx = {c.hypothesis.tokens: i for i, c in enumerate(cands.candidates)}
        rng = seed_rng(99)
        for _ in range(5000):
            y1, y2 = resample_pair(cands, model, ResampleConfig(temperature=1000.0), rng=rng)
            counts[hyp_to_idx[y1.tokens]] += 1
            counts[hyp_to_idx[y2.tokens]] += 1
        result = scipy.stats.chisquare(counts, np.full(4, counts.sum() / 4))
        assert result.pvalue > 0.01

    def test_insufficient_candidates(self):
        model = self._uniform_model()
        single = CandidateSet(ts([5]), (Candidate(ts([5]), 0.0),))
        with pytest.raises(InsufficientCandidates):
            resample_pair(single, model, ResampleConfig())

    def test_seed_determinism(self):
        model = EnergyModel(make_vocab(), embed_dim=4, hidden_dim=8, seed=21)
        cands = self._cands(6)
        cfg = ResampleConfig(temperature=50.0, seed=77)
        a = resample_pair(cands, model, cfg)
        b = resample_pair(cands, model, cfg)
        assert (a[0].tokens, a[1].tokens) == (b[0].tokens, b[1].tokens)

    def test_bad_temperature_rejected(self):
        with pytest.raises(InvalidConfig):
            ResampleConfig(temperature=0.0)


class TestEnergyCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        vocab = make_vocab()
        model = EnergyModel(vocab, embed_dim=6, hidden_dim=10, pooling="conv", l2=0.02, seed=4)
        path = tmp_path / "energy.ckpt"
        model.save(path, vocab_ref="v.json")
        loaded = EnergyModel.load(path, vocab)
        for name in model.PARAM_NAMES:
            assert np.array_equal(model.params[name], loaded.params[name])
        assert loaded.pooling == "conv" and loaded.l2 == 0.02
        seq = ts([5, 7, 6])
        assert model.energy(seq) == loaded.energy(seq)
