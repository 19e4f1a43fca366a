import math

import numpy as np
import pytest

from polyembed import autodiff as ad
from polyembed import trainer as tr
from polyembed.autodiff import Tape, Tensor, backward, gradcheck
from polyembed.corpus import TrainPair, make_pairs, synth_corpus
from polyembed.encoder import EncoderConfig, encode, init_model, pool
from polyembed.errors import ContractError, CorpusError, DegenerateInputError
from polyembed.tokenizer import build_vocab, encode_batch
from polyembed.trainer import (EmbeddingBatch, OptState, TrainConfig, adamw_step,
                               contrastive_loss, init_opt_state, make_batches,
                               train, train_step)


def loop_loss(anchors: np.ndarray, positives: np.ndarray, tau: float) -> float:
    """Literal per-anchor loop over the contrastive objective (the oracle)."""
    def cos(a, b):
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    n = len(anchors)
    total = 0.0
    for i in range(n):
        denom = sum(math.exp(cos(anchors[i], positives[j]) / tau) for j in range(n))
        num = math.exp(cos(anchors[i], positives[i]) / tau)
        total += -math.log(num / denom)
    return total / n


def batch_from(anchors, positives, language="aa"):
    return EmbeddingBatch(Tensor(np.asarray(anchors, dtype=np.float64)),
                          Tensor(np.asarray(positives, dtype=np.float64)), language)


class TestContrastiveLoss:
    def test_single_pair_degenerates_to_zero(self):
        b = batch_from([[1.0, 2.0]], [[2.0, 1.0]])
        assert contrastive_loss(b, 0.05).item() == pytest.approx(0.0, abs=1e-12)

    def test_hand_value_identity_cosines(self):
        # cosine matrix is the 2x2 identity; per-row loss -log(e/(e+1))
        b = batch_from([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]])
        want = -math.log(math.e / (math.e + 1.0))
        assert contrastive_loss(b, 1.0).item() == pytest.approx(want, abs=1e-6)
        assert want == pytest.approx(0.31326, abs=1e-5)

    def test_matches_loop_oracle_on_random_batches(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            n = int(rng.integers(2, 9))
            d = int(rng.integers(4, 17))
            anchors = rng.normal(size=(n, d))
            positives = rng.normal(size=(n, d))
            tau = float(rng.uniform(0.05, 1.0))
            got = contrastive_loss(batch_from(anchors, positives), tau).item()
            assert got == pytest.approx(loop_loss(anchors, positives, tau), abs=1e-6)

    def test_nonnegative(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            b = batch_from(rng.normal(size=(4, 6)), rng.normal(size=(4, 6)))
            assert contrastive_loss(b, 0.05).item() >= 0.0

    def test_joint_permutation_invariance(self):
        rng = np.random.default_rng(8)
        anchors = rng.normal(size=(5, 8))
        positives = rng.normal(size=(5, 8))
        base = contrastive_loss(batch_from(anchors, positives), 0.1).item()
        perm = rng.permutation(5)
        permuted = contrastive_loss(batch_from(anchors[perm], positives[perm]), 0.1).item()
        assert permuted == pytest.approx(base, abs=1e-6)

    def test_positive_row_scaling_invariance(self):
        rng = np.random.default_rng(9)
        anchors = rng.normal(size=(4, 5))
        positives = rng.normal(size=(4, 5))
        base = contrastive_loss(batch_from(anchors, positives), 0.05).item()
        anchors2 = anchors.copy()
        anchors2[2] *= 37.5
        positives2 = positives.copy()
        positives2[0] *= 0.004
        scaled = contrastive_loss(batch_from(anchors2, positives2), 0.05).item()
        assert scaled == pytest.approx(base, abs=1e-6)

    def test_diagonal_dominance_closed_form(self):
        # orthonormal rows: cos matrix == identity
        for n, tau in [(2, 0.05), (4, 0.05), (4, 1.0), (8, 0.5)]:
            eye = np.eye(max(n, 2))[:n]
            loss = contrastive_loss(batch_from(eye, eye), tau).item()
            want = math.log(1.0 + (n - 1) * math.exp(-1.0 / tau))
            assert loss == pytest.approx(want, abs=1e-6)

    def test_zero_norm_row_is_error(self):
        a = np.ones((2, 3))
        p = np.ones((2, 3))
        p[1] = 0.0
        with pytest.raises(DegenerateInputError):
            contrastive_loss(batch_from(a, p), 0.05)

    def test_large_exponents_stable_at_paper_temperature(self):
        # cosines of +-1 against tau=0.05 produce exponents of +-20
        b = batch_from([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, -1.0]])
        loss = contrastive_loss(b, 0.05).item()
        assert math.isfinite(loss)


class TestAdamW:
    def _one_param(self, value, grad):
        p = Tensor(np.array([value]), requires_grad=True)
        p.grad = np.array([grad])
        return {"w": p}

    def _state(self):
        return OptState(m={"w": np.zeros(1)}, v={"w": np.zeros(1)}, step=0, frozen=frozenset())

    def test_hand_computed_single_step(self):
        cfg = TrainConfig(learning_rate=0.1, weight_decay=0.01)
        params = self._one_param(1.0, 1.0)
        adamw_step(params, self._state(), cfg)
        assert params["w"].data[0] == pytest.approx(0.8990, abs=5e-5)

    def test_zero_grad_zero_decay_is_null_update(self):
        cfg = TrainConfig(learning_rate=0.1, weight_decay=0.0)
        params = self._one_param(3.0, 0.0)
        adamw_step(params, self._state(), cfg)
        assert params["w"].data[0] == 3.0

    def test_frozen_parameter_untouched(self):
        cfg = TrainConfig(learning_rate=0.1)
        p = Tensor(np.array([2.0]), requires_grad=False)
        p.grad = np.array([5.0])  # even a stray gradient must be ignored
        state = OptState(m={}, v={}, step=0, frozen=frozenset({"w"}))
        adamw_step({"w": p}, state, cfg)
        assert p.data[0] == 2.0

    def test_missing_gradient_is_contract_error(self):
        cfg = TrainConfig()
        p = Tensor(np.array([1.0]), requires_grad=True)
        state = OptState(m={"w": np.zeros(1)}, v={"w": np.zeros(1)}, step=0, frozen=frozenset())
        with pytest.raises(ContractError, match="no gradient"):
            adamw_step({"w": p}, state, cfg)

    def test_step_counter_increments_by_one(self):
        cfg = TrainConfig()
        state = self._state()
        for t in range(1, 4):
            params = self._one_param(1.0, 0.5)
            state.m = {"w": state.m["w"]}
            adamw_step(params, state, cfg)
            assert state.step == t

    def test_bias_correction_matches_reference_sequence(self):
        # three steps against an independently coded AdamW recurrence
        cfg = TrainConfig(learning_rate=0.01, weight_decay=0.02)
        p = Tensor(np.array([0.7]), requires_grad=True)
        params = {"w": p}
        state = self._state()
        grads = [0.3, -0.2, 0.11]

        theta, m, v = 0.7, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            p.grad = np.array([g])
            adamw_step(params, state, cfg)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat = m / (1 - 0.9 ** t)
            vhat = v / (1 - 0.999 ** t)
            theta = theta - 0.01 * mhat / (math.sqrt(vhat) + 1e-8) - 0.01 * 0.02 * theta
            assert p.data[0] == pytest.approx(theta, rel=1e-12)


def tiny_model(dropout=0.0, dtype=np.float64, languages=("aa", "bb")):
    cfg = EncoderConfig(vocab_size=30, hidden=8, layers=1, heads=2, ffn_dim=16,
                        adapter_dim=4, languages=languages, max_positions=12,
                        dropout=dropout)
    return init_model(cfg, seed=21, dtype=dtype)


def tiny_batches(vocab_size=30, n=3, length=6, seed=0):
    rng = np.random.default_rng(seed)
    from polyembed.tokenizer import TokenBatch
    def one():
        ids = np.full((n, length), 0, dtype=np.int64)
        for row in range(n):
            content = rng.integers(4, vocab_size, size=length - 2)
            ids[row, 0] = 2
            ids[row, 1:length - 1] = content
            ids[row, length - 1] = 3
        return TokenBatch(ids, (ids != 0).astype(np.int64))
    return one(), one()


class TestTrainStep:
    def test_identical_steps_from_fresh_state_match(self):
        cfg = TrainConfig(seed=5, batch_size=2)
        anchors, positives = tiny_batches()
        losses = []
        for _ in range(2):
            model = tiny_model(dropout=0.1)
            state = init_opt_state(model, cfg)
            losses.append(train_step(model, anchors, positives, "aa", cfg, state))
        assert losses[0] == losses[1]

    def test_pipeline_gradient_matches_finite_differences(self):
        model = tiny_model(dropout=0.0)
        cfg = TrainConfig(seed=1)
        state = init_opt_state(model, cfg)  # freezes adapters
        anchors, positives = tiny_batches()

        def f():
            h_a = pool(encode(model, anchors, "aa"), anchors.mask, "mean")
            h_p = pool(encode(model, positives, "aa"), positives.mask, "mean")
            return contrastive_loss(EmbeddingBatch(h_a, h_p, "aa"), cfg.temperature)

        err = gradcheck(f, list(model.params.values()))
        assert err < 1e-4

    def test_mismatched_batch_sizes_rejected(self):
        model = tiny_model()
        cfg = TrainConfig()
        state = init_opt_state(model, cfg)
        anchors, _ = tiny_batches(n=3)
        _, positives = tiny_batches(n=2)
        with pytest.raises(ContractError):
            train_step(model, anchors, positives, "aa", cfg, state)

    def test_loss_halves_on_separable_synthetic_task(self):
        articles = [a for a in synth_corpus(3, 12, ("aa",), seed=3)]
        pairs, _ = make_pairs(articles)
        vocab = build_vocab([p.anchor_text + " " + p.positive_text for p in pairs], 512)
        cfg = EncoderConfig(vocab_size=vocab.size, hidden=32, layers=1, heads=2,
                            ffn_dim=64, adapter_dim=8, languages=("aa",),
                            max_positions=48, dropout=0.1)
        model = init_model(cfg, seed=4, dtype=np.float32)
        tcfg = TrainConfig(seed=6, batch_size=9, epochs=50, max_len=48)
        history = train(model, pairs, vocab, tcfg)
        assert history[-1].step == 200
        assert history[-1].loss < 0.5 * history[0].loss


class TestTrain:
    def make_pairs_two_langs(self, n=10):
        pairs = []
        for lang in ("aa", "bb"):
            for i in range(n):
                pairs.append(TrainPair(f"title {i} {lang}", f"body text {i} {lang}", lang))
        return pairs

    def test_epochs_zero_is_noop(self):
        model = tiny_model()
        before = {n: p.data.copy() for n, p in model.params.items()}
        pairs = self.make_pairs_two_langs()
        vocab = build_vocab([p.positive_text for p in pairs], 64)
        history = train(model, pairs, vocab, TrainConfig(epochs=0, batch_size=4))
        assert history == []
        for n, p in model.params.items():
            np.testing.assert_array_equal(p.data, before[n])

    def test_empty_corpus_is_error(self):
        model = tiny_model()
        vocab = build_vocab(["x"], 64)
        with pytest.raises(CorpusError):
            train(model, [], vocab, TrainConfig())

    def test_unknown_language_is_error(self):
        model = tiny_model()
        vocab = build_vocab(["x"], 64)
        with pytest.raises(CorpusError, match="zz"):
            train(model, [TrainPair("t", "b", "zz")] * 4, vocab, TrainConfig())

    def test_batches_language_homogeneous_and_cover_pairs(self):
        pairs = self.make_pairs_two_langs(n=11)
        cfg = TrainConfig(batch_size=4, seed=13)
        batches = make_batches(pairs, cfg, np.random.default_rng(0))
        seen = []
        for lang, chunk in batches:
            assert 2 <= len(chunk) <= 4
            assert all(p.language == lang for p in chunk)
            seen += chunk
        # 11 per language -> two batches of 4 and one of 3, nothing dropped
        assert sorted(p.anchor_text for p in seen) == sorted(p.anchor_text for p in pairs)

    def test_trailing_singleton_dropped(self):
        pairs = [TrainPair(f"t{i}", f"b{i}", "aa") for i in range(5)]
        batches = make_batches(pairs, TrainConfig(batch_size=2), np.random.default_rng(1))
        assert [len(c) for _, c in batches] == [2, 2]

    def test_freeze_invariant_and_shuffled_histories_differ(self):
        pairs = self.make_pairs_two_langs()
        vocab = build_vocab([p.anchor_text + " " + p.positive_text for p in pairs], 128)
        histories = []
        for seed in (1, 2):
            model = tiny_model(dtype=np.float32)
            adapters_before = {n: model.params[n].data.copy()
                               for n in model.adapter_parameter_names()}
            cfg = TrainConfig(seed=seed, batch_size=4, epochs=2, max_len=12,
                              freeze_adapters=True)
            histories.append([h.loss for h in train(model, pairs, vocab, cfg)])
            for n, before in adapters_before.items():
                np.testing.assert_array_equal(model.params[n].data, before)
        assert histories[0] != histories[1]

    def test_unfrozen_adapters_do_move(self):
        pairs = self.make_pairs_two_langs()
        vocab = build_vocab([p.anchor_text + " " + p.positive_text for p in pairs], 128)
        model = tiny_model(dtype=np.float32)
        cfg = TrainConfig(seed=1, batch_size=4, epochs=2, max_len=12, freeze_adapters=False)
        before = {n: model.params[n].data.copy() for n in model.adapter_parameter_names()}
        train(model, pairs, vocab, cfg)
        moved = any(np.any(model.params[n].data != before[n]) for n in before)
        assert moved


class TestConfigValidation:
    def test_batch_size_one_rejected(self):
        with pytest.raises(ContractError):
            TrainConfig(batch_size=1)

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ContractError):
            TrainConfig(temperature=0.0)

    def test_paper_mode_values(self):
        assert tr.PAPER_MODE_OVERRIDES == {
            "learning_rate": 1e-5, "temperature": 0.05, "batch_size": 512,
            "max_len": 512, "epochs": 1,
        }
