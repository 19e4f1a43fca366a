import math

import numpy as np
import pytest

from polyembed import autodiff as ad
from polyembed import encoder as enc
from polyembed.autodiff import Tape, Tensor, backward, gradcheck
from polyembed.encoder import EncoderConfig, encode, init_model, pool
from polyembed.errors import ConfigError, DegenerateInputError, RoutingError
from polyembed.tokenizer import TokenBatch


def tiny_config(**kw):
    base = dict(vocab_size=20, hidden=8, layers=1, heads=2, ffn_dim=16,
                adapter_dim=4, languages=("aa", "bb"), max_positions=10, dropout=0.0)
    base.update(kw)
    return EncoderConfig(**base)


def token_batch(ids_rows):
    ids = np.array(ids_rows, dtype=np.int64)
    mask = (ids != 0).astype(np.int64)
    return TokenBatch(ids, mask)


class TestConfig:
    def test_invalid_configs_enumerate_problems(self):
        with pytest.raises(ConfigError, match="divisible"):
            tiny_config(hidden=9)
        with pytest.raises(ConfigError, match="unique"):
            tiny_config(languages=("aa", "aa"))
        with pytest.raises(ConfigError, match="pooling"):
            tiny_config(pooling="sum")
        with pytest.raises(ConfigError, match="adapter_dim"):
            tiny_config(adapter_dim=8)

    def test_round_trips_through_dict(self):
        cfg = tiny_config()
        assert EncoderConfig.from_dict(cfg.to_dict()) == cfg


class TestInit:
    def test_same_seed_bit_identical(self):
        a = init_model(tiny_config(), seed=3)
        b = init_model(tiny_config(), seed=3)
        assert a.parameter_names() == b.parameter_names()
        for n in a.params:
            np.testing.assert_array_equal(a.params[n].data, b.params[n].data)

    def test_fresh_adapters_language_agnostic(self):
        model = init_model(tiny_config(), seed=0)
        batch = token_batch([[2, 5, 6, 3, 0]])
        out_a = encode(model, batch, "aa").data
        out_b = encode(model, batch, "bb").data
        np.testing.assert_array_equal(out_a, out_b)

    def test_parameter_count_matches_closed_form(self):
        cfg = EncoderConfig(vocab_size=100, hidden=16, layers=2, heads=2,
                            ffn_dim=32, adapter_dim=8, languages=("x", "y"),
                            max_positions=64)
        model = init_model(cfg, seed=0)

        # independent count: embeddings + per-layer blocks + adapter banks
        v, d, dff, da, n_lang, n_layer, pos = 100, 16, 32, 8, 2, 2, 64
        emb = v * d + pos * d
        attn = 4 * (d * d + d)
        ffn = d * dff + dff + dff * d + d
        norms = 2 * (2 * d)
        adapters = n_lang * (2 * d + d * da + da + da * d + d)
        expected = emb + n_layer * (attn + ffn + norms + adapters)

        assert model.num_parameters() == expected
        assert sum(p.data.size for p in model.params.values()) == expected

    def test_adapter_bank_per_layer_language_pair(self):
        cfg = tiny_config()
        model = init_model(cfg, seed=0)
        banks = {n.rsplit(".", 2)[0] + "." + n.split(".")[2]
                 for n in model.adapter_parameter_names()}
        assert len(banks) == cfg.layers * len(cfg.languages)


class TestEncode:
    def test_shapes_and_unknown_language(self):
        model = init_model(tiny_config(), seed=1)
        batch = token_batch([[2, 4, 3, 0, 0], [2, 5, 6, 7, 3]])
        out = encode(model, batch, "aa")
        assert out.shape == (2, 5, 8)
        with pytest.raises(RoutingError):
            encode(model, batch, "zz")

    def test_deterministic_without_dropout(self):
        model = init_model(tiny_config(), seed=1)
        batch = token_batch([[2, 4, 5, 3]])
        np.testing.assert_array_equal(encode(model, batch, "aa").data,
                                      encode(model, batch, "aa").data)

    def test_perturbing_other_language_adapter_is_invisible(self):
        model = init_model(tiny_config(), seed=2)
        batch = token_batch([[2, 4, 5, 3, 0]])
        before = encode(model, batch, "aa").data.copy()
        for n in model.adapter_parameter_names():
            if ".adapter.bb." in n:
                model.params[n].data += 0.37
        np.testing.assert_array_equal(encode(model, batch, "aa").data, before)
        assert np.any(encode(model, batch, "bb").data != before)

    def test_matches_independent_numpy_forward(self):
        """Zero-init adapters: encode must equal an adapter-free reference stack."""
        cfg = tiny_config()
        model = init_model(cfg, seed=5, dtype=np.float64)
        ids = np.array([[2, 6, 7, 8, 3, 0, 0], [2, 9, 3, 0, 0, 0, 0]])
        mask = (ids != 0).astype(np.int64)
        got = encode(model, TokenBatch(ids, mask), "aa").data

        p = {k: t.data for k, t in model.params.items()}
        d, h = cfg.hidden, cfg.heads
        dh = d // h

        def np_gelu(x):
            c = math.sqrt(2 / math.pi)
            return 0.5 * x * (1 + np.tanh(c * (x + 0.044715 * x ** 3)))

        def np_ln(x, g, b, eps=1e-5):
            mu = x.mean(-1, keepdims=True)
            var = ((x - mu) ** 2).mean(-1, keepdims=True)
            return g * (x - mu) / np.sqrt(var + eps) + b

        x = p["tok_emb"][ids] + p["pos_emb"][: ids.shape[1]]
        add_mask = (mask[:, None, None, :] - 1) * 1e9
        for i in range(cfg.layers):
            pre = f"layer{i}"
            n, length, _ = x.shape
            q = (x @ p[f"{pre}.attn.q_w"] + p[f"{pre}.attn.q_b"]).reshape(n, length, h, dh).transpose(0, 2, 1, 3)
            k = (x @ p[f"{pre}.attn.k_w"] + p[f"{pre}.attn.k_b"]).reshape(n, length, h, dh).transpose(0, 2, 1, 3)
            v = (x @ p[f"{pre}.attn.v_w"] + p[f"{pre}.attn.v_b"]).reshape(n, length, h, dh).transpose(0, 2, 1, 3)
            s = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh) + add_mask
            s = s - s.max(-1, keepdims=True)
            w = np.exp(s) / np.exp(s).sum(-1, keepdims=True)
            ctx = (w @ v).transpose(0, 2, 1, 3).reshape(n, length, d)
            attn_out = ctx @ p[f"{pre}.attn.o_w"] + p[f"{pre}.attn.o_b"]
            x = np_ln(x + attn_out, p[f"{pre}.ln1_g"], p[f"{pre}.ln1_b"])
            ffn = np_gelu(x @ p[f"{pre}.ffn.w1"] + p[f"{pre}.ffn.b1"]) @ p[f"{pre}.ffn.w2"] + p[f"{pre}.ffn.b2"]
            x = np_ln(x + ffn, p[f"{pre}.ln2_g"], p[f"{pre}.ln2_b"])
            # adapter bank is a residual no-op at init: skip it entirely
        np.testing.assert_allclose(got, x, atol=1e-10)

    def test_pad_invariance(self):
        model = init_model(tiny_config(), seed=7)
        short = token_batch([[2, 4, 5, 3]])
        long = token_batch([[2, 4, 5, 3, 0, 0, 0]])
        emb_short = pool(encode(model, short, "aa"), short.mask, "mean").data
        emb_long = pool(encode(model, long, "aa"), long.mask, "mean").data
        np.testing.assert_allclose(emb_short, emb_long, atol=1e-6)
        max_short = pool(encode(model, short, "aa"), short.mask, "max").data
        max_long = pool(encode(model, long, "aa"), long.mask, "max").data
        np.testing.assert_allclose(max_short, max_long, atol=1e-6)

    def test_length_over_max_positions_rejected(self):
        model = init_model(tiny_config(max_positions=4), seed=0)
        with pytest.raises(ConfigError):
            encode(model, token_batch([[2, 4, 5, 6, 3]]), "aa")


class TestPool:
    def test_hand_mean_and_max(self):
        hidden = Tensor(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
        mask = np.array([[1, 1]])
        np.testing.assert_allclose(pool(hidden, mask, "mean").data, [[0.5, 0.5]])
        np.testing.assert_allclose(pool(hidden, mask, "max").data, [[1.0, 1.0]])

    def test_single_token_mean_equals_cls(self):
        hidden = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)))
        mask = np.array([[1, 0, 0], [1, 0, 0]])
        np.testing.assert_allclose(pool(hidden, mask, "mean").data,
                                   pool(hidden, mask, "cls").data)

    def test_mask_excludes_pad_positions(self):
        rng = np.random.default_rng(1)
        base = rng.normal(size=(1, 2, 3))
        padded = np.concatenate([base, rng.normal(size=(1, 2, 3))], axis=1)
        m_base = np.array([[1, 1]])
        m_padded = np.array([[1, 1, 0, 0]])
        for strategy in ("mean", "max"):
            np.testing.assert_allclose(pool(Tensor(base), m_base, strategy).data,
                                       pool(Tensor(padded), m_padded, strategy).data)

    def test_fully_masked_row_is_error(self):
        with pytest.raises(DegenerateInputError):
            pool(Tensor(np.ones((1, 2, 3))), np.array([[0, 0]]), "mean")

    def test_cls_takes_position_zero(self):
        hidden = Tensor(np.arange(24, dtype=np.float64).reshape(2, 3, 4))
        out = pool(hidden, np.ones((2, 3), dtype=int), "cls")
        np.testing.assert_array_equal(out.data, hidden.data[:, 0, :])


class TestGradients:
    def test_full_tiny_encoder_gradcheck(self):
        cfg = tiny_config()
        model = init_model(cfg, seed=11, dtype=np.float64)
        batch = token_batch([[2, 6, 7, 3], [2, 8, 3, 0]])
        target = Tensor(np.random.default_rng(0).normal(size=(2, cfg.hidden)))

        def f():
            emb = pool(encode(model, batch, "aa"), batch.mask, "mean")
            return ad.sum_(ad.mul(emb, target))

        err = gradcheck(f, list(model.params.values()), h=1e-5)
        assert err < 1e-4

    def test_other_language_adapters_get_zero_gradient(self):
        cfg = tiny_config()
        model = init_model(cfg, seed=12, dtype=np.float64)
        batch = token_batch([[2, 5, 6, 3]])
        with Tape() as tape:
            emb = pool(encode(model, batch, "aa"), batch.mask, "mean")
            loss = ad.sum_(emb)
        backward(loss, tape)
        for n in model.adapter_parameter_names():
            if ".adapter.bb." in n:
                assert model.params[n].grad is None
