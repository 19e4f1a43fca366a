"""Transformer encoder with per-language bottleneck adapters.

Post-layer-norm stack. After each layer's FFN residual, the adapter bank
of the batch's language is applied: layer norm, down-projection, GELU,
up-projection, residual. Up-projections start at zero, so a fresh
adapter is an exact no-op and all languages share the same function
until the adapters are trained.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DegenerateInputError, RoutingError
from .tokenizer import TokenBatch, Vocab, encode_batch

INIT_STD = 0.02
ATTN_MASK_VALUE = -1e9

POOLING_STRATEGIES = ("mean", "cls", "max")


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden: int = 64
    layers: int = 2
    heads: int = 2
    ffn_dim: int = 128
    adapter_dim: int = 16
    languages: tuple[str, ...] = ("de", "fr", "it", "rm")
    max_positions: int = 64
    dropout: float = 0.1
    pooling: str = "mean"

    def __post_init__(self):
        problems = []
        if self.vocab_size < 5:
            problems.append(f"vocab_size must be >= 5, got {self.vocab_size}")
        if self.hidden % self.heads != 0:
            problems.append(f"hidden ({self.hidden}) not divisible by heads ({self.heads})")
        if not 0 < self.adapter_dim < self.hidden:
            problems.append(f"adapter_dim must be in (0, hidden), got {self.adapter_dim}")
        if not self.languages:
            problems.append("languages must be nonempty")
        if len(set(self.languages)) != len(self.languages):
            problems.append(f"languages must be unique, got {self.languages}")
        if self.pooling not in POOLING_STRATEGIES:
            problems.append(f"pooling must be one of {POOLING_STRATEGIES}, got {self.pooling!r}")
        if not 0.0 <= self.dropout < 1.0:
            problems.append(f"dropout must be in [0, 1), got {self.dropout}")
        if self.max_positions < 2:
            problems.append(f"max_positions must be >= 2, got {self.max_positions}")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "hidden": self.hidden,
            "layers": self.layers, "heads": self.heads, "ffn_dim": self.ffn_dim,
            "adapter_dim": self.adapter_dim, "languages": list(self.languages),
            "max_positions": self.max_positions, "dropout": self.dropout,
            "pooling": self.pooling,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["languages"] = tuple(d["languages"])
        return cls(**d)


@dataclass
class EncoderModel:
    """Parameter store plus forward pass. Mutated only by the optimizer."""

    config: EncoderConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    dtype: np.dtype = np.float32

    def parameter_names(self) -> list[str]:
        return list(self.params)

    def adapter_parameter_names(self) -> list[str]:
        return [n for n in self.params if ".adapter." in n]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def set_requires_grad(self, names: list[str], flag: bool) -> None:
        for n in names:
            self.params[n].requires_grad = flag


def _param_shapes(config: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Deterministic (name, shape) layout; the checkpoint order follows it."""
    c = config
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (c.vocab_size, c.hidden)),
        ("pos_emb", (c.max_positions, c.hidden)),
    ]
    for i in range(c.layers):
        p = f"layer{i}"
        for proj in ("q", "k", "v", "o"):
            shapes.append((f"{p}.attn.{proj}_w", (c.hidden, c.hidden)))
            shapes.append((f"{p}.attn.{proj}_b", (c.hidden,)))
        shapes.append((f"{p}.ln1_g", (c.hidden,)))
        shapes.append((f"{p}.ln1_b", (c.hidden,)))
        shapes.append((f"{p}.ffn.w1", (c.hidden, c.ffn_dim)))
        shapes.append((f"{p}.ffn.b1", (c.ffn_dim,)))
        shapes.append((f"{p}.ffn.w2", (c.ffn_dim, c.hidden)))
        shapes.append((f"{p}.ffn.b2", (c.hidden,)))
        shapes.append((f"{p}.ln2_g", (c.hidden,)))
        shapes.append((f"{p}.ln2_b", (c.hidden,)))
        for lang in c.languages:
            a = f"{p}.adapter.{lang}"
            shapes.append((f"{a}.ln_g", (c.hidden,)))
            shapes.append((f"{a}.ln_b", (c.hidden,)))
            shapes.append((f"{a}.down_w", (c.hidden, c.adapter_dim)))
            shapes.append((f"{a}.down_b", (c.adapter_dim,)))
            shapes.append((f"{a}.up_w", (c.adapter_dim, c.hidden)))
            shapes.append((f"{a}.up_b", (c.hidden,)))
    return shapes


def init_model(config: EncoderConfig, seed: int, dtype=np.float32) -> EncoderModel:
    """Scaled-normal init (std 0.02); layer norms at identity; adapter
    up-projections at zero so every fresh adapter is a residual no-op."""
    rng = np.random.default_rng(seed)
    model = EncoderModel(config=config, dtype=np.dtype(dtype))
    for name, shape in _param_shapes(config):
        base = name.rsplit(".", 1)[-1]
        if base.endswith("ln_g") or base in ("ln1_g", "ln2_g"):
            data = np.ones(shape)
        elif base.endswith("_b") or base in ("ln1_b", "ln2_b"):
            data = np.zeros(shape)
        elif base == "up_w":
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape)
        model.params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return model


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def _attention(model: EncoderModel, x: Tensor, attn_mask: Tensor, prefix: str,
               training: bool, rng) -> Tensor:
    c = model.config
    p = model.params
    n, length, d = x.shape
    dh = d // c.heads

    def split_heads(t: Tensor) -> Tensor:
        t = ad.reshape(t, (n, length, c.heads, dh))
        return ad.transpose(t, (0, 2, 1, 3))

    q = split_heads(_linear(x, p[f"{prefix}.q_w"], p[f"{prefix}.q_b"]))
    k = split_heads(_linear(x, p[f"{prefix}.k_w"], p[f"{prefix}.k_b"]))
    v = split_heads(_linear(x, p[f"{prefix}.v_w"], p[f"{prefix}.v_b"]))

    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dh))
    scores = ad.add(scores, attn_mask)
    weights = ad.softmax(scores, axis=-1)
    weights = ad.dropout(weights, c.dropout, training, rng)

    ctx = ad.matmul(weights, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n, length, d))
    return _linear(ctx, p[f"{prefix}.o_w"], p[f"{prefix}.o_b"])


def _adapter(model: EncoderModel, x: Tensor, language: str, prefix: str,
             training: bool, rng) -> Tensor:
    p = model.params
    a = f"{prefix}.adapter.{language}"
    h = ad.layer_norm(x, p[f"{a}.ln_g"], p[f"{a}.ln_b"])
    h = ad.gelu(_linear(h, p[f"{a}.down_w"], p[f"{a}.down_b"]))
    h = _linear(h, p[f"{a}.up_w"], p[f"{a}.up_b"])
    h = ad.dropout(h, model.config.dropout, training, rng)
    return ad.add(x, h)


def encode(model: EncoderModel, tokens: TokenBatch, language: str,
           training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Hidden states [N x L x d] with the given language's adapters routed in.

    Padded positions receive a large negative additive attention score, so
    they are never attended to; their own hidden states must be excluded
    downstream via the mask (see pool).
    """
    c = model.config
    if language not in c.languages:
        raise RoutingError(f"language {language!r} not in adapter bank {c.languages}")
    n, length = tokens.ids.shape
    if length > c.max_positions:
        raise ConfigError(f"sequence length {length} exceeds max_positions {c.max_positions}")

    p = model.params
    x = ad.embedding_lookup(p["tok_emb"], tokens.ids)
    pos = ad.embedding_lookup(p["pos_emb"], np.arange(length))
    x = ad.add(x, pos)
    x = ad.dropout(x, c.dropout, training, rng)

    # additive mask over keys: 0 where real, -1e9 where padding
    attn_mask = Tensor(((tokens.mask[:, None, None, :] - 1) * -ATTN_MASK_VALUE)
                       .astype(model.dtype))

    for i in range(c.layers):
        prefix = f"layer{i}"
        attn = _attention(model, x, attn_mask, f"{prefix}.attn", training, rng)
        attn = ad.dropout(attn, c.dropout, training, rng)
        x = ad.layer_norm(ad.add(x, attn), p[f"{prefix}.ln1_g"], p[f"{prefix}.ln1_b"])

        ffn = _linear(ad.gelu(_linear(x, p[f"{prefix}.ffn.w1"], p[f"{prefix}.ffn.b1"])),
                      p[f"{prefix}.ffn.w2"], p[f"{prefix}.ffn.b2"])
        ffn = ad.dropout(ffn, c.dropout, training, rng)
        x = ad.layer_norm(ad.add(x, ffn), p[f"{prefix}.ln2_g"], p[f"{prefix}.ln2_b"])

        x = _adapter(model, x, language, prefix, training, rng)
    return x


def pool(hidden: Tensor, mask: np.ndarray, strategy: str) -> Tensor:
    """Collapse [N x L x d] to sentence embeddings [N x d].

    mean: average over unmasked positions; cls: position 0; max:
    elementwise max over unmasked positions.
    """
    if strategy not in POOLING_STRATEGIES:
        raise ConfigError(f"unknown pooling strategy {strategy!r}")
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise DegenerateInputError("pool: fully masked row has no tokens to pool")

    if strategy == "cls":
        n, _, d = hidden.shape
        sliced = ad.embedding_lookup(ad.reshape(hidden, (hidden.shape[0] * hidden.shape[1], d)),
                                     np.arange(n) * hidden.shape[1])
        return sliced

    m = Tensor(mask[:, :, None].astype(hidden.dtype))
    if strategy == "mean":
        total = ad.sum_(ad.mul(hidden, m), axis=1)
        return ad.mul(total, Tensor((1.0 / counts)[:, None].astype(hidden.dtype)))

    # max: push masked positions to -inf-like floor before the reduction
    neg = Tensor(((mask[:, :, None] - 1) * 1e30).astype(hidden.dtype))
    return ad.amax(ad.add(ad.mul(hidden, m), neg), axis=1)


def embed_texts(model: EncoderModel, vocab: Vocab, texts: list[str], language: str,
                max_len: int | None = None, batch_size: int = 64) -> np.ndarray:
    """Pooled sentence embeddings [n x d] for raw texts, without grad tracking."""
    max_len = max_len or model.config.max_positions
    out = []
    for start in range(0, len(texts), batch_size):
        batch = encode_batch(texts[start:start + batch_size], vocab, max_len)
        hidden = encode(model, batch, language)
        out.append(pool(hidden, batch.mask, model.config.pooling).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.hidden))
