"""Contrastive fine-tuning: in-batch-negative loss, AdamW, adapter freezing.

Each training pair contributes an anchor (title, plus lead when present)
and a positive (body). The loss for anchor i is the softmax cross-entropy
over the temperature-scaled cosine similarities against every positive in
the batch, labeled with the diagonal. Batches are language-homogeneous so
one adapter bank is routed per step.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .corpus import TrainPair
from .encoder import EncoderModel, encode, pool
from .errors import ContractError, CorpusError
from .tokenizer import TokenBatch, Vocab, encode_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    temperature: float = 0.05
    learning_rate: float = 1e-3   # paper mode: 1e-5
    batch_size: int = 16          # paper mode: 512
    epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    freeze_adapters: bool = True
    seed: int = 0
    max_len: int = 64             # paper mode: 512

    def __post_init__(self):
        problems = []
        if self.temperature <= 0:
            problems.append(f"temperature must be > 0, got {self.temperature}")
        if self.batch_size < 2:
            problems.append(f"batch_size must be >= 2 (the loss needs an in-batch negative), got {self.batch_size}")
        if self.learning_rate <= 0:
            problems.append(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if problems:
            raise ContractError("; ".join(problems))

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature, "learning_rate": self.learning_rate,
            "batch_size": self.batch_size, "epochs": self.epochs,
            "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "weight_decay": self.weight_decay, "freeze_adapters": self.freeze_adapters,
            "seed": self.seed, "max_len": self.max_len,
        }


PAPER_MODE_OVERRIDES = {
    "learning_rate": 1e-5,
    "temperature": 0.05,
    "batch_size": 512,
    "max_len": 512,
    "epochs": 1,
}


@dataclass
class OptState:
    """AdamW moments per unfrozen parameter plus the freeze mask."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    frozen: frozenset[str]


def init_opt_state(model: EncoderModel, cfg: TrainConfig) -> OptState:
    frozen = frozenset(model.adapter_parameter_names()) if cfg.freeze_adapters else frozenset()
    m = {n: np.zeros_like(p.data) for n, p in model.params.items() if n not in frozen}
    v = {n: np.zeros_like(p.data) for n, p in model.params.items() if n not in frozen}
    model.set_requires_grad([n for n in model.params if n in frozen], False)
    return OptState(m=m, v=v, step=0, frozen=frozen)


@dataclass(frozen=True)
class EmbeddingBatch:
    """Paired sentence embeddings: row i of both sides came from one article."""

    anchors: Tensor
    positives: Tensor
    language: str = ""

    def __post_init__(self):
        if self.anchors.shape != self.positives.shape:
            raise ContractError(
                f"anchor/positive shapes differ: {self.anchors.shape} vs {self.positives.shape}")


def contrastive_loss(batch: EmbeddingBatch, temperature: float) -> Tensor:
    """Mean over anchors of -log softmax(cos(anchor_i, positives)/T)[i].

    The denominator runs over every positive in the batch, including the
    anchor's own (the label is the diagonal). N=1 degenerates to 0.
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    sims = ad.cosine_matrix(batch.anchors, batch.positives)
    logits = ad.scale(sims, 1.0 / temperature)
    return ad.mean(ad.sub(ad.logsumexp(logits, axis=1), ad.diagonal(logits)))


def adamw_step(params: dict[str, Tensor], state: OptState, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update; frozen parameters untouched."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        if name in state.frozen:
            continue
        if p.grad is None:
            raise ContractError(f"unfrozen parameter {name!r} has no gradient")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        # decoupled decay acts on the pre-update value, not sequentially
        p.data -= cfg.learning_rate * (update + cfg.weight_decay * p.data)
        p.zero_grad()


def train_step(model: EncoderModel, tokens_anchor: TokenBatch, tokens_positive: TokenBatch,
               language: str, cfg: TrainConfig, state: OptState) -> float:
    """Forward both sides with independent dropout, backprop, AdamW update.

    Returns the loss value before the update. All randomness derives from
    (cfg.seed, state.step), so a step is reproducible given fresh state.
    """
    if len(tokens_anchor) != len(tokens_positive):
        raise ContractError(
            f"anchor/positive batch sizes differ: {len(tokens_anchor)} vs {len(tokens_positive)}")
    rng = np.random.default_rng([cfg.seed, state.step])
    with Tape() as tape:
        h_a = pool(encode(model, tokens_anchor, language, training=True, rng=rng),
                   tokens_anchor.mask, model.config.pooling)
        h_p = pool(encode(model, tokens_positive, language, training=True, rng=rng),
                   tokens_positive.mask, model.config.pooling)
        loss = contrastive_loss(EmbeddingBatch(h_a, h_p, language), cfg.temperature)
    backward(loss, tape)
    # adapters of non-routed languages are outside the graph this step; give
    # them explicit zero gradients so the optimizer contract holds
    for name, p in model.params.items():
        if p.requires_grad and p.grad is None:
            p.grad = np.zeros_like(p.data)
    adamw_step(model.params, state, cfg)
    return loss.item()


@dataclass(frozen=True)
class HistoryEntry:
    step: int
    language: str
    loss: float


def save_history_csv(history: list[HistoryEntry], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,language,loss\n")
        for h in history:
            fh.write(f"{h.step},{h.language},{h.loss:.8f}\n")


def make_batches(pairs: list[TrainPair], cfg: TrainConfig,
                 rng: np.random.Generator) -> list[tuple[str, list[TrainPair]]]:
    """Shuffled language-homogeneous batches; trailing singletons are dropped
    (the loss is undefined without an in-batch negative)."""
    by_lang: dict[str, list[TrainPair]] = {}
    for p in pairs:
        by_lang.setdefault(p.language, []).append(p)
    batches = []
    for lang in sorted(by_lang):
        bucket = by_lang[lang]
        order = rng.permutation(len(bucket))
        for start in range(0, len(bucket), cfg.batch_size):
            chunk = [bucket[i] for i in order[start:start + cfg.batch_size]]
            if len(chunk) < 2:
                log.debug("dropping trailing singleton batch for %s", lang)
                continue
            batches.append((lang, chunk))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def train(model: EncoderModel, pairs: list[TrainPair], vocab: Vocab,
          cfg: TrainConfig) -> list[HistoryEntry]:
    """Run cfg.epochs passes over the pairs; returns the per-step loss history.

    The model is updated in place; pair order is reshuffled per epoch from
    the run seed.
    """
    if not pairs:
        raise CorpusError("training corpus is empty")
    unknown = {p.language for p in pairs} - set(model.config.languages)
    if unknown:
        raise CorpusError(f"pairs in languages outside the adapter bank: {sorted(unknown)}")

    state = init_opt_state(model, cfg)
    history: list[HistoryEntry] = []
    rng = np.random.default_rng([cfg.seed, 0xBA7C])
    for _ in range(cfg.epochs):
        for language, chunk in make_batches(pairs, cfg, rng):
            anchors = encode_batch([p.anchor_text for p in chunk], vocab, cfg.max_len)
            positives = encode_batch([p.positive_text for p in chunk], vocab, cfg.max_len)
            loss = train_step(model, anchors, positives, language, cfg, state)
            history.append(HistoryEntry(step=state.step, language=language, loss=loss))
            if state.step % 50 == 0:
                log.info("step %d (%s): loss %.4f", state.step, language, loss)
    return history
