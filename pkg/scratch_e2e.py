"""Scratch experiment for the end-to-end acceptance thresholds."""
import time

import numpy as np

from polyembed.corpus import make_pairs, synth_corpus
from polyembed.encoder import EncoderConfig, init_model
from polyembed.evaluate import ModelEmbedder, run_eval_suite
from polyembed.tokenizer import build_vocab
from polyembed.trainer import TrainConfig, train

t0 = time.time()
LANGS = ("de", "fr", "it", "rm")
train_articles = synth_corpus(5, 40, LANGS, seed=100, id_prefix="doc")
eval_articles = synth_corpus(5, 10, LANGS, seed=101, id_prefix="ev")

vocab = build_vocab((t for a in train_articles + eval_articles
                     for t in (a.title, a.lead or "", a.body, a.summary or "")), 4096)
print(f"vocab size: {vocab.size}")

cfg = EncoderConfig(vocab_size=vocab.size, hidden=64, layers=2, heads=2, ffn_dim=128,
                    adapter_dim=16, languages=LANGS, max_positions=64, dropout=0.1)
model = init_model(cfg, seed=7)
embedder = ModelEmbedder(model, vocab, max_len=64)

untrained = run_eval_suite(embedder, eval_articles, split_seed=1, tasks=("retrieval",))
print("untrained grid:")
print(untrained.to_text())
print(f"[{time.time()-t0:.1f}s] untrained eval done")

pairs, _ = make_pairs(train_articles)
print(f"{len(pairs)} pairs")
tcfg = TrainConfig(seed=7, batch_size=16, epochs=9, max_len=64, learning_rate=1e-3)
t1 = time.time()
history = train(model, pairs, vocab, tcfg)
t_train = time.time() - t1
print(f"steps: {history[-1].step}, train time {t_train:.1f}s")
print(f"initial loss {history[0].loss:.4f}, final loss {history[-1].loss:.4f}")

trained = run_eval_suite(embedder, eval_articles, split_seed=1)
print("trained grid:")
print(trained.to_text())

mono_t = [trained.retrieval[l][l] for l in LANGS]
mono_u = [untrained.retrieval[l][l] for l in LANGS]
cross_t = [trained.retrieval[a][b] for a in LANGS for b in LANGS if a != b]
cross_u = [untrained.retrieval[a][b] for a in LANGS for b in LANGS if a != b]
print(f"mono trained min {min(mono_t):.3f} avg {np.mean(mono_t):.3f}; untrained avg {np.mean(mono_u):.3f}")
print(f"crit4 acc>=0.80: {min(mono_t) >= 0.80}; gain>=30pp: "
      f"{all(t >= u + 0.30 for t, u in zip(mono_t, mono_u))}")
print(f"loss halved: {history[-1].loss < 0.5 * history[0].loss}")
print(f"cross avg {np.mean(cross_t):.3f} (>=0.5: {np.mean(cross_t) >= 0.5}); "
      f"every cell >= untrained: {all(t >= u for t, u in zip(cross_t, cross_u))}")
print(f"classification F1: { {l: round(trained.classification[l]['weighted_f1'], 3) for l in LANGS} }")
print(f"total {time.time()-t0:.1f}s")
