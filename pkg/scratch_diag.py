"""Diagnose what training amplifies and where eval similarity fails."""
import numpy as np

from polyembed.corpus import make_pairs, synth_corpus
from polyembed.encoder import EncoderConfig, init_model
from polyembed.evaluate import ModelEmbedder, RetrievalTask, retrieve
from polyembed.tokenizer import build_vocab
from polyembed.trainer import TrainConfig, train

LANGS = ("de", "fr", "it", "rm")
train_articles = synth_corpus(5, 40, LANGS, seed=100, id_prefix="doc")
eval_articles = synth_corpus(5, 10, LANGS, seed=101, id_prefix="ev")
vocab = build_vocab((t for a in train_articles + eval_articles
                     for t in (a.title, a.lead or "", a.body, a.summary or "")), 4096)

cfg = EncoderConfig(vocab_size=vocab.size, hidden=64, layers=2, heads=2, ffn_dim=128,
                    adapter_dim=16, languages=LANGS, max_positions=64, dropout=0.1)
model = init_model(cfg, seed=7)
init_emb = model.params["tok_emb"].data.copy()

pairs, _ = make_pairs(train_articles)
history = train(model, pairs, vocab, TrainConfig(seed=7, batch_size=16, epochs=9, max_len=64))
print(f"final loss {history[-1].loss:.5f}")

emb = model.params["tok_emb"].data


def norm_stats(prefix_check):
    rows = [i for i in range(4, vocab.size) if prefix_check(vocab.token_of(i))]
    before = np.linalg.norm(init_emb[rows], axis=1)
    after = np.linalg.norm(emb[rows], axis=1)
    return len(rows), before.mean(), after.mean()


for name, check in [("entity", lambda t: t.startswith("e")),
                    ("topic", lambda t: t.startswith("t") and not t.startswith("tw")),
                    ("filler", lambda t: t.startswith("f"))]:
    n, b, a = norm_stats(check)
    print(f"{name:8s} n={n:4d} norm {b:.3f} -> {a:.3f}  ({a/b:.2f}x)")

embedder = ModelEmbedder(model, vocab, max_len=64)
by_id = {}
for a in eval_articles:
    by_id.setdefault(a.language, {})[a.id] = a
ids = sorted(by_id["de"])
de_docs = [by_id["de"][i] for i in ids]

s = embedder(de_docs, "summary")
b = embedder(de_docs, "body")
res = retrieve(RetrievalTask(summaries=s, bodies=b))
print(f"\neval de-de with summaries: {res.accuracy:.3f}")

t = embedder(de_docs, "title")  # anchor-style query (no lead concat here)
res_t = retrieve(RetrievalTask(summaries=t, bodies=b))
print(f"eval de-de with titles as queries: {res_t.accuracy:.3f}")

# train-doc retrieval: how well does it retrieve what it trained on?
train_de = [a for a in train_articles if a.language == "de"][:50]
ts = embedder(train_de, "summary")
tb = embedder(train_de, "body")
print(f"train de-de with summaries (50 docs): "
      f"{retrieve(RetrievalTask(summaries=ts, bodies=tb)).accuracy:.3f}")

# margin structure for eval failures
sn = s / np.linalg.norm(s, axis=1, keepdims=True)
bn = b / np.linalg.norm(b, axis=1, keepdims=True)
sims = sn @ bn.T
correct = np.diag(sims)
best_other = np.where(np.eye(50, dtype=bool), -2, sims).max(axis=1)
print(f"\ncorrect sim mean {correct.mean():.3f}, best-other mean {best_other.mean():.3f}")
print(f"margin mean {(correct - best_other).mean():.3f}, "
      f"negative margins: {(correct < best_other).sum()}/50")
