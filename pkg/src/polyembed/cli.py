"""Command-line entry points tying the pipeline together.

Commands: synth-data, train, embed, eval-retrieval, eval-classify,
eval-all. Every command honors --seed and --config; two runs with equal
flags and inputs produce byte-identical artifacts.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig
from .corpus import (CorpusStats, load_articles, make_pairs, remove_overlap,
                     save_articles, synth_corpus)
from .encoder import init_model
from .errors import (CheckpointError, ConfigError, ContractError, CorpusError,
                     DegenerateInputError, DimensionError, PolyembedError,
                     RoutingError)
from .evaluate import ModelEmbedder, run_eval_suite
from .tokenizer import Vocab, build_vocab
from .trainer import save_history_csv, train

log = logging.getLogger(__name__)

ERROR_CATEGORIES = {
    ConfigError: "config",
    CorpusError: "corpus",
    CheckpointError: "checkpoint",
    RoutingError: "routing",
    ContractError: "contract",
    DimensionError: "dimension",
    DegenerateInputError: "degenerate-input",
}


def _add_shared_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; CLI flags override it")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--languages", type=lambda s: tuple(s.split(",")), default=None,
                   help="comma-separated language codes")
    p.add_argument("--paper-mode", action="store_const", const=True, default=None,
                   help="preset: lr=1e-5, temperature=0.05, batch=512, max_len=512")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    for name, typ in [("hidden", int), ("layers", int), ("heads", int),
                      ("ffn-dim", int), ("adapter-dim", int), ("max-positions", int),
                      ("dropout", float), ("max-vocab", int)]:
        p.add_argument(f"--{name}", type=typ, default=None)
    p.add_argument("--pooling", choices=("mean", "cls", "max"), default=None)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    for name, typ in [("batch-size", int), ("epochs", int), ("temperature", float),
                      ("weight-decay", float), ("max-len", int)]:
        p.add_argument(f"--{name}", type=typ, default=None)
    p.add_argument("--freeze-adapters", action=argparse.BooleanOptionalAction,
                   default=None)


def _resolve(args: argparse.Namespace) -> RunConfig:
    skip = {"config", "command", "func", "corpus", "checkpoint", "out", "out_dir",
            "vocab", "exclude", "history", "field", "split_seed", "topics",
            "docs_per_topic", "eval_docs_per_topic", "verbose"}
    overrides = {k: v for k, v in vars(args).items() if k not in skip and v is not None}
    return RunConfig.resolve(overrides, args.config)


def _load_corpus(path: str) -> list:
    """A corpus path is one JSONL file or a directory of *.jsonl files."""
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.jsonl"))
        if not files:
            raise CorpusError(f"no *.jsonl files in directory {p}")
        articles = []
        for f in files:
            articles.extend(load_articles(f))
        return articles
    return list(load_articles(p))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth_data(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    out_dir = Path(args.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CorpusError(f"output path {out_dir} is not writable: {exc}") from exc

    languages = tuple(cfg.languages)
    train_articles = synth_corpus(args.topics, args.docs_per_topic, languages,
                                  seed=cfg.seed, id_prefix="doc")
    eval_articles = synth_corpus(args.topics, args.eval_docs_per_topic, languages,
                                 seed=cfg.seed + 1, id_prefix="ev")
    for lang in languages:
        save_articles([a for a in train_articles if a.language == lang],
                      out_dir / f"train_{lang}.jsonl")
        save_articles([a for a in eval_articles if a.language == lang],
                      out_dir / f"eval_{lang}.jsonl")

    stats = CorpusStats.from_articles(train_articles)
    (out_dir / "stats.txt").write_text(stats.to_table(), encoding="utf-8")

    # vocabulary over everything generated, so held-out docs stay in-vocab
    all_text = (t for a in train_articles + eval_articles
                for t in (a.title, a.lead or "", a.body, a.summary or ""))
    build_vocab(all_text, cfg.max_vocab).save(out_dir / "vocab.txt")

    print(f"wrote {len(train_articles)} train and {len(eval_articles)} eval articles "
          f"({len(languages)} languages) to {out_dir}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    articles = _load_corpus(args.corpus)
    if args.exclude:
        eval_ids = {a.id for a in _load_corpus(args.exclude)}
        articles, removed = remove_overlap(articles, eval_ids)
        print(f"removed {removed} articles overlapping the evaluation corpus")

    pairs, skipped = make_pairs(articles)
    if skipped:
        print(f"skipped {skipped} articles with empty titles")

    if args.vocab:
        vocab = Vocab.load(args.vocab)
    else:
        vocab = build_vocab((t for a in articles
                             for t in (a.title, a.lead or "", a.body, a.summary or "")),
                            cfg.max_vocab)

    model = init_model(cfg.encoder_config(vocab.size), seed=cfg.seed)
    history = train(model, pairs, vocab, cfg.train_config())

    ckpt_dir = Path(args.checkpoint)
    ckpt.save_checkpoint(model, vocab, ckpt_dir, seeds=[cfg.seed],
                         train_config=cfg.train_config().to_dict())
    history_path = Path(args.history) if args.history else ckpt_dir / "history.csv"
    save_history_csv(history, history_path)

    final = history[-1].loss if history else float("nan")
    print(f"trained {len(history)} steps on {len(pairs)} pairs; final loss {final:.4f}")
    print(f"checkpoint: {ckpt_dir}  loss history: {history_path}")
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    _resolve(args)
    model, vocab, _ = ckpt.load_checkpoint(args.checkpoint)
    articles = _load_corpus(args.corpus)
    embedder = ModelEmbedder(model, vocab)

    by_lang: dict[str, list[int]] = {}
    for i, a in enumerate(articles):
        by_lang.setdefault(a.language, []).append(i)
    vectors = np.zeros((len(articles), model.config.hidden), dtype=np.float32)
    for lang, rows in by_lang.items():
        vectors[rows] = embedder([articles[i] for i in rows], args.field)

    with open(args.out, "w", encoding="utf-8") as fh:
        for a, vec in zip(articles, vectors):
            floats = " ".join(np.format_float_positional(x, unique=True, trim="0")
                              for x in vec)
            fh.write(f"{a.id}\t{a.language}\t{floats}\n")
    print(f"wrote {len(articles)} embeddings to {args.out}")
    return 0


def _cmd_eval(args: argparse.Namespace, tasks: tuple[str, ...]) -> int:
    cfg = _resolve(args)
    model, vocab, _ = ckpt.load_checkpoint(args.checkpoint)
    articles = _load_corpus(args.corpus)
    embedder = ModelEmbedder(model, vocab)
    split_seed = args.split_seed if args.split_seed is not None else cfg.seed
    report = run_eval_suite(embedder, articles, split_seed=split_seed, tasks=tasks)
    sys.stdout.write(report.to_text())
    if args.out:
        Path(args.out).write_text(report.to_json(), encoding="utf-8")
        print(f"report: {args.out}")
    return 0


def cmd_eval_retrieval(args):
    return _cmd_eval(args, ("retrieval",))


def cmd_eval_classify(args):
    return _cmd_eval(args, ("classification",))


def cmd_eval_all(args):
    return _cmd_eval(args, ("retrieval", "classification"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polyembed",
        description="Train and evaluate multilingual sentence embeddings.")
    parser.add_argument("--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic parallel corpus")
    _add_shared_flags(p)
    _add_model_flags(p)
    p.add_argument("--out-dir", default="data")
    p.add_argument("--topics", type=int, default=5)
    p.add_argument("--docs-per-topic", type=int, default=40)
    p.add_argument("--eval-docs-per-topic", type=int, default=10)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="contrastive fine-tuning on title/body pairs")
    _add_shared_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--corpus", required=True, help="JSONL file or directory")
    p.add_argument("--exclude", help="corpus whose article ids are removed from training")
    p.add_argument("--vocab", help="prebuilt vocabulary file (default: build from corpus)")
    p.add_argument("--checkpoint", default="ckpt", help="output checkpoint directory")
    p.add_argument("--history", help="loss CSV path (default: <checkpoint>/history.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="write one embedding per document")
    _add_shared_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--field", choices=("body", "summary", "title"), default="body")
    p.set_defaults(func=cmd_embed)

    for name, func in [("eval-retrieval", cmd_eval_retrieval),
                       ("eval-classify", cmd_eval_classify),
                       ("eval-all", cmd_eval_all)]:
        p = sub.add_parser(name, help=f"run the {name.split('-', 1)[1]} evaluation")
        _add_shared_flags(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--corpus", required=True, help="parallel evaluation corpus")
        p.add_argument("--out", help="write the report as JSON here")
        p.add_argument("--split-seed", type=int, default=None)
        p.set_defaults(func=func)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PolyembedError as exc:
        category = ERROR_CATEGORIES.get(type(exc), "error")
        print(f"error: {category}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
