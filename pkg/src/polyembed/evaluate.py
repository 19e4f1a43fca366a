"""Evaluation harness: document retrieval and 1-NN topic classification.

Retrieval matches each summary embedding to the body embedding with the
highest cosine similarity (gold match = same index). Classification
assigns each test document the topic of its nearest training document by
cosine, scored with support-weighted F1. Both run over a grid of language
pairs on a parallel corpus; ties always break toward the lowest index so
reports are reproducible.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .corpus import Article
from .encoder import EncoderModel, embed_texts
from .errors import ContractError, CorpusError, DegenerateInputError
from .tokenizer import Vocab


def _normalize_rows(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"{what}: expected a 2-D embedding matrix, got shape {x.shape}")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError(f"{what}: zero-norm embedding row")
    return x / norms


@dataclass(frozen=True)
class RetrievalTask:
    """Index-aligned summary and body embeddings (gold match = same row)."""

    summaries: np.ndarray
    bodies: np.ndarray

    def __post_init__(self):
        if len(self.summaries) != len(self.bodies):
            raise ContractError(
                f"summary/body counts differ: {len(self.summaries)} vs {len(self.bodies)}")


@dataclass(frozen=True)
class RetrievalResult:
    matches: np.ndarray
    accuracy: float


def retrieve(task: RetrievalTask) -> RetrievalResult:
    """Argmax-cosine match for every summary; accuracy = self-match rate."""
    s = _normalize_rows(task.summaries, "retrieve summaries")
    b = _normalize_rows(task.bodies, "retrieve bodies")
    sims = s @ b.T
    matches = sims.argmax(axis=1)  # first maximum: lowest-index tie-break
    accuracy = float((matches == np.arange(len(matches))).mean())
    return RetrievalResult(matches=matches, accuracy=accuracy)


@dataclass(frozen=True)
class ClassificationTask:
    train_embeddings: np.ndarray
    train_labels: tuple[str, ...]
    test_embeddings: np.ndarray
    test_labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.train_embeddings) != len(self.train_labels):
            raise ContractError("train embedding/label counts differ")
        if len(self.test_embeddings) != len(self.test_labels):
            raise ContractError("test embedding/label counts differ")
        if len(self.train_labels) == 0:
            raise ContractError("classification needs at least one training example")


def knn_classify(task: ClassificationTask, k: int = 1) -> list[str]:
    """Labels of the k nearest training rows by cosine; majority vote for
    k > 1 with ties broken by the nearest member."""
    if k < 1 or k > len(task.train_labels):
        raise ContractError(f"k must be in [1, {len(task.train_labels)}], got {k}")
    train = _normalize_rows(task.train_embeddings, "knn train")
    test = _normalize_rows(task.test_embeddings, "knn test")
    sims = test @ train.T
    preds: list[str] = []
    for row in sims:
        order = np.argsort(-row, kind="stable")[:k]
        if k == 1:
            preds.append(task.train_labels[order[0]])
            continue
        votes = Counter(task.train_labels[i] for i in order)
        top = max(votes.values())
        tied = {lab for lab, n in votes.items() if n == top}
        winner = next(task.train_labels[i] for i in order if task.train_labels[i] in tied)
        preds.append(winner)
    return preds


@dataclass(frozen=True)
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int


def weighted_f1(pred: Sequence[str], gold: Sequence[str],
                classes: Sequence[str] | None = None) -> tuple[float, dict[str, ClassScores]]:
    """Support-weighted mean of per-class F1; undefined ratios count as 0."""
    if len(pred) == 0 or len(gold) == 0:
        raise ContractError("weighted_f1 needs nonempty label sequences")
    if len(pred) != len(gold):
        raise ContractError(f"label counts differ: {len(pred)} vs {len(gold)}")
    if classes is None:
        classes = sorted(set(gold) | set(pred))
    per_class: dict[str, ClassScores] = {}
    total = len(gold)
    score = 0.0
    for c in classes:
        tp = sum(1 for p, g in zip(pred, gold) if p == c and g == c)
        fp = sum(1 for p, g in zip(pred, gold) if p == c and g != c)
        fn = sum(1 for p, g in zip(pred, gold) if p != c and g == c)
        support = tp + fn
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / support if support else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[c] = ClassScores(precision, recall, f1, support)
        score += support / total * f1
    return score, per_class


# ---------------------------------------------------------------------------
# full evaluation suite over a parallel corpus
# ---------------------------------------------------------------------------

class Embedder(Protocol):
    """Maps a language-homogeneous article list to an [n x d] matrix."""

    def __call__(self, articles: list[Article], text_field: str) -> np.ndarray: ...


@dataclass
class ModelEmbedder:
    model: EncoderModel
    vocab: Vocab
    max_len: int | None = None

    def __call__(self, articles: list[Article], text_field: str) -> np.ndarray:
        languages = {a.language for a in articles}
        if len(languages) != 1:
            raise ContractError(f"embedder expects one language per call, got {sorted(languages)}")
        texts = [getattr(a, text_field) or "" for a in articles]
        return embed_texts(self.model, self.vocab, texts, languages.pop(),
                           max_len=self.max_len)


@dataclass
class EvalReport:
    """Retrieval accuracy grid plus per-language classification scores."""

    languages: tuple[str, ...]
    pivot_language: str
    n_documents: int
    split_seed: int
    retrieval: dict[str, dict[str, float]] = field(default_factory=dict)
    classification: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "languages": list(self.languages),
            "pivot_language": self.pivot_language,
            "n_documents": self.n_documents,
            "split_seed": self.split_seed,
            "retrieval": self.retrieval,
            "classification": self.classification,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = []
        if self.retrieval:
            lines.append("Document retrieval (accuracy, summary language x article language)")
            width = max(7, max(len(l) for l in self.languages) + 2)
            header = " " * width + "".join(l.rjust(width) for l in self.languages)
            lines.append(header)
            for ls in self.languages:
                row = ls.ljust(width)
                row += "".join(f"{self.retrieval[ls][lb] * 100:.2f}".rjust(width)
                               for lb in self.languages)
                lines.append(row)
            lines.append("")
        if self.classification:
            lines.append(f"Text classification (weighted F1, train language = {self.pivot_language})")
            width = max(7, max(len(l) for l in self.languages) + 2)
            lines.append(" " * width + "".join(l.rjust(width) for l in self.languages))
            row = self.pivot_language.ljust(width)
            row += "".join(f"{self.classification[l]['weighted_f1'] * 100:.2f}".rjust(width)
                           for l in self.languages)
            lines.append(row)
            lines.append("")
        return "\n".join(lines)


def articles_by_language(articles: Sequence[Article]) -> dict[str, dict[str, Article]]:
    by_lang: dict[str, dict[str, Article]] = {}
    for a in articles:
        by_lang.setdefault(a.language, {})[a.id] = a
    return by_lang


def _check_parallel(by_lang: dict[str, dict[str, Article]]) -> list[str]:
    all_ids = set()
    for d in by_lang.values():
        all_ids |= set(d)
    missing_msgs = []
    for lang, d in sorted(by_lang.items()):
        absent = sorted(all_ids - set(d))
        if absent:
            missing_msgs.append(f"{lang}: missing {absent[:10]}"
                                + (" ..." if len(absent) > 10 else ""))
    if missing_msgs:
        raise CorpusError("eval corpus is not parallel; " + "; ".join(missing_msgs))
    return sorted(all_ids)


def stratified_split(ids: Sequence[str], labels: dict[str, str], seed: int,
                     test_fraction: float = 0.2) -> tuple[list[str], list[str]]:
    """Per-class shuffled split, performed once and shared across languages."""
    by_label: dict[str, list[str]] = {}
    for i in ids:
        by_label.setdefault(labels[i], []).append(i)
    rng = np.random.default_rng([seed, 0x5B11])
    train_ids: list[str] = []
    test_ids: list[str] = []
    for label in sorted(by_label):
        group = sorted(by_label[label])
        order = rng.permutation(len(group))
        n_test = max(1, round(len(group) * test_fraction))
        test_ids += [group[i] for i in order[:n_test]]
        train_ids += [group[i] for i in order[n_test:]]
    return sorted(train_ids), sorted(test_ids)


TASKS = ("retrieval", "classification")


def run_eval_suite(embedder: Embedder, articles: Sequence[Article], split_seed: int,
                   pivot_language: str | None = None,
                   tasks: Sequence[str] = TASKS) -> EvalReport:
    """Run the selected tasks over every language pair of a parallel corpus.

    Retrieval fills the full |languages|^2 grid; classification trains on
    the pivot language's bodies and tests each language on a stratified
    80/20 split shared across languages through the parallel ids.
    """
    unknown_tasks = set(tasks) - set(TASKS)
    if unknown_tasks or not tasks:
        raise ContractError(f"tasks must be a nonempty subset of {TASKS}, got {tasks}")
    by_lang = articles_by_language(articles)
    if not by_lang:
        raise CorpusError("evaluation corpus is empty")
    ids = _check_parallel(by_lang)
    languages = tuple(sorted(by_lang))
    pivot = pivot_language or languages[0]
    if pivot not in by_lang:
        raise CorpusError(f"pivot language {pivot!r} not present in the corpus")

    ordered = {lang: [by_lang[lang][i] for i in ids] for lang in languages}
    for lang in languages:
        for a in ordered[lang]:
            if "retrieval" in tasks and not a.summary:
                raise CorpusError(f"article {a.id} ({lang}) lacks a summary")
            if "classification" in tasks and not a.topics:
                raise CorpusError(f"article {a.id} ({lang}) lacks topic tags")

    body_emb = {lang: embedder(ordered[lang], "body") for lang in languages}

    report = EvalReport(languages=languages, pivot_language=pivot,
                        n_documents=len(ids), split_seed=split_seed)
    if "retrieval" in tasks:
        summary_emb = {lang: embedder(ordered[lang], "summary") for lang in languages}
        for ls in languages:
            report.retrieval[ls] = {}
            for lb in languages:
                task = RetrievalTask(summaries=summary_emb[ls], bodies=body_emb[lb])
                report.retrieval[ls][lb] = retrieve(task).accuracy

    if "classification" not in tasks:
        return report

    labels = {i: by_lang[pivot][i].topics[0] for i in ids}
    train_ids, test_ids = stratified_split(ids, labels, split_seed)
    id_pos = {doc_id: row for row, doc_id in enumerate(ids)}
    train_rows = [id_pos[i] for i in train_ids]
    test_rows = [id_pos[i] for i in test_ids]
    train_x = body_emb[pivot][train_rows]
    train_y = tuple(labels[i] for i in train_ids)
    gold = tuple(labels[i] for i in test_ids)
    for lang in languages:
        task = ClassificationTask(train_embeddings=train_x, train_labels=train_y,
                                  test_embeddings=body_emb[lang][test_rows],
                                  test_labels=gold)
        pred = knn_classify(task, k=1)
        score, per_class = weighted_f1(pred, gold)
        report.classification[lang] = {
            "weighted_f1": score,
            "per_class": {c: {"precision": s.precision, "recall": s.recall,
                              "f1": s.f1, "support": s.support}
                          for c, s in per_class.items()},
        }
    return report
