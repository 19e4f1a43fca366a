"""Article ingestion, training-pair construction, synthetic parallel corpora.

Articles arrive as JSONL. Each article yields one training pair: the
anchor is the title (plus the lead, space-joined, when present) and the
positive is the body. The synthetic generator produces topic-structured
documents translated into toy languages by a deterministic bijective word
mapping, giving aligned parallel corpora for controlled cross-lingual
evaluation.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .errors import CorpusError
from .tokenizer import normalize

log = logging.getLogger(__name__)

REQUIRED_FIELDS = ("id", "language", "title", "body")
OPTIONAL_FIELDS = ("lead", "summary", "topics")


@dataclass(frozen=True)
class Article:
    id: str
    language: str
    title: str
    body: str
    lead: str | None = None
    summary: str | None = None
    topics: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.id:
            raise CorpusError("article id must be nonempty")
        if not self.body:
            raise CorpusError(f"article {self.id!r}: body must be nonempty")

    def to_dict(self) -> dict:
        d = {"id": self.id, "language": self.language, "title": self.title,
             "body": self.body}
        if self.lead is not None:
            d["lead"] = self.lead
        if self.summary is not None:
            d["summary"] = self.summary
        if self.topics is not None:
            d["topics"] = list(self.topics)
        return d


def _article_from_dict(raw: dict) -> Article:
    missing = [k for k in REQUIRED_FIELDS if k not in raw]
    if missing:
        raise CorpusError(f"missing required fields: {missing}")
    unknown = set(raw) - set(REQUIRED_FIELDS) - set(OPTIONAL_FIELDS)
    if unknown:
        raise CorpusError(f"unknown fields: {sorted(unknown)}")
    for k in REQUIRED_FIELDS + ("lead", "summary"):
        if k in raw and raw[k] is not None and not isinstance(raw[k], str):
            raise CorpusError(f"field {k!r} must be a string")
    topics = raw.get("topics")
    if topics is not None:
        if not isinstance(topics, list) or not all(isinstance(t, str) for t in topics):
            raise CorpusError("field 'topics' must be a list of strings")
        topics = tuple(topics)
    return Article(id=raw["id"], language=raw["language"], title=raw["title"],
                   body=raw["body"], lead=raw.get("lead"),
                   summary=raw.get("summary"), topics=topics)


def load_articles(path) -> Iterator[Article]:
    """Stream validated articles from a JSONL file.

    Malformed records are logged with their line number and skipped;
    an unreadable file raises.
    """
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read corpus file {path}: {exc}") from exc
    with fh:
        seen: set[str] = set()
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                if not isinstance(raw, dict):
                    raise CorpusError("line is not a JSON object")
                article = _article_from_dict(raw)
                key = f"{article.id}/{article.language}"
                if key in seen:
                    raise CorpusError(f"duplicate article id {article.id!r} for {article.language}")
                seen.add(key)
            except (json.JSONDecodeError, CorpusError) as exc:
                log.warning("%s:%d: rejected record: %s", path, lineno, exc)
                continue
            yield article


def save_articles(articles: Iterable[Article], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a in articles:
            fh.write(json.dumps(a.to_dict(), sort_keys=True) + "\n")


@dataclass(frozen=True)
class TrainPair:
    anchor_text: str
    positive_text: str
    language: str


def make_pairs(articles: Iterable[Article]) -> tuple[list[TrainPair], int]:
    """One (title[+lead], body) pair per article.

    Articles with an empty title are skipped and counted; the returned
    count satisfies len(pairs) + skipped == number of input articles.
    """
    pairs: list[TrainPair] = []
    skipped = 0
    for a in articles:
        if not a.title.strip():
            log.warning("article %s: empty title, skipped", a.id)
            skipped += 1
            continue
        anchor = a.title if not a.lead else a.title + " " + a.lead
        pairs.append(TrainPair(anchor_text=anchor, positive_text=a.body,
                               language=a.language))
    return pairs, skipped


def remove_overlap(articles: Iterable[Article], eval_ids: set[str]) -> tuple[list[Article], int]:
    """Drop every article whose id is in the evaluation set."""
    kept = []
    removed = 0
    for a in articles:
        if a.id in eval_ids:
            removed += 1
        else:
            kept.append(a)
    if removed:
        log.info("removed %d articles overlapping the evaluation set", removed)
    return kept, removed


@dataclass
class CorpusStats:
    """Per-language document and token counts (Table-style layout)."""

    documents: dict[str, int] = field(default_factory=dict)
    tokens: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_articles(cls, articles: Iterable[Article]) -> "CorpusStats":
        stats = cls()
        for a in articles:
            n = sum(len(normalize(t)) for t in (a.title, a.lead or "", a.body, a.summary or ""))
            stats.documents[a.language] = stats.documents.get(a.language, 0) + 1
            stats.tokens[a.language] = stats.tokens.get(a.language, 0) + n
        return stats

    @property
    def total_documents(self) -> int:
        return sum(self.documents.values())

    @property
    def total_tokens(self) -> int:
        return sum(self.tokens.values())

    def to_table(self) -> str:
        rows = [("Language", "Documents", "Tokens")]
        for lang in sorted(self.documents):
            rows.append((lang, str(self.documents[lang]), str(self.tokens[lang])))
        rows.append(("Total", str(self.total_documents), str(self.total_tokens)))
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = []
        for i, r in enumerate(rows):
            lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
            if i == 0 or i == len(rows) - 2:
                lines.append("-" * (sum(widths) + 4))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# synthetic parallel corpus
# ---------------------------------------------------------------------------
# Pivot-space word pools. Pivot words always end in a digit; the per-language
# mapping appends the (alphabetic) language code, except for entity words,
# which stay invariant across languages like untranslated proper nouns. The
# mapping is therefore a decodable bijection per language. Entities are drawn
# from a pool large enough that a document's entity set nearly identifies it,
# which is what lets retrieval distinguish same-topic documents (and, because
# entities do not translate, what carries the cross-lingual signal).

TOPIC_WORDS_PER_TOPIC = 30
ENTITY_POOL_SIZE = 500
ENTITIES_PER_DOC = 3
FILLER_POOL_SIZE = 40


def _topic_word(topic: int, j: int) -> str:
    return f"t{topic}w{j}"


def _entity_word(j: int) -> str:
    return f"e{j}"


def _filler_word(j: int) -> str:
    return f"f{j}"


def map_word(word: str, language: str) -> str:
    """Translate one pivot word into the given language."""
    if word.startswith("e"):
        return word
    return word + language


def decode_word(word: str, language: str) -> str:
    """Invert map_word for the given language."""
    if word.endswith(language) and not word.startswith("e"):
        return word[: -len(language)]
    return word


def map_text(text: str, language: str) -> str:
    return " ".join(map_word(w, language) for w in text.split())


def decode_text(text: str, language: str) -> str:
    return " ".join(decode_word(w, language) for w in text.split())


@dataclass(frozen=True)
class _PivotDoc:
    index: int
    topic: int
    title: str
    lead: str | None
    body: str
    summary: str


class _EntityBag:
    """Deals entities from a reshuffled pool so draws exhaust it evenly.

    A corpus of >= pool/ENTITIES_PER_DOC documents is guaranteed to mention
    every entity, which keeps a separately generated corpus (same pool)
    inside the trained vocabulary's entity coverage.
    """

    def __init__(self, rng: np.random.Generator):
        self._rng = rng
        self._bag: list[int] = []

    def deal(self, n: int) -> list[str]:
        if len(self._bag) < n:
            self._bag = list(self._rng.permutation(ENTITY_POOL_SIZE)) + self._bag
        dealt, self._bag = self._bag[:n], self._bag[n:]
        return [_entity_word(j) for j in dealt]


def _sample_pivot_doc(index: int, topic: int, entities: list[str],
                      rng: np.random.Generator) -> _PivotDoc:
    """One document: identity lives in its entity set.

    Topic words are drawn independently per field, so topical overlap ties a
    summary to its topic but not to one document; fillers are shared noise.
    A random-init encoder therefore scores near topic-level chance, while the
    entities give a trained encoder an exact document signature.
    """

    def topical(n: int) -> list[str]:
        return [_topic_word(topic, j)
                for j in rng.choice(TOPIC_WORDS_PER_TOPIC, size=n, replace=False)]

    def fillers(n: int) -> list[str]:
        return [_filler_word(j) for j in rng.integers(0, FILLER_POOL_SIZE, size=n)]

    t = topical(2)
    title = [t[0], entities[0], t[1]]
    lead = None
    if rng.random() < 0.9:
        lead = topical(1) + [entities[1], entities[2]] + fillers(2)

    body = topical(8) + entities * 2 + fillers(12)
    body = [body[i] for i in rng.permutation(len(body))]

    summary = list(entities) + topical(3) + fillers(6)
    summary = [summary[i] for i in rng.permutation(len(summary))]

    return _PivotDoc(index=index, topic=topic,
                     title=" ".join(title),
                     lead=" ".join(lead) if lead else None,
                     body=" ".join(body),
                     summary=" ".join(summary))


def synth_corpus(n_topics: int, docs_per_topic: int, languages: tuple[str, ...],
                 seed: int, id_prefix: str = "doc") -> list[Article]:
    """Deterministic parallel corpus: docs_per_topic documents per topic,
    each emitted once per language with a shared id and aligned word
    positions."""
    if n_topics < 2:
        raise CorpusError(f"n_topics must be >= 2, got {n_topics}")
    if not languages:
        raise CorpusError("need at least one language")
    for lang in languages:
        if not (lang.isalpha() and lang.islower()):
            raise CorpusError(f"language code must be lowercase alphabetic, got {lang!r}")
    if not (id_prefix.isalnum() and id_prefix.islower()):
        raise CorpusError(f"id_prefix must be lowercase alphanumeric, got {id_prefix!r}")

    rng = np.random.default_rng(seed)
    entity_bag = _EntityBag(rng)
    articles: list[Article] = []
    index = 0
    for topic in range(n_topics):
        for _ in range(docs_per_topic):
            doc = _sample_pivot_doc(index, topic, entity_bag.deal(ENTITIES_PER_DOC), rng)
            for lang in languages:
                articles.append(Article(
                    id=f"{id_prefix}-{doc.index:04d}",
                    language=lang,
                    title=map_text(doc.title, lang),
                    lead=map_text(doc.lead, lang) if doc.lead else None,
                    body=map_text(doc.body, lang),
                    summary=map_text(doc.summary, lang),
                    topics=(f"topic{doc.topic}",),
                ))
            index += 1
    return articles
