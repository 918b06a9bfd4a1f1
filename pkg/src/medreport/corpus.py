"""Report corpora: tokenization, vocabularies, tf-idf tags, splits, statistics."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .autodiff import DomainError

PAD, START, END, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<start>", "<end>", "<unk>")

_SENTENCE_SPLIT = re.compile(r"[.?!]")
_SEPARATORS = re.compile(r"[\s,;:()\[\]{}\"]+")
_ALPHA = re.compile(r"^[a-z]+$")


def tokenize(text: str) -> list[list[str]]:
    """Lowercase, split into sentences on ``.?!``, keep purely alphabetic tokens.

    Whitespace and list punctuation (commas, colons, brackets, quotes) separate
    tokens; anything else inside a token, such as the hyphen in "x-ray" or a
    digit, disqualifies it.
    """
    sentences = []
    for chunk in _SENTENCE_SPLIT.split(text.lower()):
        tokens = [tok for tok in _SEPARATORS.split(chunk) if _ALPHA.match(tok)]
        if tokens:
            sentences.append(tokens)
    return sentences


@dataclass
class Document:
    id: str
    sentences: list[list[str]]
    tags: list[str] = field(default_factory=list)
    raw_text: str = ""
    features: str | None = None
    image: str | None = None
    split: str | None = None

    @property
    def tokens(self) -> list[str]:
        return [tok for sent in self.sentences for tok in sent]

    def to_json(self) -> dict:
        out = {"id": self.id, "sentences": self.sentences, "tags": self.tags, "report": self.raw_text}
        for key in ("features", "image", "split"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        return out


class Vocabulary:
    """Token <-> id bijection with PAD/START/END/UNK reserved at ids 0..3."""

    def __init__(self, tokens: Sequence[str]):
        self.id_to_token = list(RESERVED) + list(tokens)
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DomainError("vocabulary tokens must be unique")

    def __len__(self):
        return len(self.id_to_token)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.token_to_id.get(tok, UNK) if tok not in RESERVED else UNK for tok in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    @property
    def words(self) -> list[str]:
        return self.id_to_token[len(RESERVED):]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(w + "\n" for w in self.words), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls([line for line in Path(path).read_text(encoding="utf-8").splitlines() if line])


class TagVocabulary:
    def __init__(self, tags: Sequence[str]):
        if not tags:
            raise DomainError("tag vocabulary needs at least one tag")
        self.id_to_tag = list(tags)
        self.tag_to_id = {t: i for i, t in enumerate(self.id_to_tag)}
        if len(self.tag_to_id) != len(self.id_to_tag):
            raise DomainError("tags must be unique")

    def __len__(self):
        return len(self.id_to_tag)

    def encode(self, tags: Iterable[str]) -> list[int]:
        return [self.tag_to_id[t] for t in tags if t in self.tag_to_id]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.id_to_tag), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TagVocabulary":
        return cls([line for line in Path(path).read_text(encoding="utf-8").splitlines() if line])

    @classmethod
    def from_documents(cls, documents: Iterable[Document]) -> "TagVocabulary":
        return cls(sorted({t for doc in documents for t in doc.tags}))


def build_vocab(documents: Sequence[Document], max_size: int) -> tuple[Vocabulary, float]:
    """Keep the ``max_size`` most frequent tokens; return (vocab, coverage)."""
    if max_size < 1:
        raise DomainError("max_size must be >= 1")
    counts = Counter(tok for doc in documents for tok in doc.tokens)
    total = sum(counts.values())
    if total == 0:
        raise DomainError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max_size]
    kept = sum(c for _, c in ranked)
    return Vocabulary([tok for tok, _ in ranked]), kept / total


def extract_tags_tfidf(documents: Sequence[Document], k: int = 5) -> list[list[str]]:
    """Top-k tokens per document by count * ln(num_docs / doc_freq)."""
    if k < 1:
        raise DomainError("k must be >= 1")
    df = Counter()
    for doc in documents:
        df.update(set(doc.tokens))
    n_docs = len(documents)
    tags = []
    for doc in documents:
        tf = Counter(doc.tokens)
        scored = sorted(tf, key=lambda tok: (-tf[tok] * math.log(n_docs / df[tok]), tok))
        tags.append(scored[:k])
    return tags


class XorShift64:
    """Marsaglia xorshift64 (13, 7, 17); the zero seed is remapped."""

    MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self.state = (seed & self.MASK) or 0x9E3779B97F4A7C15

    def next(self) -> int:
        x = self.state
        x ^= (x << 13) & self.MASK
        x ^= x >> 7
        x ^= (x << 17) & self.MASK
        self.state = x
        return x

    def below(self, n: int) -> int:
        return self.next() % n

    def shuffle(self, items: list) -> list:
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


def split(documents: Sequence[Document], seed: int, val_count: int, test_count: int):
    """Deterministic shuffle, then carve off validation and test sets."""
    if val_count < 0 or test_count < 0 or (val_count + test_count) and val_count + test_count >= len(documents):
        raise DomainError(
            f"cannot take {val_count} val + {test_count} test documents from {len(documents)}"
        )
    order = XorShift64(seed).shuffle(list(range(len(documents))))
    val = [documents[i] for i in order[:val_count]]
    test = [documents[i] for i in order[val_count:val_count + test_count]]
    train = [documents[i] for i in order[val_count + test_count:]]
    return train, val, test


@dataclass
class CorpusStats:
    num_documents: int
    unique_tags: int
    unique_words: int
    avg_tags_per_image: float
    avg_sentences: float
    avg_words_per_sentence: float
    top_k_word_coverage: float
    top_k: int

    def to_json(self) -> dict:
        return dict(self.__dict__)


def corpus_stats(documents: Sequence[Document], top_k: int = 1000) -> CorpusStats:
    if not documents:
        raise DomainError("corpus is empty")
    sentences = [s for doc in documents for s in doc.sentences]
    words = [tok for s in sentences for tok in s]
    coverage = build_vocab(documents, top_k)[1] if words else 0.0
    return CorpusStats(
        num_documents=len(documents),
        unique_tags=len({t for doc in documents for t in doc.tags}),
        unique_words=len(set(words)),
        avg_tags_per_image=sum(len(doc.tags) for doc in documents) / len(documents),
        avg_sentences=len(sentences) / len(documents),
        avg_words_per_sentence=len(words) / len(sentences) if sentences else 0.0,
        top_k_word_coverage=coverage,
        top_k=top_k,
    )


# ---------------------------------------------------------------------------
# JSON Lines I/O


def _report_text(obj: dict) -> str:
    if "report" in obj:
        return obj["report"]
    # impression and findings read as one paragraph
    parts = [obj.get("impression", ""), obj.get("findings", "")]
    return " ".join(p.strip() for p in parts if p)


def document_from_json(obj: dict) -> Document:
    if "id" not in obj:
        raise DomainError("corpus record without an id")
    text = _report_text(obj)
    if "sentences" in obj:
        sentences = [[str(t) for t in s] for s in obj["sentences"] if s]
    else:
        sentences = tokenize(text)
    return Document(
        id=str(obj["id"]),
        sentences=sentences,
        tags=[str(t).lower() for t in obj.get("tags", [])],
        raw_text=text,
        features=obj.get("features"),
        image=obj.get("image"),
        split=obj.get("split"),
    )


def read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DomainError(f"{path}:{lineno}: {exc}") from None
    return records


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=False) + "\n")


def load_corpus(path: str | Path) -> list[Document]:
    base = Path(path).parent
    docs = []
    for obj in read_jsonl(path):
        doc = document_from_json(obj)
        for key in ("features", "image"):
            ref = getattr(doc, key)
            if ref is not None and not Path(ref).is_absolute():
                setattr(doc, key, str(base / ref))
        docs.append(doc)
    return docs


def preprocess(
    documents: list[Document], max_vocab: int = 1000, tag_k: int = 5
) -> tuple[list[Document], Vocabulary, TagVocabulary, float]:
    """Fill in tf-idf tags where none were supplied and build both vocabularies."""
    docs = [d for d in documents if d.sentences]
    if not docs:
        raise DomainError("no document has any alphabetic tokens")
    if not any(d.tags for d in docs):
        for doc, tags in zip(docs, extract_tags_tfidf(docs, tag_k)):
            doc.tags = tags
    vocab, coverage = build_vocab(docs, max_vocab)
    return docs, vocab, TagVocabulary.from_documents(docs), coverage
