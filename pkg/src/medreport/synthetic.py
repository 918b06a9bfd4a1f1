"""Small deterministic image/report/tag corpora for tests and demos."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .corpus import Document, tokenize, write_jsonl
from .tensorio import save_tensor

# (sentence, tag it evidences or None)
SENTENCES = [
    ("the heart is normal in size", None),
    ("lungs are clear", None),
    ("no pleural effusion", None),
    ("no pneumothorax", None),
    ("mild cardiomegaly", "cardiomegaly"),
    ("patchy opacity in the right lung base", "opacity"),
    ("degenerative changes of the spine", "degenerative change"),
    ("calcified granuloma in the left lung", "calcified granuloma"),
    ("small left pleural effusion", "effusion"),
    ("low lung volumes", "hypoinflation"),
]


def make_documents(n_docs: int = 16, seed: int = 7, n_regions: int = 4, dim: int = 8):
    """Documents with 2-3 sentences each plus an [N, D] feature array per document."""
    rng = np.random.default_rng(seed)
    docs, feats = [], {}
    seen = set()
    while len(docs) < n_docs:
        k = int(rng.integers(2, 4))
        picks = tuple(int(i) for i in rng.choice(len(SENTENCES), size=k, replace=False))
        if picks in seen:
            continue
        seen.add(picks)
        doc_id = f"doc{len(docs):03d}"
        text = " ".join(SENTENCES[i][0].capitalize() + "." for i in picks)
        tags = [SENTENCES[i][1] for i in picks if SENTENCES[i][1]] or ["normal"]
        docs.append(Document(doc_id, tokenize(text), tags, raw_text=text))
        feats[doc_id] = rng.normal(0.0, 1.0, size=(n_regions, dim))
    return docs, feats


def write_corpus(directory: str | Path, n_docs: int = 16, seed: int = 7, n_regions: int = 4, dim: int = 8) -> Path:
    """Write ``corpus.jsonl`` plus one HGT1 feature file per document; return the corpus path."""
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    docs, feats = make_documents(n_docs, seed, n_regions, dim)
    records = []
    for doc in docs:
        rel = f"features/{doc.id}.hgt"
        save_tensor(directory / rel, feats[doc.id])
        records.append({"id": doc.id, "report": doc.raw_text, "tags": doc.tags, "features": rel})
    path = directory / "corpus.jsonl"
    write_jsonl(path, records)
    return path
