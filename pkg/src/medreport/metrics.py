"""Caption metrics (BLEU-1..4, ROUGE-L, CIDEr) and the normality-sentence portion.

A pair is ``(candidate_tokens, [reference_tokens, ...])``; multi-sentence
reports are flattened to one token sequence before scoring.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .autodiff import DomainError

Tokens = Sequence[str]
Pair = tuple[Tokens, Sequence[Tokens]]

NORMALITY_WORDS = frozenset({"no", "normal", "clear", "stable"})


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(cand_len: int, refs: Sequence[Tokens]) -> int:
    return min((abs(len(r) - cand_len), len(r)) for r in refs)[1]


def bleu_stats(pairs: Sequence[Pair], max_n: int = 4):
    """Clipped matches and candidate totals per order, plus (cand_len, ref_len)."""
    matches, totals = [0] * max_n, [0] * max_n
    cand_len = ref_len = 0
    for cand, refs in pairs:
        if not refs:
            raise DomainError("every candidate needs at least one reference")
        cand_len += len(cand)
        ref_len += _closest_ref_len(len(cand), refs)
        for k in range(1, max_n + 1):
            counts = ngrams(cand, k)
            max_ref = Counter()
            for ref in refs:
                max_ref |= ngrams(ref, k)
            matches[k - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[k - 1] += max(len(cand) - k + 1, 0)
    return matches, totals, cand_len, ref_len


def bleu(pairs: Sequence[Pair], n: int = 4) -> float:
    """Corpus BLEU-n: geometric mean of clipped precisions times the brevity penalty."""
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    matches, totals, c, r = bleu_stats(pairs, n)
    if c == 0 or any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / n
    return math.exp(min(0.0, 1.0 - r / c) + log_p)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_single(cand: Tokens, refs: Sequence[Tokens], beta: float = 1.2) -> float:
    # best precision and best recall are taken over references independently
    if not cand or not refs:
        return 0.0
    lcs = [lcs_length(cand, r) for r in refs]
    prec = max(l / len(cand) for l in lcs)
    rec = max(l / len(r) if r else 0.0 for l, r in zip(lcs, refs))
    if prec == 0 or rec == 0:
        return 0.0
    return (1 + beta ** 2) * prec * rec / (rec + beta ** 2 * prec)


def rouge_l(pairs: Sequence[Pair], beta: float = 1.2) -> float:
    if not pairs:
        raise DomainError("no pairs to score")
    return sum(rouge_l_single(c, r, beta) for c, r in pairs) / len(pairs)


def cider_scores(pairs: Sequence[Pair], max_n: int = 4, sigma: float = 6.0) -> list[float]:
    """Per-pair CIDEr with the Gaussian length penalty and x10 scaling.

    Document frequencies come from the references of ``pairs`` themselves.
    """
    if not pairs:
        return []
    df = Counter()
    for _, refs in pairs:
        df.update({g for ref in refs for k in range(1, max_n + 1) for g in ngrams(ref, k)})
    log_docs = math.log(len(pairs))

    def vectors(tokens):
        vecs, norms = [], []
        for k in range(1, max_n + 1):
            vec = {g: tf * (log_docs - math.log(max(1.0, df[g]))) for g, tf in ngrams(tokens, k).items()}
            vecs.append(vec)
            norms.append(math.sqrt(sum(x * x for x in vec.values())))
        return vecs, norms

    scores = []
    for cand, refs in pairs:
        cvec, cnorm = vectors(cand)
        total = 0.0
        for ref in refs:
            rvec, rnorm = vectors(ref)
            penalty = math.exp(-((len(cand) - len(ref)) ** 2) / (2 * sigma ** 2))
            for k in range(max_n):
                if cnorm[k] == 0 or rnorm[k] == 0:
                    continue
                dot = sum(x * rvec[k].get(g, 0.0) for g, x in cvec[k].items())
                total += penalty * dot / (cnorm[k] * rnorm[k])
        scores.append(10.0 * total / max_n / len(refs))
    return scores


def cider(pairs: Sequence[Pair], max_n: int = 4, sigma: float = 6.0) -> float:
    scores = cider_scores(pairs, max_n, sigma)
    return sum(scores) / len(scores) if scores else 0.0


def normality_portion(reports: Sequence[Sequence[Tokens]]) -> tuple[float, float]:
    """Share of sentences containing no/normal/clear/stable as a whole token."""
    sentences = [s for report in reports for s in report]
    if not sentences:
        raise DomainError("no sentences to classify")
    normal = sum(1 for s in sentences if NORMALITY_WORDS.intersection(s))
    portion = normal / len(sentences)
    return portion, 1.0 - portion


@dataclass
class EvalReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    cider: float
    normality_portion: float
    abnormality_portion: float
    num_images: int

    def to_json(self) -> dict:
        return asdict(self)


def flatten(sentences: Sequence[Tokens]) -> list[str]:
    return [tok for s in sentences for tok in s]


def evaluate(
    candidates: Mapping[str, Sequence[Tokens]], references: Mapping[str, Sequence[Sequence[Tokens]]]
) -> tuple[EvalReport, list[dict]]:
    """Score generated reports (id -> sentences) against references (id -> list of reports).

    Returns the corpus report and one row of per-image scores per id, in
    sorted id order.
    """
    ids = sorted(candidates)
    missing = [i for i in ids if i not in references]
    if missing:
        raise DomainError(f"no references for ids {missing[:5]}")
    if not ids:
        raise DomainError("nothing to evaluate")
    pairs = [(flatten(candidates[i]), [flatten(r) for r in references[i]]) for i in ids]
    per_cider = cider_scores(pairs)
    normal, abnormal = normality_portion([candidates[i] for i in ids])
    report = EvalReport(
        *(bleu(pairs, n) for n in range(1, 5)),
        rouge_l=rouge_l(pairs),
        cider=sum(per_cider) / len(per_cider),
        normality_portion=normal,
        abnormality_portion=abnormal,
        num_images=len(ids),
    )
    rows = []
    for i, pair, c in zip(ids, pairs, per_cider):
        row = {"id": i}
        row.update({f"bleu{n}": bleu([pair], n) for n in range(1, 5)})
        row.update(rouge_l=rouge_l_single(*pair), cider=c)
        rows.append(row)
    return report, rows


def write_rows(path: str | Path, rows: Sequence[dict]) -> None:
    fields = ["id", "bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
