import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medreport.autodiff import DomainError
from medreport.metrics import (
    bleu,
    bleu_stats,
    cider,
    cider_scores,
    evaluate,
    lcs_length,
    normality_portion,
    rouge_l,
    write_rows,
)


def brute_cider(pairs, max_n=4, sigma=6.0):
    """Independent tf-idf cosine: explicit vocabulary-indexed dense vectors."""
    docs = [refs for _, refs in pairs]
    total = []
    for cand, refs in pairs:
        score = 0.0
        for ref in refs:
            for n in range(1, max_n + 1):
                grams = lambda toks: [tuple(toks[i:i + n]) for i in range(len(toks) - n + 1)]
                universe = sorted(set(grams(cand)) | set(grams(ref)))

                def idf(g):
                    df = sum(1 for rs in docs if any(g in grams(r) for r in rs))
                    return math.log(len(pairs)) - math.log(max(1, df))

                cv = [grams(cand).count(g) * idf(g) for g in universe]
                rv = [grams(ref).count(g) * idf(g) for g in universe]
                nc, nr = math.sqrt(sum(x * x for x in cv)), math.sqrt(sum(x * x for x in rv))
                if nc and nr:
                    pen = math.exp(-((len(cand) - len(ref)) ** 2) / (2 * sigma**2))
                    score += pen * sum(a * b for a, b in zip(cv, rv)) / (nc * nr)
        total.append(10.0 * score / max_n / len(refs))
    return total


def test_bleu_hand_examples():
    assert bleu([("the cat".split(), ["the cat sat".split()])], 1) == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert abs(bleu([("the cat".split(), ["the cat sat".split()])], 1) - 0.6065) < 1e-4
    sent = "no acute cardiopulmonary abnormality seen".split()
    for n in range(1, 5):
        assert bleu([(sent, [sent])], n) == 1.0
    assert bleu([("a b".split(), ["c d".split()])], 1) == 0.0
    assert bleu([([], ["a".split()])], 1) == 0.0
    with pytest.raises(ValueError):
        bleu([(sent, [sent])], 5)


def test_bleu_clips_and_uses_closest_length():
    # "the the the" vs "the cat": clipped unigram precision 1/3, r=2 < c=3 so no penalty
    assert bleu([("the the the".split(), ["the cat".split()])], 1) == pytest.approx(1 / 3)
    # closest reference length is 3 (|3-3|=0), not 6
    pairs = [("a b c".split(), ["a b c d e f".split(), "a b c".split()])]
    assert bleu(pairs, 2) == 1.0


def test_rouge_hand_examples():
    assert lcs_length("a b c d".split(), "a c d".split()) == 3
    f = rouge_l([("a b c d".split(), ["a c d".split()])])
    assert f == pytest.approx(2.44 * 0.75 / (1 + 1.44 * 0.75), abs=1e-12)
    assert abs(f - 0.8798) < 1e-4
    assert rouge_l([("x y".split(), ["x y".split()])]) == 1.0
    assert rouge_l([("x y".split(), ["z".split()])]) == 0.0


def test_cider_identical_in_five_document_corpus():
    corpus = ["heart size normal", "lungs are clear", "no pleural effusion", "mild cardiomegaly noted", "spine degenerative changes"]
    pairs = [(c.split(), [c.split()]) for c in corpus]
    mine, oracle = cider_scores(pairs), brute_cider(pairs)
    for a, b in zip(mine, oracle):
        assert abs(a - b) <= 1e-6
    # every n-gram is unique to its document, so each order contributes cosine 1
    assert mine[0] == pytest.approx(10.0 * 3 / 4, abs=1e-12)


def test_cider_zero_overlap_and_idf_scale_invariance():
    pairs = [("a b".split(), ["c d".split()]), ("e f".split(), ["g h".split()])]
    assert cider(pairs) == 0.0
    # with every df = 1 all idf equal ln N; growing N rescales every idf but not the cosines
    two = [("p q".split(), ["p q r".split()]), ("s".split(), ["s t".split()])]
    four = two + [("u".split(), ["u".split()]), ("v".split(), ["v".split()])]
    assert cider_scores(four)[:2] == pytest.approx(cider_scores(two), abs=1e-12)
    assert cider_scores(two) == pytest.approx(brute_cider(two), abs=1e-12)


tokens = st.lists(st.sampled_from(list("abcdef")), min_size=1, max_size=8)
corpora = st.lists(st.tuples(tokens, st.lists(tokens, min_size=1, max_size=3)), min_size=1, max_size=5)


@settings(max_examples=200, deadline=None)
@given(corpora)
def test_bleu_nonincreasing_while_precisions_are(pairs):
    matches, totals, _, _ = bleu_stats(pairs, 4)
    prec = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    for n in range(2, 5):
        if prec[n - 1] > prec[n - 2]:
            break
        assert bleu(pairs, n) <= bleu(pairs, n - 1) + 1e-12


FIXED_CORPORA = [
    [("the cat".split(), ["the cat sat".split()])],
    [("a b c d".split(), ["a c d".split()])],
    [("the heart is normal".split(), ["the heart size is normal".split()]),
     ("no pleural effusion".split(), ["no effusion".split(), "no pleural effusion or pneumothorax".split()])],
    [("lungs are clear and expanded".split(), ["the lungs are clear".split()])],
]


@pytest.mark.parametrize("pairs", FIXED_CORPORA)
def test_bleu_n_at_most_bleu_1_on_fixed_corpora(pairs):
    b1 = bleu(pairs, 1)
    for n in range(2, 5):
        assert bleu(pairs, n) <= b1


def test_corpus_bleu_2_can_exceed_bleu_1():
    # pooled bigram precision 1/1 beats pooled unigram precision 2/3
    pairs = [(["a"], [["b"]]), (["a", "a"], [["a", "a"]])]
    assert bleu(pairs, 1) == pytest.approx(2 / 3)
    assert bleu(pairs, 2) == pytest.approx(math.sqrt(2 / 3))


@settings(max_examples=60, deadline=None)
@given(corpora)
def test_cider_matches_brute_force(pairs):
    for a, b in zip(cider_scores(pairs), brute_cider(pairs)):
        assert abs(a - b) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(corpora, st.permutations(list("abcdef")))
def test_metrics_invariant_under_relabeling(pairs, perm):
    mapping = dict(zip("abcdef", perm))
    relabel = lambda toks: [mapping[t] for t in toks]
    renamed = [(relabel(c), [relabel(r) for r in refs]) for c, refs in pairs]
    for n in range(1, 5):
        assert bleu(renamed, n) == bleu(pairs, n)
    assert rouge_l(renamed) == rouge_l(pairs)
    assert cider_scores(renamed) == pytest.approx(cider_scores(pairs), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(corpora)
def test_exact_candidates_score_one(pairs):
    exact = [(refs[-1], refs) for _, refs in pairs]
    assert rouge_l(exact) == 1.0
    if all(len(r) >= 4 for _, refs in exact for r in refs[-1:]):
        assert bleu(exact, 4) == pytest.approx(1.0, abs=1e-15)


def test_normality_examples():
    assert normality_portion([[["no", "pneumothorax"]], [["heart", "enlarged"]]]) == (0.5, 0.5)
    assert normality_portion([[["normal"], ["heart", "normal"]]]) == (1.0, 0.0)
    # whole tokens only
    assert normality_portion([[["abnormality"], ["nothing"]]]) == (0.0, 1.0)
    with pytest.raises(DomainError):
        normality_portion([[]])


@settings(max_examples=50)
@given(st.lists(st.lists(st.lists(st.sampled_from(["no", "normal", "lung", "base", "clear"]), min_size=1), min_size=1), min_size=1))
def test_normality_portions_sum_to_one(reports):
    normal, abnormal = normality_portion(reports)
    assert normal + abnormal == 1.0


def test_evaluate_report_and_rows(tmp_path):
    cands = {"a": [["the", "heart", "is", "normal"]], "b": [["lungs", "are", "hyperinflated"], ["no", "effusion"]]}
    report, rows = evaluate(cands, {k: [v] for k, v in cands.items()})
    assert report.bleu1 == 1.0 and report.bleu4 == 1.0 and report.rouge_l == 1.0
    assert report.num_images == 2
    assert report.normality_portion == pytest.approx(2 / 3)
    assert [r["id"] for r in rows] == ["a", "b"]
    write_rows(tmp_path / "rows.csv", rows)
    assert (tmp_path / "rows.csv").read_text().splitlines()[0] == "id,bleu1,bleu2,bleu3,bleu4,rouge_l,cider"
    with pytest.raises(DomainError):
        evaluate({"z": [["x"]]}, {})
