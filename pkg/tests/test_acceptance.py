"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (lines are printed even under
capture) or directly as ``python tests/test_acceptance.py``.  The real IU X-Ray
statistics check runs only when ``MEDREPORT_IU_XRAY`` points at a corpus JSONL.
"""

import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from medreport import autodiff as ad
from medreport import metrics, synthetic, training
from medreport.cli import toy_gradcheck
from medreport.coattention import (
    CALL_COUNTS,
    AttentionRecord,
    attention_regularizer,
    regularizer_node,
    semantic_attention,
    visual_attention,
)
from medreport.config import ATTENTION_MODES, TrainConfig
from medreport.corpus import corpus_stats, load_corpus, preprocess
from medreport.encoder import tag_target

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def emit(capsys):
    def _emit(number, name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number} {name}: {detail}")
    return _emit


# -- shared memorization run ---------------------------------------------------

def memorization_config(num_tags, vocab_size, **kw):
    width = dict(tag_embed_dim=16, context_dim=16, topic_dim=16, hidden_dim=16,
                 attention_dim=16, stop_hidden_dim=16, mlc_hidden_dim=16)
    base = dict(num_tags=num_tags, vocab_size=vocab_size, top_m=3, epochs=500, patience=500,
                lr_rnn=1e-2, lr_cnn=1e-2, seed=0, **width)
    base.update(kw)
    return TrainConfig.toy(**base)


def synthetic_examples(n_docs=16):
    docs, feats = synthetic.make_documents(n_docs=n_docs)
    docs, vocab, tags, _ = preprocess(docs)
    examples = [training.Example(d.id, [vocab.encode(s) for s in d.sentences], tags.encode(d.tags), feats[d.id])
                for d in docs]
    return examples, vocab, tags


@pytest.fixture(scope="module")
def memorized():
    examples, vocab, tags = synthetic_examples()
    cfg = memorization_config(len(tags), len(vocab))
    assert cfg.lambda_tag == cfg.lambda_sent == cfg.lambda_word == cfg.lambda_reg == 1.0
    ck, rows = training.train(cfg, examples, [], vocab, tags)
    reports = [training.generate(ex, ck.params, cfg)[0] for ex in examples]
    return examples, vocab, ck, rows, reports


# -- criteria ---------------------------------------------------------------------

def test_gradient_fidelity(emit):
    cfg = TrainConfig.toy()
    assert (cfg.feature_dim, cfg.tag_embed_dim, cfg.context_dim, cfg.topic_dim, cfg.hidden_dim) == (8,) * 5
    assert (cfg.num_tags, cfg.vocab_size, cfg.top_m) == (6, 20, 3)
    start = time.perf_counter()
    err = toy_gradcheck(cfg, eps=1e-4)
    elapsed = time.perf_counter() - start
    ok = err < 1e-3 and elapsed < 60
    emit(1, "gradient fidelity", ok, f"max relative error {err:.3e} (< 1e-3), {elapsed:.1f}s (< 60s)")
    assert ok


def test_memorization(memorized, emit):
    examples, vocab, ck, rows, reports = memorized
    first = rows[0].train_loss
    best = min(r.train_loss for r in rows)
    ratio = best / first
    pairs = [(metrics.flatten([vocab.decode(s) for s in rep.sentences]),
              [metrics.flatten([vocab.decode(s) for s in ex.sentences])]) for rep, ex in zip(reports, examples)]
    bleu4 = metrics.bleu(pairs, 4)
    ok = len(rows) <= 500 and ratio < 0.05 and bleu4 >= 0.95
    emit(2, "memorization", ok,
         f"best train loss {best:.3f} = {ratio:.2%} of epoch-1 {first:.3f} (< 5%) at epoch {ck.epoch}/{len(rows)}; "
         f"greedy BLEU-4 {bleu4:.4f} (>= 0.95)")
    assert ok


def test_stop_control(memorized, emit):
    examples, _, _, _, reports = memorized
    hits = sum(len(rep.sentences) == len(ex.sentences) for rep, ex in zip(reports, examples))
    ok = hits / len(examples) >= 0.9
    emit(3, "stop control", ok, f"{hits}/{len(examples)} sentence counts match at threshold 0.5 (>= 90%)")
    assert ok


def test_attention_invariants(emit):
    rng = np.random.default_rng(2024)
    worst_sum, hull_ok, zero_ok, pos_ok = 0.0, True, True, True
    for _ in range(1000):
        n, m, d, e, h, ha = (int(x) for x in rng.integers(1, 9, size=6))
        scale = float(rng.choice([0.1, 1.0, 5.0]))
        params = {"att.W_v": rng.normal(size=(ha, d)) * scale, "att.W_vh": rng.normal(size=(ha, h)) * scale,
                  "att.w_v": rng.normal(size=(1, ha)) * scale, "att.W_a": rng.normal(size=(ha, e)) * scale,
                  "att.W_ah": rng.normal(size=(ha, h)) * scale, "att.w_a": rng.normal(size=(1, ha)) * scale}
        tape = ad.Tape()
        nodes = tape.bind(params)
        v = rng.normal(size=(n, d)) * scale
        a = rng.normal(size=(m, e))
        steps = int(rng.integers(1, 5))
        alphas, betas = [], []
        for _ in range(steps):
            hp = tape.constant(rng.normal(size=h))
            alpha, v_att = visual_attention(tape.constant(v), hp, nodes)
            beta, _ = semantic_attention(tape.constant(a), hp, nodes)
            alphas.append(alpha)
            betas.append(beta)
            worst_sum = max(worst_sum, abs(alpha.value.sum() - 1.0), abs(beta.value.sum() - 1.0))
            hull_ok &= bool(np.all(v_att.value >= v.min(axis=0)) and np.all(v_att.value <= v.max(axis=0)))
        # constructed coverage: mixtures of cyclic shifts with dyadic weights
        k = int(rng.integers(1, 6))
        w = np.array([0.5, 0.25, 0.125, 0.125])
        cols = [sum(w[j] * np.roll(np.eye(k)[s], j) for j in range(4)) for s in range(k)]
        exact = AttentionRecord.from_steps(cols, cols)
        t2 = ad.Tape()
        zero_ok &= attention_regularizer(exact, 1.0) == 0.0
        zero_ok &= float(regularizer_node([t2.constant(c) for c in cols], [t2.constant(c) for c in cols], 1.0, t2).value) == 0.0
        # anything else is strictly positive: the drawn attention (unless it covers exactly) and a perturbed copy
        drawn = AttentionRecord.from_steps(alphas, betas)
        sums = np.concatenate([drawn.alpha.sum(axis=1), drawn.beta.sum(axis=1)])
        if np.any(sums != 1.0):
            pos_ok &= attention_regularizer(drawn, 1.0) > 0
        bumped = [c.copy() for c in cols]
        bumped[0][0] += 1e-6
        pos_ok &= attention_regularizer(AttentionRecord.from_steps(bumped, cols), 1.0) > 0
    ok = worst_sum <= 1e-9 and hull_ok and zero_ok and pos_ok
    emit(4, "attention invariants", ok,
         f"1000 draws: worst column-sum gap {worst_sum:.1e} (<= 1e-9), v_att in hull {hull_ok}, "
         f"regularizer exact zero {zero_ok}, positive otherwise {pos_ok}")
    assert ok


def brute_force_cider(pairs, sigma=6.0):
    """Dense tf-idf vectors over an explicit n-gram index, one order at a time."""
    n_docs = len(pairs)
    out = []
    for cand, refs in pairs:
        acc = 0.0
        for ref in refs:
            for n in range(1, 5):
                def grams(t):
                    return [tuple(t[i:i + n]) for i in range(len(t) - n + 1)]
                index = sorted({g for _, rs in pairs for r in rs for g in grams(r)} | set(grams(cand)))
                df = {g: sum(any(g in grams(r) for r in rs) for _, rs in pairs) for g in index}
                vec = lambda t: np.array([grams(t).count(g) * (math.log(n_docs) - math.log(max(1, df[g]))) for g in index])
                c, r = vec(cand), vec(ref)
                if np.linalg.norm(c) and np.linalg.norm(r):
                    acc += math.exp(-((len(cand) - len(ref)) ** 2) / (2 * sigma**2)) * c @ r / (np.linalg.norm(c) * np.linalg.norm(r))
        out.append(10.0 * acc / 4 / len(refs))
    return out


def test_metric_oracles(emit):
    b1 = metrics.bleu([("the cat".split(), ["the cat sat".split()])], 1)
    rl = metrics.rouge_l([("a b c d".split(), ["a c d".split()])])
    docs = ["the heart is normal in size", "lungs are clear", "no pleural effusion or pneumothorax",
            "mild cardiomegaly with clear lungs", "no acute bony abnormality"]
    pairs = [(d.split(), [d.split()]) for d in docs]
    mine, oracle = metrics.cider_scores(pairs), brute_force_cider(pairs)
    gap = max(abs(a - b) for a, b in zip(mine, oracle))
    ok = abs(b1 - 0.6065) <= 1e-4 and abs(rl - 0.8798) <= 1e-4 and gap <= 1e-6
    emit(5, "metric oracles", ok,
         f"BLEU-1 {b1:.6f} (0.6065), ROUGE-L {rl:.6f} (0.8798), CIDEr max gap to brute force {gap:.1e} (<= 1e-6)")
    assert ok


def test_ablation_plumbing(emit):
    examples, vocab, tags = synthetic_examples()
    details, ok = [], True
    for mode in ATTENTION_MODES:
        cfg = memorization_config(len(tags), len(vocab), epochs=3, attention_mode=mode)
        CALL_COUNTS.clear()
        ck, rows = training.train(cfg, examples, [], vocab, tags)
        report, _ = training.generate(examples[0], ck.params, cfg)
        calls = CALL_COUNTS["visual"] + CALL_COUNTS["semantic"]
        finite = all(math.isfinite(r.train_loss) for r in rows) and len(rows) == 3 and report.sentences
        ok &= bool(finite) and ((calls == 0) if mode == "none" else calls > 0)
        details.append(f"{mode}: loss {rows[0].train_loss:.2f}->{rows[-1].train_loss:.2f}, attention calls {calls}")
    emit(6, "ablation plumbing", ok, "; ".join(details))
    assert ok


def test_tag_normalization(emit):
    gaps = []
    for k in range(1, 11):
        labels = np.zeros(12)
        labels[:k] = 1.0
        p = tag_target(labels)
        ce = float(ad.cross_entropy(ad.Tape().constant(p), p).value)
        gaps.append(abs(ce - math.log(k)))
    ok = max(gaps) <= 1e-12
    emit(7, "tag normalization", ok, f"max |CE - ln k| over k=1..10 is {max(gaps):.1e} (<= 1e-12)")
    assert ok


def test_determinism_and_persistence(tmp_path, emit):
    examples, vocab, tags = synthetic_examples()
    cfg = memorization_config(len(tags), len(vocab), epochs=4, seed=11)
    train, val = examples[:12], examples[12:]
    paths = []
    for run in range(2):
        ck, _ = training.train(cfg, train, val, vocab, tags)
        paths.append(tmp_path / f"run{run}.hgc")
        ck.save(paths[-1])
    same_bytes = paths[0].read_bytes() == paths[1].read_bytes()
    loaded = training.Checkpoint.load(paths[0])
    reloaded_val = training.evaluate_loss(val, loaded.params, loaded.config)
    exact = reloaded_val == loaded.best_val_loss == ck.best_val_loss
    ok = same_bytes and exact
    emit(8, "determinism & persistence", ok,
         f"checkpoints byte-identical {same_bytes}; reloaded val loss {reloaded_val!r} vs stored {loaded.best_val_loss!r}")
    assert ok


def test_corpus_stats_fixture(emit):
    stats = corpus_stats(load_corpus(FIXTURES / "stats_corpus.jsonl"))
    got = (stats.num_documents, stats.avg_tags_per_image, stats.avg_sentences, stats.avg_words_per_sentence,
           stats.unique_words, stats.unique_tags)
    want = (3, 1.0, 2.0, 17 / 6, 16, 2)
    one = corpus_stats(load_corpus(FIXTURES / "stats_corpus.jsonl"), top_k=1).top_k_word_coverage
    ok = got == want and one == 2 / 17 and stats.top_k_word_coverage == 1.0
    emit(9, "corpus statistics (fixture)", ok, f"{got} vs {want}; top-1 coverage {one:.4f} (2/17)")
    assert ok


@pytest.mark.skipif(not os.environ.get("MEDREPORT_IU_XRAY"), reason="set MEDREPORT_IU_XRAY to an IU X-Ray corpus JSONL")
def test_corpus_stats_iu_xray(emit):
    docs, *_ = preprocess(load_corpus(os.environ["MEDREPORT_IU_XRAY"]))
    stats = corpus_stats(docs, top_k=1000)
    near = lambda x, ref: abs(x - ref) <= 0.1 * ref
    ok = (near(stats.avg_tags_per_image, 2.2) and near(stats.avg_sentences, 5.7)
          and near(stats.avg_words_per_sentence, 6.5) and abs(stats.top_k_word_coverage - 0.990) <= 0.01)
    emit(9, "corpus statistics (IU X-Ray)", ok,
         f"tags {stats.avg_tags_per_image:.2f} (2.2), sentences {stats.avg_sentences:.2f} (5.7), "
         f"words {stats.avg_words_per_sentence:.2f} (6.5), top-1000 coverage {stats.top_k_word_coverage:.3f} (0.990)")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
