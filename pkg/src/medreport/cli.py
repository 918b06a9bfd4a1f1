"""Command-line entry point: preprocess, train, generate, evaluate, gradcheck, stats.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import metrics, training
from .autodiff import DimensionError, DomainError, gradient_check
from .coattention import save_attention
from .config import ATTENTION_MODES, ConfigError, TrainConfig
from .corpus import TagVocabulary, Vocabulary
from .tensorio import FormatError

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="medreport", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="key=value run config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--mode", choices=ATTENTION_MODES)
        return p

    p = common(sub.add_parser("preprocess", help="tokenize, build vocabularies, tag and split a raw corpus"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = common(sub.add_parser("train", help="train on the train split, early-stop on val"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True, help="checkpoint to write")
    p.add_argument("--out", help="per-epoch CSV log (default: checkpoint path + .csv)")

    p = common(sub.add_parser("generate", help="generate reports for one split"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="reports JSONL; attention goes to <out>.attention.json")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")

    p = common(sub.add_parser("evaluate", help="score generated reports against references"))
    p.add_argument("--reports", required=True, help="generated reports JSONL")
    p.add_argument("--corpus", required=True, help="reference JSONL")
    p.add_argument("--out", required=True, help="EvalReport JSON; per-image CSV goes to <out>.csv")
    p.add_argument("--split", choices=("train", "val", "test"))

    p = common(sub.add_parser("gradcheck", help="finite-difference check of the full loss"))
    p.add_argument("--eps", type=float, default=1e-4)

    p = common(sub.add_parser("stats", help="corpus statistics as JSON"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", help="write JSON here instead of stdout")
    return parser


def resolve_config(args, base: TrainConfig | None = None) -> TrainConfig:
    config = base or TrainConfig()
    if args.config:
        config = TrainConfig.from_text(Path(args.config).read_text(encoding="utf-8"), base=config)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    if args.mode is not None:
        config = config.replace(attention_mode=args.mode)
    return config


def _announce(config: TrainConfig) -> None:
    sys.stdout.write("# resolved config\n" + config.to_text())
    sys.stdout.flush()


# ---------------------------------------------------------------------------


def cmd_preprocess(args, config):
    docs = corpus_mod.load_corpus(args.corpus)
    docs, vocab, tags, coverage = corpus_mod.preprocess(docs, config.max_vocab, config.tag_k)
    n = len(docs)
    val_count, test_count = min(config.val_count, n // 5), min(config.test_count, n // 5)
    train, val, test = corpus_mod.split(docs, config.seed, val_count, test_count)
    for name, part in (("train", train), ("val", val), ("test", test)):
        for doc in part:
            doc.split = name
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for doc in docs:
        rec = doc.to_json()
        for key in ("features", "image"):
            if key in rec:
                rec[key] = os.path.relpath(rec[key], out)
        records.append(rec)
    corpus_mod.write_jsonl(out / "corpus.jsonl", records)
    vocab.save(out / "vocab.txt")
    tags.save(out / "tags.txt")
    print(f"documents={n} train={len(train)} val={len(val)} test={len(test)} "
          f"vocab={len(vocab.words)} tags={len(tags)} coverage={coverage:.4f}")
    return 0


def _vocabularies(corpus_path: Path, docs, config):
    vocab_file, tag_file = corpus_path.parent / "vocab.txt", corpus_path.parent / "tags.txt"
    if vocab_file.exists() and tag_file.exists():
        return Vocabulary.load(vocab_file), TagVocabulary.load(tag_file)
    docs, vocab, tags, _ = corpus_mod.preprocess(docs, config.max_vocab, config.tag_k)
    return vocab, tags


def _by_split(docs, config):
    if all(d.split for d in docs):
        return {name: [d for d in docs if d.split == name] for name in ("train", "val", "test")}
    train, val, test = corpus_mod.split(docs, config.seed, min(config.val_count, len(docs) // 5),
                                        min(config.test_count, len(docs) // 5))
    return {"train": train, "val": val, "test": test}


def cmd_train(args, config):
    path = Path(args.corpus)
    docs = corpus_mod.load_corpus(path)
    vocab, tags = _vocabularies(path, docs, config)
    config = config.replace(num_tags=len(tags), vocab_size=len(vocab))
    _announce(config)
    parts = _by_split(docs, config)
    train_ex = training.make_examples(parts["train"], vocab, tags, config)
    val_ex = training.make_examples(parts["val"], vocab, tags, config)
    ck, rows = training.train(
        config, train_ex, val_ex, vocab, tags,
        on_epoch=lambda r: print(f"epoch {r.epoch} train_loss {r.train_loss:.6f} val_loss {r.val_loss:.6f}"),
    )
    ck.save(args.checkpoint)
    training.write_log(args.out or f"{args.checkpoint}.csv", rows)
    return 0


def cmd_generate(args, config):
    ck = training.Checkpoint.load(args.checkpoint)
    config = ck.config
    if args.mode:
        config = config.replace(attention_mode=args.mode)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    _announce(config)
    vocab, tags = Vocabulary(ck.vocab or []), TagVocabulary(ck.tags or ["<none>"])
    docs = corpus_mod.load_corpus(args.corpus)
    docs = _by_split(docs, config)[args.split]
    examples = training.make_examples(docs, vocab, tags, config)
    records, attention = [], {}
    for ex in examples:
        report, rec = training.generate(ex, ck.params, config)
        records.append({
            "id": ex.id,
            "sentences": [vocab.decode(s) for s in report.sentences],
            "stop_probs": report.stop_probs,
            "truncated": report.truncated,
        })
        attention[ex.id] = rec
    corpus_mod.write_jsonl(args.out, records)
    save_attention(f"{args.out}.attention.json", attention)
    return 0


def _reference_sentences(obj) -> list[list[str]]:
    if "sentences" in obj:
        return [[str(t) for t in s] for s in obj["sentences"]]
    return corpus_mod.tokenize(corpus_mod._report_text(obj))


def cmd_evaluate(args, config):
    _announce(config)
    cands = {str(o["id"]): _reference_sentences(o) for o in corpus_mod.read_jsonl(args.reports)}
    refs = {}
    for o in corpus_mod.read_jsonl(args.corpus):
        if args.split and o.get("split") != args.split:
            continue
        refs.setdefault(str(o["id"]), []).append(_reference_sentences(o))
    report, rows = metrics.evaluate(cands, refs)
    Path(args.out).write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    metrics.write_rows(f"{args.out}.csv", rows)
    print(json.dumps(report.to_json()))
    return 0


def toy_gradcheck(config: TrainConfig, eps: float = 1e-4) -> float:
    """Full-loss finite-difference check on one synthetic example of ``config``'s widths."""
    rng = np.random.default_rng(config.seed)
    V, L = config.vocab_size, config.num_tags
    sentences = [list(rng.integers(4, V, size=int(rng.integers(2, 5)))) for _ in range(2)]
    tag_ids = sorted(int(i) for i in rng.choice(L, size=2, replace=False))
    ex = training.Example("toy", [[int(t) for t in s] for s in sentences], tag_ids,
                          features=rng.normal(size=(4, config.feature_dim)))
    params = training.init_params(config)
    # push weights off the tiny init so every term carries signal
    params = {k: v + rng.uniform(-0.5, 0.5, size=v.shape) for k, v in params.items()}

    def f(tape, nodes):
        return training.forward_example(tape, nodes, ex, config).terms

    return gradient_check(f, params, eps)


def cmd_gradcheck(args, config):
    _announce(config)
    err = toy_gradcheck(config, args.eps)
    print(f"max_relative_error {err:.3e}")
    return 0 if err < 1e-3 else EXIT_DIVERGED


def cmd_stats(args, config):
    _announce(config)
    docs = corpus_mod.load_corpus(args.corpus)
    stats = corpus_mod.corpus_stats(docs, config.max_vocab)
    text = json.dumps(stats.to_json(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


COMMANDS = {
    "preprocess": cmd_preprocess, "train": cmd_train, "generate": cmd_generate,
    "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck, "stats": cmd_stats,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        base = TrainConfig.toy() if args.verb == "gradcheck" else TrainConfig()
        config = resolve_config(args, base)
        if args.verb in ("preprocess",):
            _announce(config)
        return COMMANDS[args.verb](args, config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except training.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DomainError, DimensionError, FormatError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
