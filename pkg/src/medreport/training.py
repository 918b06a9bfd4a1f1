"""Joint multi-task loss, Adam, early-stopped training and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Node, Tape
from .coattention import AttentionRecord, ablation_context, regularizer_node  # noqa: F401  (re-export)
from .config import TrainConfig
from .corpus import END, Document, TagVocabulary, Vocabulary
from .decoder import CONTINUE, STOP, Report, generate_report, teacher_forced_pass
from .encoder import extract_region_features, load_image, load_region_features, predict_tags, tag_target, top_m_semantic_features
from .model import init_params, learning_rate
from .tensorio import load_bundle, narrow, save_bundle, tensor_to_text, text_to_tensor

log = logging.getLogger(__name__)

COMPONENTS = ("tag", "sent", "word", "reg")


class DivergenceError(RuntimeError):
    pass


@dataclass
class Example:
    """A document encoded against the vocabularies, with its image input loaded."""

    id: str
    sentences: list[list[int]]
    tag_ids: list[int]
    features: np.ndarray | None = None
    image: np.ndarray | None = None


def make_examples(docs: Sequence[Document], vocab: Vocabulary, tags: TagVocabulary, config: TrainConfig) -> list[Example]:
    out = []
    for doc in docs:
        sentences = [vocab.encode(s) for s in doc.sentences if s][: config.s_max]
        features = load_region_features(doc.features) if doc.features else None
        image = load_image(doc.image) if features is None and doc.image else None
        if features is None and image is None:
            raise ad.DomainError(f"document {doc.id} has neither features nor image")
        out.append(Example(doc.id, sentences, tags.encode(doc.tags), features, image))
    return out


# ---------------------------------------------------------------------------
# forward / loss


@dataclass
class Forward:
    loss: Node
    terms: list[Node]              # weighted scalar terms summing to ``loss``
    components: dict[str, Node]
    outputs: object
    tag_probs: Node
    tag_ids: list[int]


def encode_example(tape: Tape, nodes: dict[str, Node], example: Example, config: TrainConfig,
                   use_truth: bool = True):
    """Region features, tag distribution and the semantic feature set."""
    v = extract_region_features(tape, nodes, features=example.features, image=example.image)
    if v.shape[1] != config.feature_dim:
        raise DimensionError(f"example {example.id}: feature width {v.shape[1]} != {config.feature_dim}")
    probs = predict_tags(v, nodes)
    forced = example.tag_ids if config.teacher_tags and use_truth else None
    sem = top_m_semantic_features(probs, nodes, min(config.top_m, config.num_tags), forced=forced)
    return v, probs, sem


def forward_example(tape: Tape, nodes: dict[str, Node], example: Example, config: TrainConfig) -> Forward:
    v, probs, sem = encode_example(tape, nodes, example, config)
    out = teacher_forced_pass(example.sentences, v, sem.embeddings, nodes, config.attention_mode, config.s_max)

    if example.tag_ids:
        labels = np.zeros(config.num_tags)
        labels[example.tag_ids] = 1.0
        l_tag = ad.cross_entropy(probs, tag_target(labels))
    else:
        l_tag = tape.constant(0.0)

    n_sent = len(example.sentences)
    sent_terms, word_terms = [], []
    V = config.vocab_size
    for s, (stop_dist, dists, words) in enumerate(zip(out.stop_dists, out.word_dists, example.sentences), 1):
        stop_target = np.zeros(2)
        stop_target[STOP if s == n_sent else CONTINUE] = 1.0
        sent_terms.append(ad.cross_entropy(stop_dist, stop_target))
        for dist, token in zip(dists, [*words, END]):
            target = np.zeros(V)
            target[token] = 1.0
            word_terms.append(ad.cross_entropy(dist, target))
    l_reg = regularizer_node(out.alphas, out.betas, config.lambda_reg, tape)

    terms = [ad.scale(l_tag, config.lambda_tag)]
    terms += [ad.scale(t, config.lambda_sent) for t in sent_terms]
    terms += [ad.scale(t, config.lambda_word) for t in word_terms]
    terms.append(l_reg)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    comps = {"tag": l_tag, "sent": ad.sum(ad.stack(sent_terms)), "word": ad.sum(ad.stack(word_terms)), "reg": l_reg}
    return Forward(total, terms, comps, out, probs, sem.tag_ids)


def example_loss(example: Example, params: Mapping[str, np.ndarray], config: TrainConfig) -> tuple[float, dict[str, float]]:
    """Total loss and its unweighted components (the regulariser carries its lambda)."""
    tape = Tape()
    fwd = forward_example(tape, tape.bind(params), example, config)
    return float(fwd.loss.value), {k: float(v.value) for k, v in fwd.components.items()}


def loss_and_grads(example: Example, params: Mapping[str, np.ndarray], config: TrainConfig):
    tape = Tape()
    fwd = forward_example(tape, tape.bind(params), example, config)
    grads = ad.backward(tape, fwd.loss, params)
    return float(fwd.loss.value), {k: float(v.value) for k, v in fwd.components.items()}, grads


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: Mapping[str, np.ndarray], config: TrainConfig | None = None) -> "AdamState":
        kw = {} if config is None else dict(beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0, **kw)


def adam_step(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
    lr_map: Mapping[str, float],
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new parameter and state objects."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1, bc2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new_params[name] = p - lr_map[name] * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t, b1, b2, state.eps)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam: AdamState
    config: TrainConfig
    epoch: int = 0
    best_val_loss: float = math.inf
    vocab: list[str] | None = None
    tags: list[str] | None = None

    @classmethod
    def snapshot(cls, params, adam: AdamState, config: TrainConfig, **kw) -> "Checkpoint":
        """Copy narrowed to float32, i.e. exactly what save() will write."""
        adam = AdamState({k: narrow(x) for k, x in adam.m.items()}, {k: narrow(x) for k, x in adam.v.items()},
                         adam.step, adam.beta1, adam.beta2, adam.eps)
        return cls({k: narrow(p) for k, p in params.items()}, adam, config, **kw)

    def save(self, path: str | Path) -> None:
        meta = {
            "config": self.config.to_text(),
            "epoch": self.epoch,
            "best_val_loss": repr(self.best_val_loss),
            "adam": [self.adam.beta1, self.adam.beta2, self.adam.eps],
            "vocab": self.vocab,
            "tags": self.tags,
        }
        entries: dict[str, np.ndarray] = dict(self.params)
        for name in self.params:
            entries[f"__adam__/m/{name}"] = self.adam.m[name]
            entries[f"__adam__/v/{name}"] = self.adam.v[name]
        entries["__adam__/step"] = np.array([self.adam.step], dtype=np.float64)
        entries["__meta__"] = text_to_tensor(json.dumps(meta, sort_keys=True))
        save_bundle(path, entries)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        entries = load_bundle(path)
        meta = json.loads(tensor_to_text(entries.pop("__meta__")))
        step = int(entries.pop("__adam__/step")[0])
        m = {k.split("/", 2)[2]: v for k, v in entries.items() if k.startswith("__adam__/m/")}
        v = {k.split("/", 2)[2]: x for k, x in entries.items() if k.startswith("__adam__/v/")}
        params = {k: x for k, x in entries.items() if not k.startswith("__")}
        b1, b2, eps = meta["adam"]
        return cls(params, AdamState(m, v, step, b1, b2, eps), TrainConfig.from_text(meta["config"]),
                   meta["epoch"], float(meta["best_val_loss"]), meta["vocab"], meta["tags"])


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    tag: float
    sent: float
    word: float
    reg: float


LOG_FIELDS = ("epoch", "train_loss", "val_loss", "l_tag", "l_sent", "l_word", "l_reg")


def write_log(path: str | Path, rows: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for r in rows:
            writer.writerow([r.epoch] + [repr(x) for x in (r.train_loss, r.val_loss, r.tag, r.sent, r.word, r.reg)])


def evaluate_loss(examples: Sequence[Example], params: Mapping[str, np.ndarray], config: TrainConfig) -> float:
    """Mean total loss, accumulated in document order."""
    if not examples:
        return math.nan
    return math.fsum(example_loss(ex, params, config)[0] for ex in examples) / len(examples)


def train(
    config: TrainConfig,
    train_examples: Sequence[Example],
    val_examples: Sequence[Example] = (),
    vocab: Vocabulary | None = None,
    tags: TagVocabulary | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
    params: dict[str, np.ndarray] | None = None,
) -> tuple[Checkpoint, list[EpochLog]]:
    """Per-example Adam training with early stopping on the validation loss.

    Returns the checkpoint of the best epoch (validation loss is measured on
    the float32-narrowed snapshot, so a reloaded checkpoint reproduces it).
    """
    if not train_examples:
        raise ValueError("training set is empty")
    with_cnn = any(ex.features is None for ex in train_examples)
    params = dict(params) if params is not None else init_params(config, with_cnn=with_cnn)
    lr_map = {name: learning_rate(name, config) for name in params}
    adam = AdamState.fresh(params, config)
    extra = dict(vocab=vocab.words if vocab else None, tags=tags.id_to_tag if tags else None)
    best = Checkpoint.snapshot(params, adam, config, epoch=0, **extra)
    rows: list[EpochLog] = []
    rng = np.random.default_rng(config.seed)
    since_best = 0

    for epoch in range(1, config.epochs + 1):
        totals = dict.fromkeys(("loss",) + COMPONENTS, 0.0)
        for idx in rng.permutation(len(train_examples)):
            ex = train_examples[idx]
            loss, comps, grads = loss_and_grads(ex, params, config)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise DivergenceError(f"non-finite loss or gradient on example {ex.id!r} in epoch {epoch}")
            params, adam = adam_step(params, grads, adam, lr_map)
            totals["loss"] += loss
            for k in COMPONENTS:
                totals[k] += comps[k]
        n = len(train_examples)
        snap = Checkpoint.snapshot(params, adam, config, epoch=epoch, **extra)
        val_loss = evaluate_loss(val_examples, snap.params, config) if val_examples else totals["loss"] / n
        if not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss in epoch {epoch}")
        row = EpochLog(epoch, totals["loss"] / n, val_loss, *(totals[k] / n for k in COMPONENTS))
        rows.append(row)
        log.info("epoch %d train %.6f val %.6f", epoch, row.train_loss, row.val_loss)
        if on_epoch:
            on_epoch(row)
        if val_loss < best.best_val_loss:
            snap.best_val_loss = val_loss
            best = snap
            since_best = 0
        else:
            since_best += 1
            if since_best > config.patience:
                break
    return best, rows


# ---------------------------------------------------------------------------
# inference


def generate(example: Example, params: Mapping[str, np.ndarray], config: TrainConfig,
             rng: np.random.Generator | None = None) -> tuple[Report, AttentionRecord]:
    tape = Tape()
    nodes = tape.bind(params)
    v, _, sem = encode_example(tape, nodes, example, config, use_truth=False)
    return generate_report(v, sem.embeddings, nodes, config.s_max, config.stop_threshold, config.t_max,
                           config.attention_mode, rng, sem.tag_ids)
