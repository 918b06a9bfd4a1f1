"""Sentence LSTM (topics + stop control) and word LSTM; report unrolling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Node, Tape
from .coattention import AttentionRecord, step_context
from .corpus import END, PAD, START

STOP, CONTINUE = 1, 0  # index into the two-way stop distribution


@dataclass
class Report:
    sentences: list[list[int]]
    stop_probs: list[float]
    truncated: bool = False


@dataclass
class TeacherForcedOutputs:
    word_dists: list[list[Node]]    # per sentence: T_s + 1 distributions over V
    stop_dists: list[Node]          # per sentence: [p_continue, p_stop]
    alphas: list[Node] = field(default_factory=list)
    betas: list[Node] = field(default_factory=list)
    tag_ids: list[int] | None = None

    def record(self) -> AttentionRecord:
        return AttentionRecord.from_steps(self.alphas, self.betas, self.tag_ids)


def lstm_step(x: Node, h: Node, c: Node, nodes: dict[str, Node], prefix: str) -> tuple[Node, Node]:
    W_x, W_h, b = nodes[f"{prefix}.W_x"], nodes[f"{prefix}.W_h"], nodes[f"{prefix}.b"]
    H = W_h.shape[1]
    if x.shape != (W_x.shape[1],) or h.shape != (H,) or c.shape != (H,):
        raise DimensionError(f"{prefix}: x {x.shape}, h {h.shape}, c {c.shape} vs W_x {W_x.shape}")
    z = W_x @ x + W_h @ h + b
    i = ad.sigmoid(z[0:H])
    f = ad.sigmoid(z[H:2 * H])
    g = ad.tanh(z[2 * H:3 * H])
    o = ad.sigmoid(z[3 * H:4 * H])
    c_next = f * c + i * g
    return o * ad.tanh(c_next), c_next


def sentence_step(h_prev: Node, c_prev: Node, ctx: Node, nodes: dict[str, Node]):
    """One sentence-LSTM step: (h, c, topic, stop distribution [continue, stop])."""
    h, c = lstm_step(ctx, h_prev, c_prev, nodes, "sent.lstm")
    topic = ad.tanh(nodes["sent.W_t_h"] @ h + nodes["sent.W_t_ctx"] @ ctx)
    stop_hidden = ad.tanh(nodes["sent.W_stop_prev"] @ h_prev + nodes["sent.W_stop_cur"] @ h)
    stop_dist = ad.softmax(nodes["sent.W_stop"] @ stop_hidden)
    return h, c, topic, stop_dist


def _word_state(tape: Tape, nodes):
    H = nodes["word.lstm.W_h"].shape[1]
    return tape.constant(np.zeros(H)), tape.constant(np.zeros(H))


def word_distributions(topic: Node, words: Sequence[int], nodes: dict[str, Node]) -> list[Node]:
    """Teacher-forced: feed topic, START, w_1..w_T; predict w_1..w_T then END."""
    tape = topic.tape
    h, c = _word_state(tape, nodes)
    h, c = lstm_step(topic, h, c, nodes, "word.lstm")
    embed, W_out = nodes["word.embed"], nodes["word.W_out"]
    dists = []
    for token in [START, *words]:
        h, c = lstm_step(embed[token], h, c, nodes, "word.lstm")
        dists.append(ad.softmax(W_out @ h))
    return dists


def generate_sentence(
    topic: Node, nodes: dict[str, Node], t_max: int, rng: np.random.Generator | None = None
) -> list[int]:
    """Greedy decoding, or sampling when ``rng`` is given; END is not emitted."""
    tape = topic.tape
    h, c = _word_state(tape, nodes)
    h, c = lstm_step(topic, h, c, nodes, "word.lstm")
    embed, W_out = nodes["word.embed"], nodes["word.W_out"]
    out: list[int] = []
    token = START
    while len(out) < t_max:
        h, c = lstm_step(embed[token], h, c, nodes, "word.lstm")
        logits = (W_out @ h).value.copy()
        logits[[PAD, START]] = -np.inf
        if rng is None:
            token = int(np.argmax(logits))
        else:
            p = np.exp(logits - logits.max())
            token = int(rng.choice(len(p), p=p / p.sum()))
        if token == END:
            break
        out.append(token)
    return out


def _zeros(tape: Tape, nodes):
    H = nodes["sent.lstm.W_h"].shape[1]
    return tape.constant(np.zeros(H)), tape.constant(np.zeros(H))


def generate_report(
    v: Node, a: Node, nodes: dict[str, Node], s_max: int, stop_threshold: float,
    t_max: int, mode: str = "co", rng: np.random.Generator | None = None, tag_ids=None,
) -> tuple[Report, AttentionRecord]:
    """Unroll sentences until p(STOP) exceeds the threshold (that sentence is kept)."""
    if s_max < 1:
        raise ValueError("s_max must be >= 1")
    tape = v.tape
    h, c = _zeros(tape, nodes)
    sentences, stop_probs, alphas, betas = [], [], [], []
    stopped = False
    for _ in range(s_max):
        ctx, alpha, beta = step_context(mode, v, a, h, nodes)
        h, c, topic, stop_dist = sentence_step(h, c, ctx, nodes)
        alphas += [alpha] if alpha is not None else []
        betas += [beta] if beta is not None else []
        sentences.append(generate_sentence(topic, nodes, t_max, rng))
        p_stop = float(stop_dist.value[STOP])
        stop_probs.append(p_stop)
        if p_stop > stop_threshold:
            stopped = True
            break
    report = Report(sentences, stop_probs, truncated=not stopped)
    return report, AttentionRecord.from_steps(alphas, betas, tag_ids)


def teacher_forced_pass(
    sentences: Sequence[Sequence[int]], v: Node, a: Node, nodes: dict[str, Node],
    mode: str = "co", s_max: int | None = None,
) -> TeacherForcedOutputs:
    """Unroll exactly len(sentences) sentence steps with ground-truth words."""
    if not sentences:
        raise ValueError("document has no sentences")
    if s_max is not None and len(sentences) > s_max:
        raise ValueError(f"document has {len(sentences)} sentences, s_max is {s_max}")
    tape = v.tape
    h, c = _zeros(tape, nodes)
    out = TeacherForcedOutputs([], [])
    for words in sentences:
        ctx, alpha, beta = step_context(mode, v, a, h, nodes)
        if alpha is not None:
            out.alphas.append(alpha)
        if beta is not None:
            out.betas.append(beta)
        h, c, topic, stop_dist = sentence_step(h, c, ctx, nodes)
        out.stop_dists.append(stop_dist)
        out.word_dists.append(word_distributions(topic, words, nodes))
    return out
