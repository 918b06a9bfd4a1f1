"""Visual and semantic soft attention, the joint context vector, and the attention regulariser."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Node

# bumped on every attention evaluation; lets callers verify a mode skips attention
CALL_COUNTS: Counter = Counter()


@dataclass
class AttentionRecord:
    """Per-step weights, one column per sentence; a branch is None when not attended."""

    alpha: np.ndarray | None  # [N, S]
    beta: np.ndarray | None   # [M, S]
    tag_ids: list[int] | None = None

    @classmethod
    def from_steps(cls, alphas: Sequence, betas: Sequence, tag_ids=None) -> "AttentionRecord":
        def columns(steps):
            if not steps:
                return None
            return np.stack([s.value if isinstance(s, Node) else np.asarray(s) for s in steps], axis=1)

        return cls(columns(alphas), columns(betas), tag_ids)

    def to_json(self) -> dict:
        return {
            "alpha": None if self.alpha is None else self.alpha.tolist(),
            "beta": None if self.beta is None else self.beta.tolist(),
            "tag_ids": self.tag_ids,
        }


def _attend(x: Node, h_prev: Node, W_x: Node, W_h: Node, w_att: Node) -> tuple[Node, Node]:
    if x.value.ndim != 2 or x.shape[1] != W_x.shape[1]:
        raise DimensionError(f"attention input {x.shape} vs projection {W_x.shape}")
    if h_prev.shape != (W_h.shape[1],):
        raise DimensionError(f"hidden state {h_prev.shape} vs projection {W_h.shape}")
    hidden = ad.tanh(x @ ad.transpose(W_x) + W_h @ h_prev)     # [n, Ha]
    scores = ad.reshape(hidden @ ad.transpose(w_att), (x.shape[0],))
    weights = ad.softmax(scores)
    return weights, weights @ x


def visual_attention(v: Node, h_prev: Node, nodes: dict[str, Node]) -> tuple[Node, Node]:
    """(alpha [N], v_att [D]) for region features v [N, D]."""
    CALL_COUNTS["visual"] += 1
    return _attend(v, h_prev, nodes["att.W_v"], nodes["att.W_vh"], nodes["att.w_v"])


def semantic_attention(a: Node, h_prev: Node, nodes: dict[str, Node]) -> tuple[Node, Node]:
    """(beta [M], a_att [E]) for tag embeddings a [M, E]."""
    CALL_COUNTS["semantic"] += 1
    return _attend(a, h_prev, nodes["att.W_a"], nodes["att.W_ah"], nodes["att.w_a"])


def joint_context(v_att: Node, a_att: Node, nodes: dict[str, Node]) -> Node:
    W_fc = nodes["att.W_fc"]
    if v_att.shape[-1] + a_att.shape[-1] != W_fc.shape[1]:
        raise DimensionError(f"context inputs {v_att.shape}+{a_att.shape} vs W_fc {W_fc.shape}")
    return W_fc @ ad.concat(v_att, a_att)


def ablation_context(mode: str, v_att, a_att, v_mean: Node, a_mean: Node, nodes: dict[str, Node]) -> Node:
    """Joint context with unattended slots replaced by plain means."""
    if mode == "co":
        return joint_context(v_att, a_att, nodes)
    if mode == "visual_only":
        return joint_context(v_att, a_mean, nodes)
    if mode == "semantic_only":
        return joint_context(v_mean, a_att, nodes)
    if mode == "none":
        return joint_context(v_mean, a_mean, nodes)
    raise ValueError(f"unknown attention mode {mode!r}")


def step_context(mode: str, v: Node, a: Node, h_prev: Node, nodes: dict[str, Node]):
    """Context for one sentence step: (ctx, alpha or None, beta or None).

    Only the branches the mode attends to are evaluated.
    """
    alpha = beta = v_att = a_att = v_mean = a_mean = None
    if mode in ("co", "visual_only"):
        alpha, v_att = visual_attention(v, h_prev, nodes)
    else:
        v_mean = ad.mean(v, axis=0)
    if mode in ("co", "semantic_only"):
        beta, a_att = semantic_attention(a, h_prev, nodes)
    else:
        a_mean = ad.mean(a, axis=0)
    return ablation_context(mode, v_att, a_att, v_mean, a_mean, nodes), alpha, beta


def regularizer_node(alphas: Sequence[Node], betas: Sequence[Node], lambda_reg: float, tape: ad.Tape) -> Node:
    """lambda * [sum_n (1 - sum_s alpha)^2 + sum_m (1 - sum_s beta)^2] on the tape."""
    total = tape.constant(0.0)
    for steps in (alphas, betas):
        if not steps:
            continue
        cumulative = steps[0]
        for s in steps[1:]:
            cumulative = cumulative + s
        total = total + ad.sum(ad.square(ad.sub(1.0, cumulative)))
    return ad.scale(total, lambda_reg)


def attention_regularizer(record: AttentionRecord, lambda_reg: float) -> float:
    total = 0.0
    for mat in (record.alpha, record.beta):
        if mat is not None:
            total += float(np.sum((1.0 - np.asarray(mat).sum(axis=1)) ** 2))
    return lambda_reg * total


def save_attention(path: str | Path, records: dict[str, AttentionRecord]) -> None:
    payload = [{"id": doc_id, **rec.to_json()} for doc_id, rec in records.items()]
    Path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8")
