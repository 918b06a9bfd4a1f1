"""Region features, multi-label tag prediction and semantic (tag-embedding) features."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, DomainError, Node, Tape
from .tensorio import FormatError, load_tensor


@dataclass
class SemanticFeatureSet:
    tag_ids: list[int]
    embeddings: Node  # [M, E]


def load_region_features(path: str | Path) -> np.ndarray:
    """Read an [N, D] feature file."""
    arr = load_tensor(path)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise FormatError(f"feature file {path} has shape {arr.shape}, expected [N, D]", 4)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"feature file {path} holds non-finite values", 4)
    return arr


def load_image(path: str | Path) -> np.ndarray:
    """Grayscale pixel grid in [0, 1]; HGT1 [H, W] tensors or anything Pillow reads."""
    path = Path(path)
    if path.suffix in (".hgt", ".bin"):
        arr = load_tensor(path)
    else:
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    if arr.ndim != 2:
        raise FormatError(f"image {path} has shape {arr.shape}, expected [H, W]", 4)
    return arr


def cnn_features(image: Node, nodes: dict[str, Node]) -> Node:
    """Two conv+tanh+2x2 mean-pool stages; every cell of the last map is a region."""
    if image.value.ndim != 2 or image.shape[0] % 4 or image.shape[1] % 4:
        raise DimensionError(f"image shape {image.shape} must be 2-D with sides divisible by 4")
    x = ad.reshape(image, (1,) + image.shape)
    x = ad.meanpool2(ad.tanh(ad.conv2d(x, nodes["cnn.conv1.w"], nodes["cnn.conv1.b"])))
    x = ad.meanpool2(ad.tanh(ad.conv2d(x, nodes["cnn.conv2.w"], nodes["cnn.conv2.b"])))
    d, h, w = x.shape
    return ad.transpose(ad.reshape(x, (d, h * w)))


def extract_region_features(tape: Tape, nodes: dict[str, Node], features=None, image=None) -> Node:
    """[N, D] region features from a feature array/file (pass-through) or a raw image."""
    if features is not None:
        arr = load_region_features(features) if isinstance(features, (str, Path)) else np.asarray(features, float)
        if arr.ndim != 2:
            raise DimensionError(f"region features must be [N, D], got {arr.shape}")
        return tape.constant(arr)
    if image is None:
        raise DomainError("need either region features or an image")
    arr = load_image(image) if isinstance(image, (str, Path)) else np.asarray(image, float)
    return cnn_features(tape.constant(arr), nodes)


def predict_tags(v: Node, nodes: dict[str, Node]) -> Node:
    """Softmax over the L outputs of a two-layer MLC head on mean-pooled regions."""
    if v.shape[-1] != nodes["mlc.W1"].shape[1]:
        raise DimensionError(f"features {v.shape} vs MLC input {nodes['mlc.W1'].shape}")
    pooled = ad.mean(v, axis=0)
    hidden = ad.tanh(nodes["mlc.W1"] @ pooled + nodes["mlc.b1"])
    return ad.softmax(nodes["mlc.W2"] @ hidden + nodes["mlc.b2"])


def tag_target(labels) -> np.ndarray:
    """Normalise a binary tag vector by its L1 norm."""
    l = np.asarray(labels, dtype=np.float64)
    total = l.sum()
    if total <= 0:
        raise DomainError("tag vector has no positive entries")
    return l / total


def top_m_indices(probs: np.ndarray, m: int) -> list[int]:
    probs = np.asarray(probs)
    if not 1 <= m <= probs.shape[0]:
        raise DomainError(f"m={m} outside 1..{probs.shape[0]}")
    # stable sort keeps the lower id first among ties
    return [int(i) for i in np.argsort(-probs, kind="stable")[:m]]


def top_m_semantic_features(probs, nodes: dict[str, Node], m: int, forced: list[int] | None = None) -> SemanticFeatureSet:
    """Embeddings of the ``m`` most likely tags, most likely first.

    ``forced`` tag ids (e.g. ground truth) take the leading slots and the rest
    are filled from the prediction.
    """
    values = probs.value if isinstance(probs, Node) else probs
    if forced:
        ids = list(dict.fromkeys(forced))[:m]
        ids += [i for i in top_m_indices(values, len(values)) if i not in ids][: m - len(ids)]
    else:
        ids = top_m_indices(values, m)
    return SemanticFeatureSet(ids, ad.take(nodes["tag_embed"], np.array(ids)))
