"""Run configuration: a flat dataclass read from / written to key=value text."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

ATTENTION_MODES = ("none", "visual_only", "semantic_only", "co")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # widths; defaults are the full-scale settings
    feature_dim: int = 512          # D
    tag_embed_dim: int = 512        # E
    context_dim: int = 512          # C
    topic_dim: int = 512            # K (= word embedding width)
    hidden_dim: int = 512           # H
    attention_dim: int = 512        # H_a
    stop_hidden_dim: int = 512      # H_s
    mlc_hidden_dim: int = 512
    num_tags: int = 0               # L, filled from the tag vocabulary
    vocab_size: int = 0             # V, filled from the word vocabulary
    top_m: int = 10                 # M
    # raw-image encoder
    image_size: int = 56
    conv_channels: int = 8
    # loss weights
    lambda_tag: float = 1.0
    lambda_sent: float = 1.0
    lambda_word: float = 1.0
    lambda_reg: float = 1.0
    # optimisation
    lr_cnn: float = 1e-5
    lr_rnn: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    init_scale: float = 0.08
    epochs: int = 50
    patience: int = 5
    seed: int = 0
    # decoding
    stop_threshold: float = 0.5
    s_max: int = 12
    t_max: int = 30
    attention_mode: str = "co"
    teacher_tags: bool = False
    # corpus
    max_vocab: int = 1000
    tag_k: int = 5
    val_count: int = 500
    test_count: int = 500

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}, got {self.attention_mode!r}")
        for name in ("lambda_tag", "lambda_sent", "lambda_word", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lr_cnn <= 0 or self.lr_rnn <= 0:
            raise ConfigError("learning rates must be > 0")
        if not 0.0 < self.stop_threshold < 1.0:
            raise ConfigError("stop_threshold must lie in (0, 1)")
        if self.s_max < 1 or self.t_max < 1 or self.top_m < 1:
            raise ConfigError("s_max, t_max and top_m must be >= 1")
        if self.patience < 0 or self.epochs < 0:
            raise ConfigError("epochs and patience must be >= 0")

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        """Tiny widths used by the tests and gradient checks."""
        base = dict(
            feature_dim=8, tag_embed_dim=8, context_dim=8, topic_dim=8, hidden_dim=8,
            attention_dim=8, stop_hidden_dim=8, mlc_hidden_dim=8, num_tags=6, vocab_size=20,
            top_m=3, image_size=8, conv_channels=4, s_max=4, t_max=10,
        )
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # -- key=value text ---------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        values = parse_overrides(
            line for line in text.splitlines() if line.strip() and not line.lstrip().startswith("#")
        )
        return (base or cls()).replace(**values)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_overrides(lines) -> dict:
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for line in lines:
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kind = types[key]
        try:
            if kind == "bool":
                if raw.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(raw)
                out[key] = raw.lower() in ("true", "1")
            elif kind == "int":
                out[key] = int(raw)
            elif kind == "float":
                out[key] = float(raw)
            else:
                out[key] = raw
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return out
