"""Parameter layout for the full model and its learning-rate groups."""

from __future__ import annotations

import numpy as np

from .config import TrainConfig

# names with these prefixes train at the encoder learning rate
ENCODER_PREFIXES = ("cnn.", "mlc.")


def parameter_shapes(config: TrainConfig, with_cnn: bool = False) -> dict[str, tuple]:
    D, E, C, K, H = (config.feature_dim, config.tag_embed_dim, config.context_dim,
                     config.topic_dim, config.hidden_dim)
    Ha, Hs, Hm = config.attention_dim, config.stop_hidden_dim, config.mlc_hidden_dim
    L, V = config.num_tags, config.vocab_size
    if L < 1 or V < 5:
        raise ValueError(f"num_tags ({L}) and vocab_size ({V}) must be set from the corpus")
    shapes: dict[str, tuple] = {}
    if with_cnn:
        ch = config.conv_channels
        shapes.update({
            "cnn.conv1.w": (ch, 1, 3, 3), "cnn.conv1.b": (ch,),
            "cnn.conv2.w": (D, ch, 3, 3), "cnn.conv2.b": (D,),
        })
    shapes.update({
        "mlc.W1": (Hm, D), "mlc.b1": (Hm,), "mlc.W2": (L, Hm), "mlc.b2": (L,),
        "tag_embed": (L, E),
        "att.W_v": (Ha, D), "att.W_vh": (Ha, H), "att.w_v": (1, Ha),
        "att.W_a": (Ha, E), "att.W_ah": (Ha, H), "att.w_a": (1, Ha),
        "att.W_fc": (C, D + E),
        "sent.lstm.W_x": (4 * H, C), "sent.lstm.W_h": (4 * H, H), "sent.lstm.b": (4 * H,),
        "sent.W_t_h": (K, H), "sent.W_t_ctx": (K, C),
        "sent.W_stop": (2, Hs), "sent.W_stop_prev": (Hs, H), "sent.W_stop_cur": (Hs, H),
        "word.lstm.W_x": (4 * H, K), "word.lstm.W_h": (4 * H, H), "word.lstm.b": (4 * H,),
        "word.embed": (V, K),
        "word.W_out": (V, H),
    })
    return shapes


def init_params(config: TrainConfig, with_cnn: bool = False, seed: int | None = None) -> dict[str, np.ndarray]:
    """Uniform(-init_scale, init_scale) everywhere; LSTM forget-gate biases start at 1."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = {}
    for name, shape in parameter_shapes(config, with_cnn).items():
        params[name] = rng.uniform(-config.init_scale, config.init_scale, size=shape)
    H = config.hidden_dim
    for prefix in ("sent.lstm", "word.lstm"):
        bias = np.zeros(4 * H)
        bias[H:2 * H] = 1.0  # gate order: input, forget, cell, output
        params[f"{prefix}.b"] = bias
    return params


def learning_rate(name: str, config: TrainConfig) -> float:
    return config.lr_cnn if name.startswith(ENCODER_PREFIXES) else config.lr_rnn
