"""Text-guided attention layer and the tied-embedding LSTM decoder.

Attention is computed once per image from the region features and the
guidance-caption embedding; its context vector becomes the decoder's first
input. Everything is batched over a leading axis B.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .corpus import BOS, EOS


@dataclass(frozen=True)
class ModelConfig:
    P: int
    S: int
    V: int
    R: int
    D: int = 512
    E: int = 512
    H: int = 512
    lambda_ent: float = 0.05
    dropout: float = 0.5
    tie_weights: bool = True
    attention: str = "text"  # "text" or "uniform" (average pooling)
    att_activation: str = "tanh"  # "tanh" or "none"
    att_bias: bool = False
    init_scale: float = 0.08
    forget_bias: float = 1.0

    def __post_init__(self):
        if self.tie_weights and self.E != self.H:
            raise ValueError("tied embedding/prediction weights need E == H")
        if self.attention not in ("text", "uniform"):
            raise ValueError(f"unknown attention mode {self.attention!r}")
        if self.att_activation not in ("tanh", "none"):
            raise ValueError(f"unknown attention activation {self.att_activation!r}")

    @property
    def regions(self) -> int:
        return self.R * self.R

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Parameter]:
    rng = np.random.default_rng(seed)

    def u(*shape):
        return rng.uniform(-cfg.init_scale, cfg.init_scale, size=shape)

    shapes = {}
    if cfg.attention == "text":
        shapes.update(W_I=(cfg.P, cfg.D), W_S=(cfg.S, cfg.D), W_att=(cfg.D, 1))
    shapes.update(W_z=(cfg.P, cfg.E), W_e=(cfg.V, cfg.E),
                  W_x=(cfg.E, 4 * cfg.H), W_hh=(cfg.H, 4 * cfg.H))
    if not cfg.tie_weights:
        shapes["W_h"] = (cfg.V, cfg.H)
    params = {name: Parameter(u(*shape), name) for name, shape in shapes.items()}
    if cfg.attention == "text" and cfg.att_bias:
        params["b_att"] = Parameter(np.zeros(cfg.D), "b_att")
    b = np.zeros(4 * cfg.H)
    b[cfg.H:2 * cfg.H] = cfg.forget_bias  # gate order: input, forget, cell, output
    params["b_lstm"] = Parameter(b, "b_lstm")
    return params


class AttentionResult(NamedTuple):
    alpha: Tensor  # (B, N)
    z: Tensor  # (B, P)
    entropy: Tensor  # (B,) sum of alpha * log(alpha)


class DecoderState(NamedTuple):
    h: Tensor
    c: Tensor
    t: int


def attend(regions, sentence, params: dict, cfg: ModelConfig) -> AttentionResult:
    """Softmax attention over regions (B, N, P) conditioned on sentence embeddings (B, S)."""
    regions, sentence = ad.as_tensor(regions), ad.as_tensor(sentence)
    B, N, P = regions.shape
    if P != cfg.P or sentence.shape != (B, cfg.S):
        raise ad.ShapeError(f"attend: regions {regions.shape}, sentence {sentence.shape}")
    img = regions @ params["W_I"]  # (B, N, D)
    txt = sentence @ params["W_S"]  # (B, D)
    joint = img + ad.reshape(txt, (B, 1, cfg.D))
    if "b_att" in params:
        joint = joint + params["b_att"]
    if cfg.att_activation == "tanh":
        joint = ad.tanh(joint)
    logits = ad.reshape(joint @ params["W_att"], (B, N))
    log_alpha = ad.log_softmax(logits)
    alpha = ad.softmax(logits)
    z = ad.reshape(ad.reshape(alpha, (B, 1, N)) @ regions, (B, P))
    entropy = ad.sum(alpha * log_alpha, axis=1)
    return AttentionResult(alpha, z, entropy)


def uniform_attend(regions) -> AttentionResult:
    """Average pooling expressed as attention with equal weights."""
    regions = ad.as_tensor(regions)
    B, N, P = regions.shape
    alpha = Tensor(np.full((B, N), 1.0 / N))
    z = ad.reshape(ad.reshape(alpha, (B, 1, N)) @ regions, (B, P))
    return AttentionResult(alpha, z, Tensor(np.full(B, -np.log(N))))


def context(regions, sentence, params: dict, cfg: ModelConfig) -> AttentionResult:
    if cfg.attention == "uniform":
        return uniform_attend(regions)
    return attend(regions, sentence, params, cfg)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, params: dict, H: int) -> tuple[Tensor, Tensor]:
    gates = x @ params["W_x"] + h @ params["W_hh"] + params["b_lstm"]
    i = ad.sigmoid(gates[:, :H])
    f = ad.sigmoid(gates[:, H:2 * H])
    g = ad.tanh(gates[:, 2 * H:3 * H])
    o = ad.sigmoid(gates[:, 3 * H:])
    c_new = f * c + i * g
    return o * ad.tanh(c_new), c_new


def decode_init(z, params: dict, cfg: ModelConfig) -> DecoderState:
    """Feed the embedded context vector as the word at t=-1, from an all-zero state."""
    z = ad.as_tensor(z)
    B = z.shape[0]
    x = z @ params["W_z"]
    zero = Tensor(np.zeros((B, cfg.H)))
    h, c = lstm_cell(x, zero, zero, params, cfg.H)
    return DecoderState(h, c, -1)


def output_weights(params: dict) -> Tensor:
    return params["W_h"] if "W_h" in params else params["W_e"]


def decode_step(state: DecoderState, word_ids, params: dict, cfg: ModelConfig,
                mask: np.ndarray | None = None) -> tuple[DecoderState, Tensor]:
    """Advance one word. Returns the new state and the next-word logits (B, V).

    ``mask`` is an inverted-dropout mask applied to h before the projection.
    """
    x = ad.embedding(params["W_e"], word_ids)
    h, c = lstm_cell(x, state.h, state.c, params, cfg.H)
    out = h if mask is None else ad.dropout(h, 0.0, mask=mask)
    logits = out @ ad.transpose(output_weights(params))
    return DecoderState(h, c, state.t + 1), logits


def probabilities(logits: Tensor) -> np.ndarray:
    v = logits.value - logits.value.max(axis=-1, keepdims=True)
    e = np.exp(v)
    return e / e.sum(axis=-1, keepdims=True)


def pad_targets(sequences: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad BOS..EOS id sequences with EOS. Returns (ids, lengths)."""
    lengths = np.array([len(s) for s in sequences])
    if np.any(lengths < 3):
        raise ValueError("target must contain at least one word between BOS and EOS")
    ids = np.full((len(sequences), lengths.max()), EOS, dtype=np.int64)
    for b, s in enumerate(sequences):
        if s[0] != BOS or s[-1] != EOS:
            raise ValueError("targets must be BOS ... EOS encoded")
        ids[b, :len(s)] = s
    return ids, lengths


def batch_loss(regions, sentences, targets: Sequence[Sequence[int]], params: dict,
               cfg: ModelConfig, ss_prob: float = 1.0, rng: np.random.Generator | None = None,
               dropout: float | None = None, masks: list | None = None) -> tuple[Tensor, AttentionResult]:
    """Mean over sequences of (summed word NLL + lambda_ent * sum alpha log alpha).

    Each input word after BOS is the ground truth with probability ``ss_prob``,
    otherwise the argmax of the previous step's prediction. ``masks`` fixes the
    dropout masks (one (B, H) array per step) for deterministic replays.
    """
    if not 0.0 <= ss_prob <= 1.0:
        raise ValueError("ss_prob must be in [0, 1]")
    rate = cfg.dropout if dropout is None else dropout
    ids, lengths = pad_targets(targets)
    B, L = ids.shape
    att = context(regions, sentences, params, cfg)
    state = decode_init(att.z, params, cfg)
    total = Tensor(np.zeros(B))
    prev_logits = None
    for t in range(L - 1):
        words = ids[:, t]
        if t > 0 and ss_prob < 1.0:
            keep = rng.random(B) < ss_prob
            words = np.where(keep, words, prev_logits.value.argmax(axis=-1))
        if masks is not None:
            mask = masks[t]
        elif rate > 0.0:
            mask = ad.dropout_mask((B, cfg.H), rate, rng)
        else:
            mask = None
        state, logits = decode_step(state, words, params, cfg, mask)
        nll = ad.cross_entropy(logits, ids[:, t + 1])
        total = total + nll * (t + 1 < lengths).astype(np.float64)
        prev_logits = logits
    per_seq = total + att.entropy * cfg.lambda_ent
    return ad.mean(per_seq), att


def sequence_loss(regions: np.ndarray, sentence: np.ndarray, target: Sequence[int], params: dict,
                  cfg: ModelConfig, ss_prob: float = 1.0,
                  rng: np.random.Generator | None = None, dropout: float | None = None) -> Tensor:
    """Loss of a single (image, guidance, caption) triple."""
    loss, _ = batch_loss(np.asarray(regions)[None], np.asarray(sentence)[None], [target],
                         params, cfg, ss_prob, rng, dropout)
    return loss


COMPOSITE_STEP = 1e-4  # at 1e-5 roundoff dominates gradient entries near 1e-7


def full_graph_gradcheck(seed: int = 0, h: float = COMPOSITE_STEP) -> float:
    """Finite-difference check of the whole loss graph at a tiny size.

    Shapes: P=6, R=2, S=5, D=4, H=E=7, V=11, three words plus BOS/EOS. Dropout
    masks are drawn once and replayed so the loss is a deterministic function.
    """
    cfg = ModelConfig(P=6, S=5, V=11, R=2, D=4, E=7, H=7, dropout=0.5, att_bias=True)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    for p in params.values():
        p.value = rng.uniform(-0.5, 0.5, p.shape)
    regions = rng.standard_normal((1, cfg.regions, cfg.P))
    sentence = rng.standard_normal((1, cfg.S))
    target = [BOS] + [int(w) for w in rng.integers(3, cfg.V, size=3)] + [EOS]
    masks = [ad.dropout_mask((1, cfg.H), cfg.dropout, rng) for _ in range(len(target) - 1)]

    def loss():
        return batch_loss(regions, sentence, [target], params, cfg, masks=masks)[0]

    return ad.gradcheck(loss, list(params.values()), h)
