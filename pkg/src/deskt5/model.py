"""T5 v1.1-style encoder-decoder built on :mod:`deskt5.tensor`.

Architecture, following the public T5 v1.1 configuration:

* RMS normalisation before every sub-layer (no mean subtraction, no bias),
  plus a final norm after each stack.
* Gated-GELU feed-forward: ``(gelu(x @ wi0) * (x @ wi1)) @ wo``.
* One input embedding shared by encoder and decoder; a separate, untied
  output projection (``lm_head``) without rescaling.
* Relative position bias computed by the first layer of each stack and
  reused by every later layer. Cross-attention has no position bias.
* Attention logits are not divided by ``sqrt(d_kv)``; the initialisation
  scale of the query projection absorbs it.

Weights are stored ``[in, out]`` so that a projection is ``x @ W``.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -1e9


class UnknownPresetError(KeyError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    d_ff: int = 128
    num_layers_enc: int = 2
    num_layers_dec: int = 2
    num_heads: int = 4
    d_kv: int = 16
    vocab_size: int = 384
    num_buckets: int = 32
    max_distance: int = 128
    tie_embeddings: bool = False
    dropout: float = 0.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("d_model", "d_ff", "num_heads", "d_kv", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.num_layers_enc < 0 or self.num_layers_dec < 0:
            raise ValueError("layer counts must be nonnegative")
        if self.num_buckets <= 0 or self.num_buckets % 2:
            raise ValueError("num_buckets must be a positive even number")
        if self.max_distance <= self.num_buckets // 4:
            raise ValueError("max_distance must exceed num_buckets / 4")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def inner_dim(self) -> int:
        return self.num_heads * self.d_kv

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS: dict[str, ModelConfig] = {
    "nano": ModelConfig(),
    "small": ModelConfig(
        d_model=512, d_ff=1024, num_layers_enc=8, num_layers_dec=8, num_heads=6, d_kv=64, vocab_size=32128
    ),
    "base": ModelConfig(
        d_model=768, d_ff=2048, num_layers_enc=12, num_layers_dec=12, num_heads=12, d_kv=64, vocab_size=32128
    ),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise UnknownPresetError(f"unknown preset {name!r}; choose one of {sorted(PRESETS)}") from None


# ----------------------------------------------------------------- schema
def _attn_shapes(prefix: str, cfg: ModelConfig):
    d, inner = cfg.d_model, cfg.inner_dim
    yield f"{prefix}.q", (d, inner)
    yield f"{prefix}.k", (d, inner)
    yield f"{prefix}.v", (d, inner)
    yield f"{prefix}.o", (inner, d)


def _ffn_shapes(prefix: str, cfg: ModelConfig):
    yield f"{prefix}.wi0", (cfg.d_model, cfg.d_ff)
    yield f"{prefix}.wi1", (cfg.d_model, cfg.d_ff)
    yield f"{prefix}.wo", (cfg.d_ff, cfg.d_model)


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Every parameter path and its shape, in a fixed order."""
    d = cfg.d_model
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["shared.embedding"] = (cfg.vocab_size, d)
    if cfg.num_layers_enc:
        shapes["encoder.rel_bias"] = (cfg.num_buckets, cfg.num_heads)
    for i in range(cfg.num_layers_enc):
        p = f"encoder.block{i}"
        shapes[f"{p}.attn_norm"] = (d,)
        shapes.update(_attn_shapes(f"{p}.attn", cfg))
        shapes[f"{p}.ffn_norm"] = (d,)
        shapes.update(_ffn_shapes(f"{p}.ffn", cfg))
    shapes["encoder.final_norm"] = (d,)
    if cfg.num_layers_dec:
        shapes["decoder.rel_bias"] = (cfg.num_buckets, cfg.num_heads)
    for i in range(cfg.num_layers_dec):
        p = f"decoder.block{i}"
        shapes[f"{p}.self_attn_norm"] = (d,)
        shapes.update(_attn_shapes(f"{p}.self_attn", cfg))
        shapes[f"{p}.cross_attn_norm"] = (d,)
        shapes.update(_attn_shapes(f"{p}.cross_attn", cfg))
        shapes[f"{p}.ffn_norm"] = (d,)
        shapes.update(_ffn_shapes(f"{p}.ffn", cfg))
    shapes["decoder.final_norm"] = (d,)
    if not cfg.tie_embeddings:
        shapes["lm_head"] = (d, cfg.vocab_size)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count.

    embeddings   V*d (+ V*d for an untied output head)
    attention    4 * d * H*d_kv per attention block
    feed-forward 3 * d * d_ff (two input projections, one output)
    norms        d per sub-layer, plus one final norm per stack
    rel. bias    buckets * H for each non-empty stack
    """
    d, V = cfg.d_model, cfg.vocab_size
    attn = 4 * d * cfg.inner_dim
    ffn = 3 * d * cfg.d_ff
    enc_layer = attn + ffn + 2 * d
    dec_layer = 2 * attn + ffn + 3 * d
    bias = cfg.num_buckets * cfg.num_heads
    total = V * d * (1 if cfg.tie_embeddings else 2)
    total += cfg.num_layers_enc * enc_layer + cfg.num_layers_dec * dec_layer
    total += 2 * d
    total += bias * (int(cfg.num_layers_enc > 0) + int(cfg.num_layers_dec > 0))
    return total


def _init_std(name: str, cfg: ModelConfig) -> float | None:
    """Per-tensor init scale (T5 convention); ``None`` means ones (norm gains)."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf.endswith("norm"):
        return None
    if name == "shared.embedding":
        return 1.0
    if name == "lm_head":
        return cfg.d_model**-0.5
    if leaf == "q":
        return (cfg.d_model * cfg.d_kv) ** -0.5
    if leaf in ("k", "v", "wi0", "wi1", "rel_bias"):
        return cfg.d_model**-0.5
    if leaf == "o":
        return cfg.inner_dim**-0.5
    if leaf == "wo":
        return cfg.d_ff**-0.5
    raise KeyError(name)


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64, zero_head: bool = False) -> dict[str, Tensor]:
    """Allocate parameters: truncated normal (2 sigma) with T5 scaling, norms at one.

    ``zero_head`` zeroes the output projection so the initial predictive
    distribution is exactly uniform.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        std = _init_std(name, cfg)
        if std is None:
            data = np.ones(shape)
        elif name == "lm_head" and zero_head:
            data = np.zeros(shape)
        else:
            data = _truncated_normal(rng, shape, std)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return params


# ------------------------------------------------------ relative positions
def relative_position_buckets(rel, bidirectional: bool, num_buckets: int = 32, max_distance: int = 128) -> np.ndarray:
    """Vectorised T5 bucketing of ``key_pos - query_pos`` offsets.

    Half the buckets cover exact small distances, the rest grow
    logarithmically up to ``max_distance``; in bidirectional mode positive
    offsets use the upper half of the id range. The log step is computed in
    float32, as in the reference T5 code.
    """
    rel = np.asarray(rel, dtype=np.int64)
    buckets = np.zeros_like(rel)
    if bidirectional:
        num_buckets //= 2
        buckets += (rel > 0).astype(np.int64) * num_buckets
        dist = np.abs(rel)
    else:
        dist = -np.minimum(rel, 0)
    max_exact = num_buckets // 2
    is_small = dist < max_exact
    safe = np.maximum(dist, 1).astype(np.float32)
    scaled = (
        np.log(safe / np.float32(max_exact))
        / np.float32(math.log(max_distance / max_exact))
        * np.float32(num_buckets - max_exact)
    )
    large = max_exact + scaled.astype(np.int64)
    large = np.minimum(large, num_buckets - 1)
    return buckets + np.where(is_small, dist, large)


def relative_position_bucket(rel: int, bidirectional: bool, num_buckets: int = 32, max_distance: int = 128) -> int:
    return int(relative_position_buckets(np.array([rel]), bidirectional, num_buckets, max_distance)[0])


def _position_bias(table: Tensor, q_len: int, k_len: int, bidirectional: bool, cfg: ModelConfig) -> Tensor:
    rel = np.arange(k_len)[None, :] - np.arange(q_len)[:, None]
    ids = relative_position_buckets(rel, bidirectional, cfg.num_buckets, cfg.max_distance)
    bias = T.embedding(table, ids)  # [q, k, H]
    return T.reshape(T.transpose(bias, (2, 0, 1)), (1, cfg.num_heads, q_len, k_len))


# ------------------------------------------------------------------ layers
def _attention(params, prefix, x: Tensor, kv: Tensor, cfg: ModelConfig, bias, blocked, rng) -> Tensor:
    B, S, _ = x.shape
    L = kv.shape[1]
    H, dk = cfg.num_heads, cfg.d_kv
    q = T.transpose(T.reshape(x @ params[f"{prefix}.q"], (B, S, H, dk)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(kv @ params[f"{prefix}.k"], (B, L, H, dk)), (0, 2, 3, 1))
    v = T.transpose(T.reshape(kv @ params[f"{prefix}.v"], (B, L, H, dk)), (0, 2, 1, 3))
    scores = q @ k
    if bias is not None:
        scores = scores + bias
    if blocked is not None:
        scores = T.masked_fill(scores, blocked, NEG_INF)
    weights = T.dropout(T.softmax(scores, axis=-1), cfg.dropout, rng)
    ctx = T.reshape(T.transpose(weights @ v, (0, 2, 1, 3)), (B, S, H * dk))
    return ctx @ params[f"{prefix}.o"]


def _ffn(params, prefix, x: Tensor, cfg: ModelConfig, rng) -> Tensor:
    h = T.gelu(x @ params[f"{prefix}.wi0"]) * (x @ params[f"{prefix}.wi1"])
    return T.dropout(h, cfg.dropout, rng) @ params[f"{prefix}.wo"]


def _drop(x: Tensor, cfg: ModelConfig, rng) -> Tensor:
    return T.dropout(x, cfg.dropout, rng)


def _check_ids(ids: np.ndarray, cfg: ModelConfig) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise IndexError(f"token id out of range [0, {cfg.vocab_size})")


def encode(params, cfg: ModelConfig, input_ids, pad_mask=None, rng=None) -> Tensor:
    """Encoder states ``[B, S, d_model]``.

    ``pad_mask`` is true at real tokens; padded keys are excluded from
    attention.
    """
    ids = np.asarray(input_ids, dtype=np.int64)
    if ids.ndim != 2:
        raise T.DimensionError(f"input_ids must be [B, S], got {ids.shape}")
    _check_ids(ids, cfg)
    B, S = ids.shape
    keep = np.ones((B, S), dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    blocked = ~keep[:, None, None, :]
    x = _drop(T.embedding(params["shared.embedding"], ids), cfg, rng)
    bias = None
    if cfg.num_layers_enc:
        bias = _position_bias(params["encoder.rel_bias"], S, S, True, cfg)
    for i in range(cfg.num_layers_enc):
        p = f"encoder.block{i}"
        h = T.rms_norm(x, params[f"{p}.attn_norm"], cfg.norm_eps)
        x = x + _drop(_attention(params, f"{p}.attn", h, h, cfg, bias, blocked, rng), cfg, rng)
        h = T.rms_norm(x, params[f"{p}.ffn_norm"], cfg.norm_eps)
        x = x + _drop(_ffn(params, f"{p}.ffn", h, cfg, rng), cfg, rng)
    return _drop(T.rms_norm(x, params["encoder.final_norm"], cfg.norm_eps), cfg, rng)


def decode(params, cfg: ModelConfig, decoder_input_ids, encoder_states: Tensor, encoder_mask=None, rng=None) -> Tensor:
    """Decoder logits ``[B, T, vocab]``; position t only sees targets <= t."""
    ids = np.asarray(decoder_input_ids, dtype=np.int64)
    if ids.ndim != 2:
        raise T.DimensionError(f"decoder_input_ids must be [B, T], got {ids.shape}")
    _check_ids(ids, cfg)
    B, L = ids.shape
    if encoder_states.ndim != 3 or encoder_states.shape[0] != B or encoder_states.shape[2] != cfg.d_model:
        raise T.DimensionError(
            f"encoder states {encoder_states.shape} incompatible with decoder input {ids.shape}"
        )
    S = encoder_states.shape[1]
    keep = np.ones((B, S), dtype=bool) if encoder_mask is None else np.asarray(encoder_mask, dtype=bool)
    cross_blocked = ~keep[:, None, None, :]
    causal_blocked = np.triu(np.ones((L, L), dtype=bool), k=1)[None, None]
    x = _drop(T.embedding(params["shared.embedding"], ids), cfg, rng)
    bias = None
    if cfg.num_layers_dec:
        bias = _position_bias(params["decoder.rel_bias"], L, L, False, cfg)
    for i in range(cfg.num_layers_dec):
        p = f"decoder.block{i}"
        h = T.rms_norm(x, params[f"{p}.self_attn_norm"], cfg.norm_eps)
        x = x + _drop(_attention(params, f"{p}.self_attn", h, h, cfg, bias, causal_blocked, rng), cfg, rng)
        h = T.rms_norm(x, params[f"{p}.cross_attn_norm"], cfg.norm_eps)
        x = x + _drop(
            _attention(params, f"{p}.cross_attn", h, encoder_states, cfg, None, cross_blocked, rng), cfg, rng
        )
        h = T.rms_norm(x, params[f"{p}.ffn_norm"], cfg.norm_eps)
        x = x + _drop(_ffn(params, f"{p}.ffn", h, cfg, rng), cfg, rng)
    x = _drop(T.rms_norm(x, params["decoder.final_norm"], cfg.norm_eps), cfg, rng)
    if cfg.tie_embeddings:
        head = T.transpose(params["shared.embedding"], (1, 0))
        return T.scale(x, cfg.d_model**-0.5) @ head
    return x @ params["lm_head"]


def forward(params, cfg: ModelConfig, batch, rng=None) -> Tensor:
    enc = encode(params, cfg, batch.input_ids, batch.input_mask, rng)
    return decode(params, cfg, batch.decoder_input_ids, enc, batch.input_mask, rng)


def forward_loss(params, cfg: ModelConfig, batch, rng=None, ignore_index: int = -100) -> Tensor:
    """Mean token NLL of ``batch.labels`` under the model."""
    logits = forward(params, cfg, batch, rng)
    return T.softmax_cross_entropy(logits, batch.labels, ignore_index)


# ---------------------------------------------------------------- decoding
def greedy_search(next_logits: Callable[[list[int]], np.ndarray], max_len: int, eos_id: int) -> list[int]:
    """Append argmax tokens until ``eos_id`` or ``max_len`` tokens.

    ``next_logits(prefix)`` scores the token after ``prefix``. Ties go to the
    lowest id. The EOS token is not returned.
    """
    out: list[int] = []
    while len(out) < max_len:
        tok = int(np.argmax(next_logits(out)))
        if tok == eos_id:
            break
        out.append(tok)
    return out


def greedy_decode_batch(
    params, cfg: ModelConfig, inputs: list[list[int]], max_len: int, eos_id: int, start_id: int, pad_id: int = 0
) -> list[list[int]]:
    """Greedy decoding of several inputs at once (no key/value cache)."""
    if not inputs or max_len <= 0:
        return [[] for _ in inputs]
    S = max(1, max(len(x) for x in inputs))
    ids = np.full((len(inputs), S), pad_id, dtype=np.int64)
    mask = np.zeros((len(inputs), S), dtype=bool)
    for i, seq in enumerate(inputs):
        ids[i, : len(seq)] = seq
        mask[i, : len(seq)] = True
    outs: list[list[int]] = [[] for _ in inputs]
    done = np.zeros(len(inputs), dtype=bool)
    with T.no_grad():
        enc = encode(params, cfg, ids, mask)
        prefix = np.full((len(inputs), 1), start_id, dtype=np.int64)
        for _ in range(max_len):
            logits = decode(params, cfg, prefix, enc, mask).data[:, -1, :]
            nxt = logits.argmax(axis=-1)
            for i, tok in enumerate(nxt):
                if done[i]:
                    continue
                if tok == eos_id:
                    done[i] = True
                else:
                    outs[i].append(int(tok))
            if done.all():
                break
            nxt = np.where(done, pad_id, nxt)
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    return outs


def greedy_decode(params, cfg: ModelConfig, input_ids: list[int], max_len: int, eos_id: int, start_id: int) -> list[int]:
    return greedy_decode_batch(params, cfg, [list(input_ids)], max_len, eos_id, start_id)[0]
