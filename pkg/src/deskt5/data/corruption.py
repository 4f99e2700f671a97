"""Span corruption: mask random contiguous spans and replace each with a sentinel.

The raw chunk length is chosen so that, after corruption, the encoder input
(including its EOS) has exactly ``input_length`` tokens. With the defaults
(512 inputs, 15% noise, mean span 3) this gives 568 raw tokens, 85 of them
masked in 28 spans, and a 114-token target.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import cached_property

import numpy as np


class SpanLengthError(ValueError):
    """No raw length produces the requested input length."""


class CorruptionInvariantError(AssertionError):
    pass


@dataclass(frozen=True)
class CorruptionConfig:
    noise_density: float = 0.15
    mean_span_length: float = 3.0
    input_length: int = 512
    target_length: int = 114
    eos_id: int = 1
    pad_id: int = 0
    sentinel_base: int = 383
    num_sentinels: int = 125

    def __post_init__(self):
        if not 0.0 < self.noise_density < 1.0:
            raise ValueError("noise_density must be in (0, 1)")
        if self.mean_span_length < 1.0:
            raise ValueError("mean_span_length must be >= 1")
        if self.input_length <= 1:
            raise ValueError("input_length must be > 1")
        raw, target = compute_span_lengths(self.input_length, self.noise_density, self.mean_span_length)
        if target != self.target_length:
            raise ValueError(
                f"target_length {self.target_length} inconsistent with input_length {self.input_length}: "
                f"corruption yields {target}"
            )
        spans = num_spans(raw, self.noise_density, self.mean_span_length)
        if spans > self.num_sentinels:
            raise ValueError(f"{spans} spans needed but only {self.num_sentinels} sentinels reserved")

    @classmethod
    def for_input_length(cls, input_length: int, noise_density: float = 0.15, mean_span_length: float = 3.0, **kw):
        _, target = compute_span_lengths(input_length, noise_density, mean_span_length)
        return cls(noise_density, mean_span_length, input_length, target, **kw)

    @cached_property
    def tokens_length(self) -> int:
        return compute_span_lengths(self.input_length, self.noise_density, self.mean_span_length)[0]

    def to_dict(self) -> dict:
        return asdict(self)


def num_noise_tokens(raw: int, noise_density: float) -> int:
    n = int(round(raw * noise_density))
    return min(max(n, 1), raw - 1)


def num_spans(raw: int, noise_density: float, mean_span_length: float) -> int:
    return max(1, int(round(num_noise_tokens(raw, noise_density) / mean_span_length)))


def _lengths_after(raw: int, noise_density: float, mean_span_length: float) -> tuple[int, int]:
    noise = num_noise_tokens(raw, noise_density)
    spans = num_spans(raw, noise_density, mean_span_length)
    return raw - noise + spans + 1, noise + spans + 1


def compute_span_lengths(input_length: int, noise_density: float, mean_span_length: float) -> tuple[int, int]:
    """Return ``(tokens_length, targets_length)``.

    ``tokens_length`` is the smallest raw chunk length whose corrupted input,
    EOS included, is exactly ``input_length`` tokens long.
    """
    raw = 2
    while True:
        inp, tgt = _lengths_after(raw, noise_density, mean_span_length)
        if inp == input_length:
            return raw, tgt
        if inp > input_length:
            raise SpanLengthError(
                f"no raw length yields an input of exactly {input_length} tokens "
                f"(density {noise_density}, mean span {mean_span_length})"
            )
        raw += 1


def random_segmentation(num_items: int, num_segments: int, rng: np.random.Generator) -> np.ndarray:
    """Split ``num_items`` into ``num_segments`` positive lengths, all splits equally likely."""
    first = np.zeros(num_items, dtype=bool)
    cuts = rng.permutation(num_items - 1)[: num_segments - 1] + 1
    first[cuts] = True
    segment_id = np.cumsum(first)
    return np.bincount(segment_id, minlength=num_segments)


def random_spans_noise_mask(length: int, noise_density: float, mean_span_length: float, rng) -> np.ndarray:
    """Boolean mask of ``length`` with alternating non-noise/noise runs (non-noise first)."""
    noise = num_noise_tokens(length, noise_density)
    spans = num_spans(length, noise_density, mean_span_length)
    noise_lens = random_segmentation(noise, spans, rng)
    keep_lens = random_segmentation(length - noise, spans, rng)
    runs = np.stack([keep_lens, noise_lens], axis=1).reshape(-1)
    flags = np.tile([False, True], spans)
    return np.repeat(flags, runs)


def apply_noise_mask(tokens, mask, sentinels, eos_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Replace each masked run by the next sentinel.

    Input keeps unmasked tokens with one sentinel per run; target lists each
    sentinel followed by the tokens it hides. Both end with ``eos_id``.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    starts = mask & ~np.concatenate([[False], mask[:-1]])
    span_index = np.cumsum(starts) - 1
    if starts.sum() > len(sentinels):
        raise ValueError(f"{int(starts.sum())} spans but only {len(sentinels)} sentinels supplied")
    sent = np.asarray(sentinels, dtype=np.int64)
    # inputs: drop masked tokens except at span starts, which become sentinels
    inp = np.where(starts, sent[np.clip(span_index, 0, None)], tokens)[~mask | starts]
    tgt = _target_from_mask(tokens, mask, starts, sent, span_index)
    return np.append(inp, eos_id), np.append(tgt, eos_id)


def _target_from_mask(tokens, mask, starts, sent, span_index) -> np.ndarray:
    out = np.empty(int(mask.sum() + starts.sum()), dtype=np.int64)
    pos = np.nonzero(mask)[0]
    # each masked token shifts right by the number of sentinels up to and including its span
    dest = np.arange(len(pos)) + span_index[pos] + 1
    out[dest] = tokens[pos]
    first = np.nonzero(starts)[0]
    out[dest[np.searchsorted(pos, first)] - 1] = sent[: len(first)]
    return out


def corrupt_spans(tokens, cfg: CorruptionConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt one raw chunk of exactly ``cfg.tokens_length`` tokens."""
    tokens = np.asarray(tokens, dtype=np.int64)
    raw = cfg.tokens_length
    if tokens.shape != (raw,):
        raise ValueError(f"expected {raw} raw tokens, got shape {tokens.shape}")
    mask = random_spans_noise_mask(raw, cfg.noise_density, cfg.mean_span_length, rng)
    sentinels = cfg.sentinel_base - np.arange(cfg.num_sentinels)
    inp, tgt = apply_noise_mask(tokens, mask, sentinels, cfg.eos_id)
    if len(inp) != cfg.input_length or len(tgt) != cfg.target_length:
        raise CorruptionInvariantError(
            f"corruption produced lengths {len(inp)}/{len(tgt)}, expected {cfg.input_length}/{cfg.target_length}"
        )
    return inp, tgt


def reconstruct(inp, tgt, is_sentinel) -> list[int]:
    """Invert :func:`apply_noise_mask`: splice target spans back into the input."""
    spans: dict[int, list[int]] = {}
    current = None
    for tok in list(tgt)[:-1]:
        if is_sentinel(tok):
            current = int(tok)
            spans[current] = []
        elif current is not None:
            spans[current].append(int(tok))
    out: list[int] = []
    for tok in list(inp)[:-1]:
        if is_sentinel(tok):
            out.extend(spans[int(tok)])
        else:
            out.append(int(tok))
    return out
