"""Corpus streaming, batching and background prefetch.

Documents are read lazily, tokenized, joined with EOS separators and cut
into fixed raw chunks. Example ``k`` of a stream is corrupted with a
generator seeded by ``(seed, k)`` only, so the content of a stream never
depends on which thread produced it or how far a consumer has read.
"""

from __future__ import annotations

import logging
import queue
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from .corruption import CorruptionConfig, corrupt_spans
from .vocab import Vocab

logger = logging.getLogger(__name__)

IGNORE_INDEX = -100


@dataclass
class Batch:
    input_ids: np.ndarray  # [B, S] int64
    input_mask: np.ndarray  # [B, S] bool, true at real tokens
    decoder_input_ids: np.ndarray  # [B, T] int64
    labels: np.ndarray  # [B, T] int64, IGNORE_INDEX at padding

    def __len__(self) -> int:
        return self.input_ids.shape[0]

    @property
    def num_target_tokens(self) -> int:
        return int((self.labels != IGNORE_INDEX).sum())

    def split(self, sizes: list[int]) -> list[Batch]:
        out, start = [], 0
        for n in sizes:
            sl = slice(start, start + n)
            out.append(Batch(self.input_ids[sl], self.input_mask[sl], self.decoder_input_ids[sl], self.labels[sl]))
            start += n
        return out


def shift_right(labels: np.ndarray, start_id: int) -> np.ndarray:
    """Decoder inputs: ``start_id`` followed by the labels minus the last one.

    Ignored label positions are fed as padding (id 0).
    """
    dec = np.empty_like(labels)
    dec[:, 0] = start_id
    dec[:, 1:] = labels[:, :-1]
    dec[dec == IGNORE_INDEX] = 0
    return dec


def make_batch(examples, cfg: CorruptionConfig, start_id: int = 2) -> Batch:
    """Stack pre-training examples that are already exactly input/target length."""
    if not examples:
        raise ValueError("make_batch needs at least one example")
    for i, (inp, tgt) in enumerate(examples):
        if len(inp) != cfg.input_length or len(tgt) != cfg.target_length:
            raise ValueError(
                f"example {i} has lengths {len(inp)}/{len(tgt)}, expected {cfg.input_length}/{cfg.target_length}"
            )
    input_ids = np.stack([np.asarray(e[0], dtype=np.int64) for e in examples])
    labels = np.stack([np.asarray(e[1], dtype=np.int64) for e in examples])
    labels = np.where(labels == cfg.pad_id, IGNORE_INDEX, labels)
    return Batch(input_ids, input_ids != cfg.pad_id, shift_right(labels, start_id), labels)


def pad_batch(pairs, input_length: int, target_length: int, pad_id: int = 0, start_id: int = 2) -> Batch:
    """Truncate/pad variable-length (input, target) id lists to a fixed geometry."""
    if not pairs:
        raise ValueError("pad_batch needs at least one example")
    B = len(pairs)
    input_ids = np.full((B, input_length), pad_id, dtype=np.int64)
    labels = np.full((B, target_length), IGNORE_INDEX, dtype=np.int64)
    for i, (inp, tgt) in enumerate(pairs):
        inp, tgt = list(inp)[:input_length], list(tgt)[:target_length]
        input_ids[i, : len(inp)] = inp
        labels[i, : len(tgt)] = tgt
    return Batch(input_ids, input_ids != pad_id, shift_right(labels, start_id), labels)


# ------------------------------------------------------------------ reading
def iter_documents(source) -> Iterator[str]:
    """Yield non-empty lines of a text file, or of every ``*.txt`` under a directory (sorted)."""
    path = Path(source)
    if path.is_dir():
        files = sorted(path.rglob("*.txt"))
    else:
        files = [path]
    for f in files:
        with open(f, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    yield line


def split_documents(docs: Iterable[str], split: str, heldout_every: int) -> Iterator[str]:
    """Every ``heldout_every``-th document (index 0, n, 2n, ...) is held out."""
    if split not in ("all", "train", "heldout"):
        raise ValueError(f"unknown split {split!r}")
    for i, doc in enumerate(docs):
        if split == "all" or heldout_every <= 0:
            yield doc
        elif (i % heldout_every == 0) == (split == "heldout"):
            yield doc


class TokenStream:
    """Fixed-length raw token chunks from a corpus.

    Documents are tokenized, each followed by ``eos_id``, concatenated and cut
    into chunks of ``tokens_length``; a trailing partial chunk is dropped.
    """

    def __init__(self, source, vocab: Vocab, tokens_length: int, split: str = "all", heldout_every: int = 0):
        self.source = source
        self.vocab = vocab
        self.tokens_length = tokens_length
        self.split = split
        self.heldout_every = heldout_every

    def __iter__(self) -> Iterator[np.ndarray]:
        buf: list[int] = []
        n = self.tokens_length
        docs = split_documents(iter_documents(self.source), self.split, self.heldout_every)
        for doc in docs:
            buf.extend(self.vocab.tokenize(doc))
            buf.append(self.vocab.eos_id)
            while len(buf) >= n:
                yield np.asarray(buf[:n], dtype=np.int64)
                del buf[:n]


def example_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def span_examples(
    stream: TokenStream, cfg: CorruptionConfig, seed: int, start: int = 0, repeat: bool = False
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Corrupted (input, target) pairs; example ``k`` uses ``example_rng(seed, k)``.

    With ``repeat`` the corpus is cycled (each pass gets fresh masks because
    ``k`` keeps growing). The first ``start`` examples are skipped without
    being corrupted.
    """
    k = 0
    while True:
        emitted = False
        for chunk in stream:
            emitted = True
            if k >= start:
                yield corrupt_spans(chunk, cfg, example_rng(seed, k))
            k += 1
        if not repeat or not emitted:
            return


def batches(examples: Iterable, batch_size: int, cfg: CorruptionConfig, start_id: int = 2) -> Iterator[Batch]:
    """Group examples into full batches; a trailing partial batch is dropped."""
    group = []
    for ex in examples:
        group.append(ex)
        if len(group) == batch_size:
            yield make_batch(group, cfg, start_id)
            group = []


# ----------------------------------------------------------------- prefetch
_DONE = object()


class Prefetcher:
    """Run an iterator on a background thread behind a bounded queue.

    The producer blocks once ``capacity`` items are waiting. ``produced``
    counts items handed to the queue, for instrumentation. Exceptions raised
    by the producer are re-raised in the consumer.
    """

    def __init__(self, make_iter: Callable[[], Iterable], capacity: int = 64):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._queue: queue.Queue = queue.Queue(maxsize=capacity)
        self._stop = threading.Event()
        self._make_iter = make_iter
        self.produced = 0
        self._thread = threading.Thread(target=self._run, name="prefetch", daemon=True)
        self._thread.start()

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def _run(self) -> None:
        try:
            for item in self._make_iter():
                if not self._put(item):
                    return
                self.produced += 1
            self._put(_DONE)
        except BaseException as exc:  # noqa: BLE001 - handed to the consumer
            logger.debug("prefetch producer failed: %r", exc)
            self._put(exc)

    def __iter__(self):
        return self

    def __next__(self):
        item = self._queue.get()
        if item is _DONE:
            self._queue.put(_DONE)
            raise StopIteration
        if isinstance(item, BaseException):
            raise item
        return item

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------- fine-tune
def read_pairs(path) -> list[tuple[str, str]]:
    """Read ``input<TAB>target`` lines (UTF-8)."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 tab-separated columns, found {len(parts)}")
            pairs.append((parts[0], parts[1]))
    return pairs


def write_pairs(path, pairs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a, b in pairs:
            fh.write(f"{a}\t{b}\n")


def reversal_pairs(
    n: int = 32, alphabet: str = "abcdefgh", min_len: int = 3, max_len: int = 8, seed: int = 0, include=("abc",)
):
    """Distinct strings over ``alphabet`` paired with their reversal.

    The strings in ``include`` come first; the rest are drawn at random.
    """
    rng = np.random.default_rng(seed)
    seen: set[str] = set()
    pairs = []
    for s in include:
        if s not in seen and len(pairs) < n:
            seen.add(s)
            pairs.append((s, s[::-1]))
    while len(pairs) < n:
        length = int(rng.integers(min_len, max_len + 1))
        s = "".join(rng.choice(list(alphabet), size=length))
        if s in seen:
            continue
        seen.add(s)
        pairs.append((s, s[::-1]))
    return pairs
