"""Corpus ingestion, tokenization and span-corruption example synthesis."""

from .corruption import (
    CorruptionConfig,
    SpanLengthError,
    apply_noise_mask,
    compute_span_lengths,
    corrupt_spans,
    random_spans_noise_mask,
    reconstruct,
)
from .stream import (
    IGNORE_INDEX,
    Batch,
    Prefetcher,
    TokenStream,
    batches,
    iter_documents,
    make_batch,
    pad_batch,
    read_pairs,
    reversal_pairs,
    span_examples,
    write_pairs,
)
from .vocab import ByteVocab, Vocab, VocabParseError, WordVocab, load_vocab

__all__ = [
    "IGNORE_INDEX",
    "Batch",
    "ByteVocab",
    "CorruptionConfig",
    "Prefetcher",
    "SpanLengthError",
    "TokenStream",
    "Vocab",
    "VocabParseError",
    "WordVocab",
    "apply_noise_mask",
    "batches",
    "compute_span_lengths",
    "corrupt_spans",
    "iter_documents",
    "load_vocab",
    "make_batch",
    "pad_batch",
    "random_spans_noise_mask",
    "read_pairs",
    "reconstruct",
    "reversal_pairs",
    "span_examples",
    "write_pairs",
]
