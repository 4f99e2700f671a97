import time
from itertools import islice

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskt5.config import BUNDLED_CORPUS, BUNDLED_REVERSAL
from deskt5.data import (
    ByteVocab,
    CorruptionConfig,
    Prefetcher,
    SpanLengthError,
    TokenStream,
    VocabParseError,
    WordVocab,
    apply_noise_mask,
    compute_span_lengths,
    corrupt_spans,
    load_vocab,
    make_batch,
    pad_batch,
    read_pairs,
    reconstruct,
    reversal_pairs,
    span_examples,
    write_pairs,
)
from deskt5.data.corruption import CorruptionInvariantError, random_segmentation
from deskt5.data.stream import IGNORE_INDEX, batches
from oracles import span_geometry_bruteforce

VOCAB = ByteVocab(384)
DEFAULT = CorruptionConfig()


def random_tokens(rng, n):
    return rng.integers(3, 259, size=n)


# -------------------------------------------------------------- geometry
def test_span_lengths_default_geometry():
    assert compute_span_lengths(512, 0.15, 3.0) == (568, 114)
    assert span_geometry_bruteforce(512, 0.15, 3.0, lo=400, hi=700) == (568, 114)


def test_span_lengths_hand_example():
    assert compute_span_lengths(10, 0.2, 2.0) == (10, 4)


@pytest.mark.parametrize("input_length", [8, 20, 33, 64, 100, 128, 256, 512, 1024])
@pytest.mark.parametrize("density,mean_span", [(0.15, 3.0), (0.3, 2.0), (0.5, 5.0)])
def test_span_lengths_match_bruteforce(input_length, density, mean_span):
    expected = span_geometry_bruteforce(input_length, density, mean_span, lo=2)
    if expected is None:
        with pytest.raises(SpanLengthError):
            compute_span_lengths(input_length, density, mean_span)
    else:
        assert compute_span_lengths(input_length, density, mean_span) == expected


def test_span_count_clamps_to_one():
    # mean span far larger than the noise budget still yields one span
    raw, target = compute_span_lengths(12, 0.1, 50.0)
    noise = max(1, round(raw * 0.1))
    assert target == noise + 1 + 1


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        CorruptionConfig(noise_density=0.0)
    with pytest.raises(ValueError):
        CorruptionConfig(mean_span_length=0.5)
    with pytest.raises(ValueError):
        CorruptionConfig(target_length=113)
    with pytest.raises(ValueError):
        CorruptionConfig(num_sentinels=27)


# ------------------------------------------------------------ corruption
def test_forced_single_span():
    a, b, c, d, e = 10, 11, 12, 13, 14
    inp, tgt = apply_noise_mask([a, b, c, d, e], [0, 0, 1, 1, 0], [383, 382], eos_id=1)
    assert inp.tolist() == [a, b, 383, e, 1]
    assert tgt.tolist() == [383, c, d, 1]


def test_default_examples_have_exact_geometry():
    rng = np.random.default_rng(0)
    for seed in range(50):
        inp, tgt = corrupt_spans(random_tokens(rng, 568), DEFAULT, np.random.default_rng(seed))
        assert len(inp) == 512 and len(tgt) == 114
        assert sum(VOCAB.is_sentinel(t) for t in inp) == 28
        assert sum(VOCAB.is_sentinel(t) for t in tgt) == 28


def test_wrong_raw_length_is_rejected():
    with pytest.raises(ValueError):
        corrupt_spans(np.arange(567) + 3, DEFAULT, np.random.default_rng(0))


def test_invariant_error_is_distinct():
    assert issubclass(CorruptionInvariantError, AssertionError)


def test_sentinels_descend_and_match():
    rng = np.random.default_rng(1)
    for seed in range(100):
        inp, tgt = corrupt_spans(random_tokens(rng, 568), DEFAULT, np.random.default_rng(seed))
        s_in = [int(t) for t in inp if VOCAB.is_sentinel(t)]
        s_tgt = [int(t) for t in tgt if VOCAB.is_sentinel(t)]
        assert s_in == s_tgt == [383 - i for i in range(len(s_in))]


def test_reconstruction_over_1000_examples():
    rng = np.random.default_rng(2)
    for seed in range(1000):
        tokens = random_tokens(rng, 568)
        inp, tgt = corrupt_spans(tokens, DEFAULT, np.random.default_rng([seed, 3]))
        assert reconstruct(inp, tgt, VOCAB.is_sentinel) == tokens.tolist()


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 200), st.floats(0.05, 0.9), st.floats(1.0, 8.0), st.integers(0, 2**32 - 1))
def test_reconstruction_any_geometry(length, density, mean_span, seed):
    from deskt5.data.corruption import random_spans_noise_mask

    rng = np.random.default_rng(seed)
    tokens = random_tokens(rng, length)
    mask = random_spans_noise_mask(length, density, mean_span, rng)
    assert mask.shape == (length,) and 0 < mask.sum() < length
    inp, tgt = apply_noise_mask(tokens, mask, 383 - np.arange(125), 1)
    assert reconstruct(inp, tgt, VOCAB.is_sentinel) == tokens.tolist()


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.integers(1, 300), st.integers(0, 2**32 - 1))
def test_random_segmentation_partitions(items, segments, seed):
    segments = min(segments, items)
    lens = random_segmentation(items, segments, np.random.default_rng(seed))
    assert len(lens) == segments and lens.sum() == items and lens.min() >= 1


def test_masked_fraction_near_target():
    stream = TokenStream(BUNDLED_CORPUS, VOCAB, DEFAULT.tokens_length)
    fractions = []
    for inp, tgt in islice(span_examples(stream, DEFAULT, seed=0, repeat=True), 1000):
        sentinels = sum(VOCAB.is_sentinel(t) for t in tgt)
        fractions.append((len(tgt) - 1 - sentinels) / DEFAULT.tokens_length)
    assert 0.13 <= np.mean(fractions) <= 0.17


def test_same_seed_same_stream():
    stream = TokenStream(BUNDLED_CORPUS, VOCAB, DEFAULT.tokens_length)
    a = list(islice(span_examples(stream, DEFAULT, seed=5), 10))
    b = list(islice(span_examples(stream, DEFAULT, seed=5), 10))
    c = list(islice(span_examples(stream, DEFAULT, seed=6), 10))
    assert all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) for x, y in zip(a, b))
    assert not all(np.array_equal(x[0], y[0]) for x, y in zip(a, c))


def test_start_skips_examples_exactly():
    stream = TokenStream(BUNDLED_CORPUS, VOCAB, DEFAULT.tokens_length)
    full = list(islice(span_examples(stream, DEFAULT, seed=1, repeat=True), 60))
    tail = list(islice(span_examples(stream, DEFAULT, seed=1, start=45, repeat=True), 15))
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(full[45:], tail))


# ----------------------------------------------------------------- vocab
def test_byte_vocab_examples():
    assert VOCAB.tokenize("") == []
    assert VOCAB.tokenize("AB") == [ord("A") + 3, ord("B") + 3]
    assert VOCAB.num_sentinels == 125 and VOCAB.sentinel(0) == 383


@settings(max_examples=300, deadline=None)
@given(st.text())
def test_byte_vocab_round_trip(s):
    assert VOCAB.detokenize(VOCAB.tokenize(s)) == s


def test_word_vocab_file(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text("<pad>\n</s>\n<s>\n<unk>\nthe\ncat\n<extra_id_1>\n<extra_id_0>\n", encoding="utf-8")
    vocab = WordVocab.from_file(path)
    assert vocab.size == 8 and vocab.num_sentinels == 2 and vocab.sentinel(0) == 7
    assert vocab.tokenize("the cat dog") == [4, 5, 3]
    assert vocab.detokenize([4, 5, 1]) == "the cat"
    assert load_vocab("words", path=str(path)).fingerprint() == vocab.fingerprint()


@pytest.mark.parametrize(
    "text,line",
    [
        ("<pad>\n</s>\n<s>\nthe\nthe\n", 5),
        ("<pad>\n<s>\n</s>\n", 2),
        ("<pad>\n</s>\n<s>\n\n", 4),
        ("<pad>\n</s>\n<s>\n<extra_id_0>\n<extra_id_1>\n", 4),
        ("<pad>\n</s>\n<s>\nhas space\n", 4),
        ("<pad>\n", 2),
    ],
)
def test_malformed_vocab_reports_line(tmp_path, text, line):
    path = tmp_path / "bad.txt"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(VocabParseError) as info:
        WordVocab.from_file(path)
    assert info.value.lineno == line
    assert f":{line}:" in str(info.value)


# ---------------------------------------------------------------- stream
def test_chunks_follow_document_order(tmp_path):
    path = tmp_path / "docs.txt"
    path.write_text("aaaa\nbbbb\ncccc\n", encoding="utf-8")
    chunks = [c.tolist() for c in TokenStream(path, VOCAB, 5)]
    a, b, c = (ord(ch) + 3 for ch in "abc")
    assert chunks == [[a] * 4 + [1], [b] * 4 + [1], [c] * 4 + [1]]


def test_directory_source_and_remainder(tmp_path):
    (tmp_path / "b.txt").write_text("yy\n", encoding="utf-8")
    (tmp_path / "a.txt").write_text("xx\n", encoding="utf-8")
    chunks = [c.tolist() for c in TokenStream(tmp_path, VOCAB, 2)]
    x, y = ord("x") + 3, ord("y") + 3
    assert chunks == [[x, x], [1, y], [y, 1]]
    assert list(TokenStream(tmp_path, VOCAB, 100)) == []


def test_empty_and_missing_sources(tmp_path):
    assert list(TokenStream(tmp_path, VOCAB, 4)) == []
    with pytest.raises(OSError):
        list(TokenStream(tmp_path / "missing.txt", VOCAB, 4))


def test_heldout_split_is_disjoint():
    train = list(TokenStream(BUNDLED_CORPUS, VOCAB, 100, "train", 10))
    held = list(TokenStream(BUNDLED_CORPUS, VOCAB, 100, "heldout", 10))
    every = list(TokenStream(BUNDLED_CORPUS, VOCAB, 100))
    assert train and held
    assert abs(len(train) + len(held) - len(every)) <= 2


# ----------------------------------------------------------------- batch
def test_make_batch_shapes_and_shift():
    rng = np.random.default_rng(3)
    examples = [corrupt_spans(random_tokens(rng, 568), DEFAULT, np.random.default_rng(i)) for i in range(128)]
    batch = make_batch(examples, DEFAULT)
    assert batch.input_ids.shape == (128, 512) and batch.labels.shape == (128, 114)
    assert np.array_equal(batch.decoder_input_ids[:, 1:], batch.labels[:, :-1])
    assert np.all(batch.decoder_input_ids[:, 0] == 2)
    one = make_batch(examples[:1], DEFAULT)
    assert one.input_ids.shape == (1, 512) and one.decoder_input_ids.shape == (1, 114)


def test_make_batch_rejects_ragged():
    rng = np.random.default_rng(4)
    inp, tgt = corrupt_spans(random_tokens(rng, 568), DEFAULT, rng)
    with pytest.raises(ValueError):
        make_batch([(inp, tgt), (inp[:-1], tgt)], DEFAULT)


def test_pad_batch_ignores_padding():
    batch = pad_batch([([5, 6, 1], [7, 1]), ([5, 1], [8, 9, 10, 1])], 4, 3)
    assert batch.labels.tolist() == [[7, 1, IGNORE_INDEX], [8, 9, 10]]
    assert batch.decoder_input_ids.tolist() == [[2, 7, 1], [2, 8, 9]]
    assert batch.input_mask.tolist() == [[True, True, True, False], [True, True, False, False]]
    assert batch.num_target_tokens == 5


# -------------------------------------------------------------- prefetch
def test_prefetcher_blocks_when_full():
    consumed = []

    def make():
        for i in range(100):
            yield i

    pf = Prefetcher(make, capacity=3)
    try:
        deadline = time.time() + 5
        while pf.produced < 3 and time.time() < deadline:
            time.sleep(0.01)
        time.sleep(0.2)
        # queue holds 3, the producer is parked on the fourth put
        assert pf.produced == 3
        consumed.append(next(pf))
        deadline = time.time() + 5
        while pf.produced < 4 and time.time() < deadline:
            time.sleep(0.01)
        time.sleep(0.2)
        assert pf.produced == 4
        consumed.extend(pf)
    finally:
        pf.close()
    assert consumed == list(range(100))


def test_prefetcher_matches_inline_batches():
    cfg = CorruptionConfig.for_input_length(32, sentinel_base=383)
    stream = TokenStream(BUNDLED_CORPUS, VOCAB, cfg.tokens_length)

    def make():
        return batches(span_examples(stream, cfg, 3), 4, cfg)

    inline = list(islice(make(), 10))
    with Prefetcher(make, capacity=2) as pf:
        threaded = list(islice(pf, 10))
    assert all(np.array_equal(a.input_ids, b.input_ids) and np.array_equal(a.labels, b.labels) for a, b in zip(inline, threaded))


def test_prefetcher_reraises_producer_errors():
    def make():
        yield 1
        raise OSError("disk gone")

    with Prefetcher(make, capacity=2) as pf:
        assert next(pf) == 1
        with pytest.raises(OSError, match="disk gone"):
            next(pf)


# -------------------------------------------------------------- fine-tune
def test_pairs_round_trip(tmp_path):
    pairs = reversal_pairs(8, seed=3)
    write_pairs(tmp_path / "p.tsv", pairs)
    assert read_pairs(tmp_path / "p.tsv") == pairs


def test_bundled_reversal_task():
    pairs = read_pairs(BUNDLED_REVERSAL)
    assert pairs == reversal_pairs()
    assert len(pairs) == 32 and pairs[0] == ("abc", "cba")
    assert len({a for a, _ in pairs}) == 32
    assert all(b == a[::-1] and set(a) <= set("abcdefgh") for a, b in pairs)


def test_malformed_pairs(tmp_path):
    (tmp_path / "bad.tsv").write_text("a\tb\tc\n", encoding="utf-8")
    with pytest.raises(ValueError, match=":1:"):
        read_pairs(tmp_path / "bad.tsv")
