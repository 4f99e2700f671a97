import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import reversal_finetune_config
from deskt5.data.stream import read_pairs, write_pairs
from deskt5.metrics import lcs_length, mean_rouge_l, rouge_l
from deskt5.model import greedy_decode
from deskt5.trainer import VocabMismatchError, finetune, params_digest, rouge_on_pairs
from oracles import lcs_recursive, rouge_l_oracle


# ------------------------------------------------------------------ RougeL
def test_rouge_examples():
    assert rouge_l("a b c".split(), "a b c".split()) == 1.0
    assert rouge_l("x y".split(), "a b c".split()) == 0.0
    assert rouge_l("the cat".split(), "the cat sat on the mat".split()) == 0.5
    assert rouge_l([], ["a"]) == 0.0 and rouge_l(["a"], []) == 0.0 and rouge_l([], []) == 0.0


def test_rouge_matches_recursive_oracle_on_100_pairs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.integers(0, 5, size=rng.integers(0, 15)).tolist()
        b = rng.integers(0, 5, size=rng.integers(0, 15)).tolist()
        assert lcs_length(a, b) == lcs_recursive(a, b)
        assert rouge_l(a, b) == rouge_l_oracle(a, b)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 4), max_size=12), st.lists(st.integers(0, 4), max_size=12))
def test_rouge_properties(a, b):
    score = rouge_l(a, b)
    assert 0.0 <= score <= 1.0
    assert score == rouge_l(b, a)
    assert lcs_length(a, b) <= min(len(a), len(b))


def test_mean_rouge():
    assert mean_rouge_l([[1, 2], [3]], [[1, 2], [4]]) == 0.5
    with pytest.raises(ValueError):
        mean_rouge_l([[1]], [])


# ---------------------------------------------------------------- finetune
def test_reversal_task_is_learned(reversal_model):
    assert reversal_model.rouge_l >= 0.9
    assert reversal_model.train_loss < 0.1
    rows = (reversal_model.trainer.out_dir / "rouge.csv").read_text().splitlines()
    assert rows[0] == "step,rouge_l" and len(rows) == 1 + 3


def test_abc_decodes_to_cba(reversal_model):
    trainer = reversal_model.trainer
    vocab = trainer.vocab
    out = greedy_decode(trainer.params, trainer.model_cfg, vocab.tokenize("abc") + [vocab.eos_id], 16, 1, 2)
    assert vocab.detokenize(out) == "cba"


def test_finetune_resume_continues_identically(init_checkpoint, tmp_path):
    pairs = read_pairs_default()

    def make(steps):
        run = reversal_finetune_config(steps)
        run.train.micro_batch_size = 8
        run.train.checkpoint_interval = 3
        run.train.eval_interval = 1000
        run.model.dropout = 0.1
        return run

    losses = []
    straight = finetune(make(6), init_checkpoint, tmp_path / "a", pairs, pairs[:4], on_step=lambda r: losses.append(r.loss))
    mid = tmp_path / "a" / "checkpoints" / "step00000003"
    resumed_losses = []
    resumed = finetune(make(6), mid, tmp_path / "b", pairs, pairs[:4], on_step=lambda r: resumed_losses.append(r.loss))
    assert resumed_losses == losses[3:]
    assert params_digest(straight.trainer.params) == params_digest(resumed.trainer.params)


def read_pairs_default():
    from deskt5.config import BUNDLED_REVERSAL

    return read_pairs(BUNDLED_REVERSAL)


def test_empty_tsv_is_an_error(init_checkpoint, tmp_path):
    (tmp_path / "empty.tsv").write_text("", encoding="utf-8")
    run = reversal_finetune_config(1)
    run.data.finetune_train = str(tmp_path / "empty.tsv")
    with pytest.raises(ValueError, match="empty"):
        finetune(run, init_checkpoint, tmp_path / "out")


def test_vocab_mismatch_is_an_error(init_checkpoint, tmp_path):
    words = ["<pad>", "</s>", "<s>"] + [f"w{i}" for i in range(381)]
    (tmp_path / "vocab.txt").write_text("\n".join(words) + "\n", encoding="utf-8")
    run = reversal_finetune_config(1)
    run.data.vocab = "words"
    run.data.vocab_file = str(tmp_path / "vocab.txt")
    with pytest.raises(VocabMismatchError):
        finetune(run, init_checkpoint, tmp_path / "out")
    run.data.vocab_file = ""
    run.data.vocab = "bytes"
    run.model.vocab_size = 512
    # the checkpoint's model config wins; a byte vocabulary of another size does not fit it
    pairs_path = tmp_path / "p.tsv"
    write_pairs(pairs_path, [("ab", "ba")])
    run.data.finetune_train = str(pairs_path)
    assert finetune(run, init_checkpoint, tmp_path / "ok").step == 1


def test_targets_are_truncated_to_length(init_checkpoint, tmp_path):
    run = reversal_finetune_config(2)
    run.data.finetune_input_length = 4
    run.data.finetune_target_length = 3
    result = finetune(run, init_checkpoint, tmp_path, [("abcdefgh", "hgfedcba")], [("abcdefgh", "hgfedcba")])
    assert result.step == 2 and math.isfinite(result.train_loss)


def test_rouge_on_pairs_untrained_is_low(init_checkpoint):
    from deskt5.checkpoint import load_checkpoint
    from deskt5.data.vocab import ByteVocab
    from deskt5.tensor import Tensor

    ckpt = load_checkpoint(init_checkpoint)
    params = {k: Tensor(v) for k, v in ckpt.params.items()}
    score = rouge_on_pairs(params, ckpt.model_config, ByteVocab(), [("abc", "cba")], 8)
    assert 0.0 <= score < 0.9
