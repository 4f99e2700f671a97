"""Pre-training and fine-tuning loops.

One optimizer step averages the gradients of ``grad_accum_steps``
micro-batches, weighting each by its number of target tokens so the result
equals the gradient of one large batch. Gradients are then clipped by global
norm and handed to the optimizer with the scheduled learning rate for the
(1-based) step number being taken.

A non-finite loss or gradient stops the run: a ``diverged`` metrics row and
a crash checkpoint are written before :class:`TrainingDivergedError` is
raised.
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass
from itertools import islice
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import BUNDLED_REVERSAL, ConfigError, RunConfig, write_snapshot
from .data.stream import (
    Batch,
    Prefetcher,
    TokenStream,
    batches,
    pad_batch,
    read_pairs,
    span_examples,
)
from .data.vocab import Vocab
from .metrics import MetricsRow, MetricsWriter, mean_rouge_l
from .model import ModelConfig, forward_loss, greedy_decode_batch, init_params
from .optim import NonFiniteGradientError, Optimizer, OptimizerState, clip_global_norm, global_norm
from .schedule import lr_at

logger = logging.getLogger(__name__)

HELDOUT_SEED_OFFSET = 1_000_003


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, reason: str, checkpoint: Path):
        super().__init__(f"training diverged at step {step}: {reason} (crash checkpoint: {checkpoint})")
        self.step = step
        self.reason = reason
        self.checkpoint = checkpoint


class NonFiniteLossError(FloatingPointError):
    pass


class VocabMismatchError(ValueError):
    pass


# ------------------------------------------------------------- primitives
def accumulate_gradients(params, cfg: ModelConfig, micro_batches: list[Batch], rng=None):
    """Token-weighted mean gradient over ``micro_batches``.

    Returns ``(grads, loss, num_tokens)`` where ``loss`` is the token-weighted
    mean NLL. ``params`` grads are reset first.
    """
    if not micro_batches:
        raise ValueError("accumulate_gradients needs at least one micro-batch")
    counts = [mb.num_target_tokens for mb in micro_batches]
    total = sum(counts)
    if total == 0:
        raise T.UndefinedMeanError("no target tokens in any micro-batch")
    for p in params.values():
        p.zero_grad()
    loss_sum = 0.0
    for mb, n in zip(micro_batches, counts):
        if n == 0:
            continue
        loss = forward_loss(params, cfg, mb, rng)
        loss_sum += loss.item() * n
        T.backward(T.scale(loss, n / total))
    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}
    return grads, loss_sum / total, total


def evaluate_nll(params, cfg: ModelConfig, eval_batches: Iterable[Batch], max_batches: int | None = None) -> float:
    """Token-weighted mean NLL, without recording a graph or touching parameters."""
    nll, tokens = 0.0, 0
    with T.no_grad():
        for batch in islice(eval_batches, max_batches):
            n = batch.num_target_tokens
            if n == 0:
                continue
            nll += forward_loss(params, cfg, batch).item() * n
            tokens += n
    if tokens == 0:
        raise ValueError("evaluation stream is empty")
    return nll / tokens


def params_digest(params) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- trainer
class Trainer:
    """Owns parameters, optimizer, dropout RNG, step counter and metrics for one run."""

    def __init__(self, run: RunConfig, out_dir, model_cfg: ModelConfig | None = None, kind: str = "pretrain"):
        run.validate()
        self.run = run
        self.kind = kind
        self.model_cfg = model_cfg or run.model.resolve()
        self.dtype = np.float64 if run.train.precision == "f64" else np.float32
        self.vocab: Vocab = run.data.load_vocab(self.model_cfg.vocab_size)
        self.params = init_params(self.model_cfg, run.train.seed, self.dtype, run.model.zero_init_head)
        self.optimizer = Optimizer(run.optim.kind, run.optim.adam(), run.optim.adafactor())
        self.rng = np.random.default_rng([run.train.seed, 7])
        self.step = 0
        self.cursor = 0
        self.schedule = run.schedule.spec(run.train.total_steps)
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.metrics = MetricsWriter(self.out_dir / "metrics.csv")
        self.grad_hook: Callable[[int, dict], None] | None = None
        self.last_loss = math.nan
        self._t0 = time.perf_counter()

    # ---------------------------------------------------------- state
    def vocab_info(self) -> dict:
        return {
            "kind": self.run.data.vocab,
            "size": self.vocab.size,
            "file": self.run.data.vocab_file,
            "fingerprint": self.vocab.fingerprint(),
        }

    def to_checkpoint(self, metrics: dict | None = None) -> Checkpoint:
        return Checkpoint(
            step=self.step,
            model_config=self.model_cfg,
            params={name: p.data for name, p in self.params.items()},
            optimizer_kind=self.optimizer.kind,
            optimizer_state=self.optimizer.state,
            rng_state=self.rng.bit_generator.state,
            data_cursor=self.cursor,
            kind=self.kind,
            vocab=self.vocab_info(),
            config=self.run.to_dict(),
            metrics=metrics or {},
        )

    def save(self, name: str, metrics: dict | None = None) -> Path:
        return save_checkpoint(self.out_dir / "checkpoints" / name, self.to_checkpoint(metrics))

    def load_params(self, ckpt: Checkpoint) -> None:
        if ckpt.model_config != self.model_cfg:
            raise ConfigError("checkpoint model config differs from the run's model config")
        self.params = {name: T.Tensor(arr.astype(self.dtype), requires_grad=True) for name, arr in ckpt.params.items()}

    def restore(self, ckpt: Checkpoint) -> None:
        """Resume exactly: parameters, optimizer state, RNG, step and data cursor."""
        self.load_params(ckpt)
        if ckpt.optimizer_kind != self.optimizer.kind:
            raise ConfigError(f"checkpoint optimizer {ckpt.optimizer_kind!r} differs from {self.optimizer.kind!r}")
        self.optimizer.state = OptimizerState(
            ckpt.optimizer_state.step,
            {p: {k: a.astype(self.dtype) for k, a in s.items()} for p, s in ckpt.optimizer_state.slots.items()},
        )
        self.rng.bit_generator.state = ckpt.rng_state
        self.step = ckpt.step
        self.cursor = ckpt.data_cursor

    # ----------------------------------------------------------- steps
    def elapsed(self) -> float:
        return time.perf_counter() - self._t0

    def train_step(self, micro_batches: list[Batch]) -> MetricsRow:
        step = self.step + 1
        lr = lr_at(step, self.schedule)
        loss, norm = math.nan, math.nan
        t0 = time.perf_counter()
        try:
            grads, loss, _ = accumulate_gradients(self.params, self.model_cfg, micro_batches, self.rng)
            if self.grad_hook is not None:
                self.grad_hook(step, grads)
            if not math.isfinite(loss):
                raise NonFiniteLossError(f"non-finite loss {loss}")
            clip = self.run.optim.clip_norm
            if clip is not None:
                grads, norm = clip_global_norm(grads, clip)
            else:
                norm = global_norm(grads)
            self.optimizer.step({n: p.data for n, p in self.params.items()}, grads, lr)
        except (NonFiniteGradientError, NonFiniteLossError) as exc:
            self.metrics.write(MetricsRow(step, "diverged", loss, lr, norm, math.nan, self.elapsed()))
            path = self.save(f"crash-step{step:08d}", {"diverged": True, "reason": str(exc), "loss": loss})
            logger.error("diverged at step %d: %s", step, exc)
            raise TrainingDivergedError(step, str(exc), path) from exc
        self.step = step
        self.cursor += sum(len(mb) for mb in micro_batches)
        self.last_loss = loss
        tokens = sum(mb.input_ids.size + mb.labels.size for mb in micro_batches)
        row = MetricsRow(step, "train", loss, lr, norm, tokens / max(time.perf_counter() - t0, 1e-9), self.elapsed())
        self.metrics.write(row)
        return row

    def evaluate(self, eval_batches: list[Batch]) -> float:
        nll = evaluate_nll(self.params, self.model_cfg, eval_batches)
        self.metrics.write(MetricsRow(self.step, "heldout", nll, elapsed_s=self.elapsed()))
        return nll


# --------------------------------------------------------------- pretrain
@dataclass
class RunResult:
    checkpoint: Path
    metrics_path: Path
    step: int
    train_loss: float
    heldout_loss: float
    trainer: Trainer
    rouge_l: float = math.nan


def _pretrain_streams(run: RunConfig, vocab: Vocab):
    data = run.data
    ccfg = data.corruption(vocab)
    raw = ccfg.tokens_length
    if data.heldout_corpus:
        train_stream = TokenStream(data.corpus_path(), vocab, raw)
        heldout_stream = TokenStream(Path(data.heldout_corpus), vocab, raw)
    else:
        every = data.heldout_every
        train_stream = TokenStream(data.corpus_path(), vocab, raw, "train" if every else "all", every)
        heldout_stream = TokenStream(data.corpus_path(), vocab, raw, "heldout" if every else "all", every)
    return ccfg, train_stream, heldout_stream


def heldout_batches(run: RunConfig, vocab: Vocab) -> list[Batch]:
    ccfg, _, stream = _pretrain_streams(run, vocab)
    seed = run.train.seed + HELDOUT_SEED_OFFSET
    examples = span_examples(stream, ccfg, seed)
    out = list(islice(batches(examples, run.train.micro_batch_size, ccfg, vocab.start_id), run.train.eval_batches))
    if not out:
        # a small held-out split still gets evaluated, as one partial batch
        tail = list(islice(span_examples(stream, ccfg, seed), run.train.micro_batch_size))
        if not tail:
            raise ValueError("held-out corpus yields no examples")
        out = list(batches(tail, len(tail), ccfg, vocab.start_id))
    return out


def train_batches(run: RunConfig, vocab: Vocab, cursor: int) -> Iterable[Batch]:
    ccfg, stream, _ = _pretrain_streams(run, vocab)
    mb = run.train.micro_batch_size

    def make():
        return batches(span_examples(stream, ccfg, run.train.seed, start=cursor, repeat=True), mb, ccfg, vocab.start_id)

    if run.data.prefetch > 0:
        return Prefetcher(make, capacity=run.data.prefetch)
    return make()


def pretrain(
    run: RunConfig,
    out_dir,
    resume_from=None,
    grad_hook: Callable[[int, dict], None] | None = None,
    on_step: Callable[[MetricsRow], None] | None = None,
) -> RunResult:
    """Span-corruption pre-training for ``run.train.total_steps`` optimizer steps."""
    trainer = Trainer(run, out_dir)
    trainer.grad_hook = grad_hook
    if resume_from is not None:
        trainer.restore(load_checkpoint(resume_from))
    write_snapshot(run, trainer.out_dir / "config.snapshot")
    tcfg = run.train
    eval_set = heldout_batches(run, trainer.vocab)
    heldout = math.nan
    last_saved = last_eval = -1
    source = train_batches(run, trainer.vocab, trainer.cursor)
    it = iter(source)
    try:
        while trainer.step < tcfg.total_steps:
            micro = list(islice(it, tcfg.grad_accum_steps))
            if len(micro) < tcfg.grad_accum_steps:
                raise ValueError("training corpus is too small to fill a batch")
            row = trainer.train_step(micro)
            if on_step is not None:
                on_step(row)
            if trainer.step % tcfg.eval_interval == 0:
                heldout, last_eval = trainer.evaluate(eval_set), trainer.step
            if trainer.step % tcfg.checkpoint_interval == 0:
                trainer.save(f"step{trainer.step:08d}", {"train_loss": row.loss, "heldout_loss": heldout})
                last_saved = trainer.step
    finally:
        if isinstance(source, Prefetcher):
            source.close()
    if last_eval != trainer.step:
        heldout = trainer.evaluate(eval_set)
    summary = {"train_loss": trainer.last_loss, "heldout_loss": heldout}
    path = trainer.out_dir / "checkpoints" / f"step{trainer.step:08d}"
    if last_saved != trainer.step:
        path = trainer.save(f"step{trainer.step:08d}", summary)
    return RunResult(path, trainer.metrics.path, trainer.step, trainer.last_loss, heldout, trainer)


# --------------------------------------------------------------- finetune
def _encode_pairs(pairs, vocab: Vocab):
    return [(vocab.tokenize(a) + [vocab.eos_id], vocab.tokenize(b) + [vocab.eos_id]) for a, b in pairs]


class FinetuneData:
    """Micro-batch ``j`` is a pure function of ``(seed, j)``: a fixed walk over per-epoch permutations."""

    def __init__(self, encoded, batch_size: int, input_length: int, target_length: int, seed: int, vocab: Vocab):
        self.encoded = encoded
        self.batch_size = batch_size
        self.input_length = input_length
        self.target_length = target_length
        self.seed = seed
        self.vocab = vocab
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            if len(self._perms) > 4:
                self._perms.clear()
            self._perms[epoch] = np.random.default_rng([self.seed, epoch]).permutation(len(self.encoded))
        return self._perms[epoch]

    def batch(self, j: int) -> Batch:
        n = len(self.encoded)
        picks = []
        for pos in range(j * self.batch_size, (j + 1) * self.batch_size):
            epoch, r = divmod(pos, n)
            picks.append(self.encoded[self._perm(epoch)[r]])
        return pad_batch(picks, self.input_length, self.target_length, self.vocab.pad_id, self.vocab.start_id)


def decode_texts(params, cfg: ModelConfig, vocab: Vocab, texts: list[str], max_len: int, input_length=None) -> list[list[int]]:
    inputs = [(vocab.tokenize(t) + [vocab.eos_id])[: input_length or None] for t in texts]
    return greedy_decode_batch(params, cfg, inputs, max_len, vocab.eos_id, vocab.start_id, vocab.pad_id)


def rouge_on_pairs(params, cfg: ModelConfig, vocab: Vocab, pairs, max_len: int, input_length=None) -> float:
    """Mean token-level RougeL of greedy outputs against the targets."""
    outs = decode_texts(params, cfg, vocab, [a for a, _ in pairs], max_len, input_length)
    refs = [vocab.tokenize(b) for _, b in pairs]
    return mean_rouge_l(outs, refs)


def finetune(
    run: RunConfig,
    checkpoint,
    out_dir,
    train_pairs=None,
    eval_pairs=None,
    on_step: Callable[[MetricsRow], None] | None = None,
) -> RunResult:
    """Supervised seq2seq fine-tuning from a checkpoint, with periodic RougeL.

    A fine-tune checkpoint resumes its own optimizer state, step and RNG;
    any other checkpoint only provides the initial parameters.
    """
    ckpt = load_checkpoint(checkpoint)
    data = run.data
    try:
        vocab = data.load_vocab(ckpt.model_config.vocab_size)
    except ConfigError as exc:
        raise VocabMismatchError(str(exc)) from exc
    if ckpt.vocab and ckpt.vocab.get("fingerprint") != vocab.fingerprint():
        raise VocabMismatchError(
            f"checkpoint vocabulary {ckpt.vocab.get('fingerprint')!r} differs from configured {vocab.fingerprint()!r}"
        )
    if train_pairs is None:
        train_pairs = read_pairs(data.finetune_train or BUNDLED_REVERSAL)
    if not train_pairs:
        raise ValueError("fine-tuning data is empty")
    if eval_pairs is None:
        eval_pairs = read_pairs(data.finetune_eval) if data.finetune_eval else train_pairs
    trainer = Trainer(run, out_dir, model_cfg=ckpt.model_config, kind="finetune")
    if ckpt.kind == "finetune":
        trainer.restore(ckpt)
    else:
        trainer.load_params(ckpt)
    write_snapshot(run, trainer.out_dir / "config.snapshot")
    tcfg = run.train
    stream = FinetuneData(
        _encode_pairs(train_pairs, vocab),
        tcfg.micro_batch_size,
        data.finetune_input_length,
        data.finetune_target_length,
        tcfg.seed,
        vocab,
    )
    eval_batch = pad_batch(
        _encode_pairs(eval_pairs, vocab), data.finetune_input_length, data.finetune_target_length,
        vocab.pad_id, vocab.start_id,
    )

    def evaluate():
        nll = trainer.evaluate([eval_batch])
        score = rouge_on_pairs(
            trainer.params, trainer.model_cfg, vocab, eval_pairs, data.finetune_target_length, data.finetune_input_length
        )
        rouge_path = trainer.out_dir / "rouge.csv"
        fresh = not rouge_path.exists()
        with open(rouge_path, "a", encoding="utf-8") as fh:
            if fresh:
                fh.write("step,rouge_l\n")
            fh.write(f"{trainer.step},{score!r}\n")
        return nll, score

    heldout, rouge = math.nan, math.nan
    last_eval = -1
    while trainer.step < tcfg.total_steps:
        first = trainer.step * tcfg.grad_accum_steps
        micro = [stream.batch(first + a) for a in range(tcfg.grad_accum_steps)]
        row = trainer.train_step(micro)
        if on_step is not None:
            on_step(row)
        if trainer.step % tcfg.eval_interval == 0:
            (heldout, rouge), last_eval = evaluate(), trainer.step
        if trainer.step % tcfg.checkpoint_interval == 0:
            trainer.save(f"step{trainer.step:08d}", {"train_loss": row.loss, "rouge_l": rouge})
    if last_eval != trainer.step:
        heldout, rouge = evaluate()
    path = trainer.save(f"step{trainer.step:08d}", {"train_loss": trainer.last_loss, "heldout_loss": heldout, "rouge_l": rouge})
    return RunResult(path, trainer.metrics.path, trainer.step, trainer.last_loss, heldout, trainer, rouge)
