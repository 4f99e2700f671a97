"""Command-line entry point.

    deskt5 pretrain  [--config FILE] [--set section.key=value ...] [--resume CKPT]
    deskt5 finetune  --checkpoint CKPT [--set data.finetune_train=pairs.tsv ...]
    deskt5 eval      --checkpoint CKPT
    deskt5 decode    --checkpoint CKPT --text "abc" [--max-len N]
    deskt5 data-stats [--num-examples N]
    deskt5 grid      [--steps N]

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or configuration error.
Runs are written below ``--out-dir`` (default: ``$DESKT5_OUT_ROOT`` or ``./runs``).
"""

from __future__ import annotations

import argparse
import collections
import logging
import os
import sys
import time
from itertools import islice
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config, write_snapshot
from .data.corruption import SpanLengthError
from .data.stream import TokenStream, span_examples
from .data.vocab import VocabParseError, load_vocab
from .model import greedy_decode
from .trainer import (
    TrainingDivergedError,
    VocabMismatchError,
    evaluate_nll,
    finetune,
    heldout_batches,
    pretrain,
)

OUT_ROOT_ENV = "DESKT5_OUT_ROOT"
SUBCOMMANDS = ("pretrain", "finetune", "eval", "decode", "data-stats", "grid")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections: model, data, optim, schedule, train)")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="override one config field; repeatable, applied after --config, last one wins",
    )
    common.add_argument("--seed", type=int, help="shortcut for --set train.seed=N")
    common.add_argument("--out-dir", help=f"output root (default: ${OUT_ROOT_ENV} or ./runs)")
    common.add_argument("--run-name", help="run directory name (default: <command>-<timestamp>-seed<N>)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="deskt5", description="Desk-scale T5 pre-training and fine-tuning.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    p = sub.add_parser("pretrain", parents=[common], help="span-corruption pre-training")
    p.add_argument("--resume", help="checkpoint directory to resume from")

    p = sub.add_parser("finetune", parents=[common], help="seq2seq fine-tuning from a checkpoint")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("eval", parents=[common], help="held-out NLL of a checkpoint")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("decode", parents=[common], help="greedy decoding of one input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--max-len", type=int, default=64)

    p = sub.add_parser("data-stats", parents=[common], help="inspect span-corruption statistics")
    p.add_argument("--num-examples", type=int, default=1000)

    p = sub.add_parser("grid", parents=[common], help="desk-scale optimizer x schedule grid")
    p.add_argument("--steps", type=int, default=2000)
    return parser


def parse_cli(argv=None) -> tuple[str, RunConfig, argparse.Namespace]:
    """Parse arguments and build the layered config. Raises ``SystemExit(2)`` on usage errors."""
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    cfg = load_config(args.config, overrides)
    cfg.validate()
    return args.command, cfg, args


def run_dir(args, cfg: RunConfig) -> Path:
    root = Path(args.out_dir or os.environ.get(OUT_ROOT_ENV) or "runs")
    name = args.run_name or f"{args.command}-{time.strftime('%Y%m%d-%H%M%S')}-seed{cfg.train.seed}"
    return root / name


def run_data_stats(cfg: RunConfig, num_examples: int = 1000) -> dict:
    """Corrupt ``num_examples`` chunks of the configured corpus and summarise them."""
    if num_examples <= 0:
        raise ValueError("num_examples must be positive")
    vocab = cfg.data.load_vocab(cfg.model.resolve().vocab_size)
    ccfg = cfg.data.corruption(vocab)
    raw = ccfg.tokens_length
    stream = TokenStream(cfg.data.corpus_path(), vocab, raw)
    fractions, sentinels = [], collections.Counter()
    in_lens, tgt_lens = collections.Counter(), collections.Counter()
    for inp, tgt in islice(span_examples(stream, ccfg, cfg.train.seed, repeat=True), num_examples):
        n_sent = sum(1 for t in inp if vocab.is_sentinel(int(t)))
        masked = len(tgt) - 1 - n_sent
        fractions.append(masked / raw)
        sentinels[n_sent] += 1
        in_lens[len(inp)] += 1
        tgt_lens[len(tgt)] += 1
    if not fractions:
        raise ValueError(f"corpus {cfg.data.corpus_path()} yields no examples of {raw} raw tokens")
    return {
        "examples": len(fractions),
        "raw_length": raw,
        "masked_fraction": float(np.mean(fractions)),
        "sentinel_counts": dict(sentinels),
        "input_lengths": dict(in_lens),
        "target_lengths": dict(tgt_lens),
    }


def _vocab_from_checkpoint(ckpt):
    info = ckpt.vocab or {"kind": "bytes", "size": ckpt.model_config.vocab_size}
    return load_vocab(info.get("kind", "bytes"), info.get("size", ckpt.model_config.vocab_size), info.get("file") or None)


def run_decode(checkpoint, text: str, max_len: int) -> str:
    ckpt = load_checkpoint(checkpoint)
    vocab = _vocab_from_checkpoint(ckpt)
    from .tensor import Tensor

    params = {k: Tensor(v) for k, v in ckpt.params.items()}
    ids = vocab.tokenize(text) + [vocab.eos_id]
    out = greedy_decode(params, ckpt.model_config, ids, max_len, vocab.eos_id, vocab.start_id)
    return vocab.detokenize(out)


def run_eval(cfg: RunConfig, checkpoint) -> float:
    ckpt = load_checkpoint(checkpoint)
    vocab = _vocab_from_checkpoint(ckpt)
    from .tensor import Tensor

    params = {k: Tensor(v) for k, v in ckpt.params.items()}
    return evaluate_nll(params, ckpt.model_config, heldout_batches(cfg, vocab))


def _print_stats(report: dict) -> None:
    print(f"examples:        {report['examples']}")
    print(f"raw length:      {report['raw_length']}")
    print(f"masked fraction: {report['masked_fraction']:.4f}")
    print(f"sentinels/example: {report['sentinel_counts']}")
    print(f"input lengths:   {report['input_lengths']}")
    print(f"target lengths:  {report['target_lengths']}")


def main(argv=None) -> int:
    try:
        command, cfg, args = parse_cli(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (ConfigError, SpanLengthError, VocabParseError) as exc:
        print(f"deskt5: config error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if command == "data-stats":
            _print_stats(run_data_stats(cfg, args.num_examples))
        elif command == "decode":
            print(run_decode(args.checkpoint, args.text, args.max_len))
        elif command == "eval":
            print(f"heldout_nll {run_eval(cfg, args.checkpoint):.6f}")
        elif command == "pretrain":
            out = run_dir(args, cfg)
            result = pretrain(cfg, out, resume_from=args.resume)
            print(f"run: {out}\ncheckpoint: {result.checkpoint}\ntrain_nll {result.train_loss:.6f}\nheldout_nll {result.heldout_loss:.6f}")
        elif command == "finetune":
            out = run_dir(args, cfg)
            result = finetune(cfg, args.checkpoint, out)
            print(f"run: {out}\ncheckpoint: {result.checkpoint}\ntrain_nll {result.train_loss:.6f}\nrouge_l {result.rouge_l:.4f}")
        elif command == "grid":
            from .experiments import format_table, run_grid

            out = run_dir(args, cfg)
            out.mkdir(parents=True, exist_ok=True)
            write_snapshot(cfg, out / "config.snapshot")
            results = run_grid(out, steps=args.steps, seed=cfg.train.seed, base=cfg)
            table = format_table(results)
            (out / "results.md").write_text(table + "\n", encoding="utf-8")
            print(table)
    except ConfigError as exc:
        print(f"deskt5: config error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"deskt5: {exc}", file=sys.stderr)
        return 1
    except (OSError, CheckpointError, VocabMismatchError, ValueError) as exc:
        print(f"deskt5: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
