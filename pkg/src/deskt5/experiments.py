"""Desk-scale optimizer x schedule grid (Adafactor / RMS-scaled AdamW x ISR / cosine)."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig
from .data.corruption import compute_span_lengths
from .metrics import read_metrics
from .trainer import TrainingDivergedError, pretrain

logger = logging.getLogger(__name__)

GRID_OPTIMIZERS = ("adafactor", "adamw_rms")
GRID_SCHEDULES = ("isr", "cosine")
LABELS = {"adafactor": "Adafactor", "adamw_rms": "AdamW+RMS", "adamw": "AdamW", "isr": "Inverse-Square-Root", "cosine": "Cosine"}

# Peak learning rates per optimizer; ISR uses peak * sqrt(warmup) as its base so
# both schedules start decaying from the same rate.
DESK_PEAK_LR = {"adafactor": 1e-2, "adamw_rms": 2e-2, "adamw": 1e-3}


@dataclass
class CellResult:
    optimizer: str
    schedule: str
    initial_loss: float
    final_loss: float
    heldout_loss: float
    diverged: bool
    out_dir: Path


def desk_config(
    optimizer: str,
    schedule: str,
    steps: int = 2000,
    input_length: int = 64,
    micro_batch_size: int = 32,
    grad_accum_steps: int = 1,
    warmup_steps: int = 100,
    seed: int = 0,
    base: RunConfig | None = None,
) -> RunConfig:
    """Nano model, bundled corpus, float32, effective batch 32."""
    run = copy.deepcopy(base) if base is not None else RunConfig()
    run.model.preset = "nano"
    run.data.input_length = input_length
    run.data.target_length = compute_span_lengths(input_length, run.data.noise_density, run.data.mean_span_length)[1]
    run.data.prefetch = 8
    run.optim.kind = optimizer
    peak = DESK_PEAK_LR[optimizer]
    run.schedule.kind = schedule
    run.schedule.warmup_steps = warmup_steps
    run.schedule.peak_lr = peak * math.sqrt(warmup_steps) if schedule == "isr" else peak
    run.schedule.final_lr = peak / 100 if schedule == "cosine" else None
    t = run.train
    t.total_steps = steps
    t.micro_batch_size = micro_batch_size
    t.grad_accum_steps = grad_accum_steps
    t.eval_interval = max(1, steps // 4)
    t.eval_batches = 2
    t.checkpoint_interval = max(1, steps)
    t.seed = seed
    t.precision = "f32"
    return run


def _final_train_loss(rows: list[dict], window: int) -> float:
    train = [r["loss"] for r in rows if r["split"] == "train"]
    tail = train[-window:]
    return sum(tail) / len(tail)


def run_cell(optimizer: str, schedule: str, out_dir, window: int = 50, **kw) -> CellResult:
    out_dir = Path(out_dir)
    run = desk_config(optimizer, schedule, **kw)
    diverged = False
    heldout = math.nan
    try:
        result = pretrain(run, out_dir)
        heldout = result.heldout_loss
    except TrainingDivergedError:
        diverged = True
    rows = read_metrics(out_dir / "metrics.csv")
    train = [r for r in rows if r["split"] == "train"]
    initial = train[0]["loss"] if train else math.nan
    final = _final_train_loss(rows, window) if train else math.nan
    logger.info("%s/%s: initial %.4f final %.4f heldout %.4f", optimizer, schedule, initial, final, heldout)
    return CellResult(optimizer, schedule, initial, final, heldout, diverged, out_dir)


def run_grid(out_dir, optimizers=GRID_OPTIMIZERS, schedules=GRID_SCHEDULES, **kw) -> dict[tuple[str, str], CellResult]:
    out_dir = Path(out_dir)
    results = {}
    for opt in optimizers:
        for sched in schedules:
            results[(opt, sched)] = run_cell(opt, sched, out_dir / f"{opt}-{sched}", **kw)
    return results


def format_table(results: dict[tuple[str, str], CellResult], field: str = "heldout_loss") -> str:
    """Rows are optimizers, columns are schedules, cells hold NLL (``diverged`` if it blew up)."""
    optimizers = list(dict.fromkeys(k[0] for k in results))
    schedules = list(dict.fromkeys(k[1] for k in results))
    head = "| | " + " | ".join(LABELS.get(s, s) for s in schedules) + " |"
    sep = "|---|" + "---|" * len(schedules)
    lines = [head, sep]
    for opt in optimizers:
        cells = []
        for sched in schedules:
            cell = results.get((opt, sched))
            if cell is None:
                cells.append("")
            elif cell.diverged:
                cells.append("diverged")
            else:
                cells.append(f"{getattr(cell, field):.3f}")
        lines.append(f"| {LABELS.get(opt, opt)} | " + " | ".join(cells) + " |")
    return "\n".join(lines)
