from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from deskt5.config import RunConfig  # noqa: E402
from deskt5.data.corruption import compute_span_lengths  # noqa: E402


def small_run(input_length: int = 32, steps: int = 6, micro: int = 4, accum: int = 1, **train) -> RunConfig:
    """Nano model on the bundled corpus, short sequences, 64-bit."""
    run = RunConfig()
    run.data.input_length = input_length
    run.data.target_length = compute_span_lengths(input_length, 0.15, 3.0)[1]
    run.data.prefetch = 0
    run.optim.kind = "adamw_rms"
    run.schedule.kind = "cosine"
    run.schedule.peak_lr = 1e-2
    run.schedule.warmup_steps = 2
    run.train.total_steps = steps
    run.train.micro_batch_size = micro
    run.train.grad_accum_steps = accum
    run.train.eval_interval = 1000
    run.train.eval_batches = 1
    run.train.checkpoint_interval = 1000
    for k, v in train.items():
        setattr(run.train, k, v)
    return run


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def reversal_finetune_config(steps: int = 300) -> RunConfig:
    """Settings used to fit the bundled string-reversal task."""
    run = RunConfig()
    run.train.precision = "f32"
    run.train.total_steps = steps
    run.train.micro_batch_size = 32
    run.train.grad_accum_steps = 1
    run.train.eval_interval = 100
    run.train.checkpoint_interval = steps
    run.data.finetune_input_length = 16
    run.data.finetune_target_length = 16
    run.optim.kind = "adamw_rms"
    run.schedule.kind = "constant"
    run.schedule.peak_lr = 1e-2
    run.schedule.warmup_steps = 50
    return run


@pytest.fixture(scope="session")
def init_checkpoint(tmp_path_factory):
    """An untrained nano checkpoint (pre-training with zero steps)."""
    from deskt5.trainer import pretrain

    run = RunConfig()
    run.train.total_steps = 0
    run.train.precision = "f32"
    run.train.eval_batches = 1
    run.data.prefetch = 0
    return pretrain(run, tmp_path_factory.mktemp("init")).checkpoint


@pytest.fixture(scope="session")
def reversal_model(init_checkpoint, tmp_path_factory):
    from deskt5.trainer import finetune

    return finetune(reversal_finetune_config(), init_checkpoint, tmp_path_factory.mktemp("reversal"))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
