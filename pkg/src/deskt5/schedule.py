"""Learning-rate schedules as pure functions of the step number."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

SCHEDULES = ("isr", "cosine", "constant")


@dataclass(frozen=True)
class ScheduleSpec:
    """``peak_lr`` is the base rate for ISR and the plateau for the others.

    ISR: ``peak_lr / sqrt(max(step, warmup_steps))`` (flat during warmup).
    Cosine: linear warmup to ``peak_lr`` then half-cosine down to ``final_lr``
    at ``total_steps``; ``final_lr=None`` means ``peak_lr / 20``.
    """

    kind: str = "cosine"
    peak_lr: float = 2e-2
    final_lr: float | None = None
    warmup_steps: int = 10_000
    total_steps: int = 65_536

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.kind!r}; choose one of {SCHEDULES}")
        if self.warmup_steps < 0 or self.total_steps < 0:
            raise ValueError("step counts must be nonnegative")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.peak_lr < 0 or (self.final_lr is not None and self.final_lr < 0):
            raise ValueError("learning rates must be nonnegative")

    @property
    def end_lr(self) -> float:
        return self.peak_lr / 20 if self.final_lr is None else self.final_lr

    def to_dict(self) -> dict:
        return asdict(self)


def isr_lr(step: int, spec: ScheduleSpec) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    denom = max(step, spec.warmup_steps)
    if denom == 0:
        raise ZeroDivisionError("inverse-square-root schedule at step 0 needs warmup_steps > 0")
    return spec.peak_lr / math.sqrt(denom)


def _warmup(step: int, spec: ScheduleSpec) -> float:
    return spec.peak_lr * step / spec.warmup_steps


def cosine_lr(step: int, spec: ScheduleSpec) -> float:
    """Steps past ``total_steps`` stay at the final rate."""
    if step < 0:
        raise ValueError("step must be >= 0")
    w, total = spec.warmup_steps, spec.total_steps
    if step < w:
        return _warmup(step, spec)
    if step >= total:
        return spec.peak_lr if total == w else spec.end_lr
    progress = (step - w) / (total - w)
    final = spec.end_lr
    return final + 0.5 * (spec.peak_lr - final) * (1.0 + math.cos(math.pi * progress))


def constant_lr(step: int, spec: ScheduleSpec) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < spec.warmup_steps:
        return _warmup(step, spec)
    return spec.peak_lr


_FUNCS = {"isr": isr_lr, "cosine": cosine_lr, "constant": constant_lr}


def lr_at(step: int, spec: ScheduleSpec) -> float:
    return _FUNCS[spec.kind](step, spec)
