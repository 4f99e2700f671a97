"""AdamW, AdamW with per-tensor RMS learning-rate scaling, and Adafactor.

Steps operate on dictionaries of numpy arrays keyed by parameter name and
update parameters in place. Each step function advances ``state.step`` by
one before computing the update and returns the applied deltas.

The RMS-scaled AdamW multiplies the learning rate of every parameter tensor
by ``max(rms_eps, rms(W))``, with ``W`` taken before the update. This is the
relative step size Adafactor uses, applied on top of exact (unfactored)
Adam moments.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

OPTIMIZERS = ("adamw", "adamw_rms", "adafactor")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


@dataclass(frozen=True)
class AdamHyper:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    rms_eps: float = 1e-3

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.rms_eps <= 0:
            raise ValueError("rms_eps must be > 0")


@dataclass(frozen=True)
class AdafactorHyper:
    eps1: float = 1e-30
    eps2: float = 1e-3
    clip_threshold: float = 1.0
    decay_rate: float = 0.8

    def __post_init__(self):
        if self.eps1 <= 0:
            raise ValueError("eps1 must be > 0")
        if self.clip_threshold <= 0:
            raise ValueError("clip_threshold must be > 0")
        if not 0.0 < self.decay_rate <= 1.0:
            raise ValueError("decay_rate must be in (0, 1]")


@dataclass
class OptimizerState:
    """Step counter plus named per-parameter accumulators.

    Adam variants keep ``m`` and ``v``. Adafactor keeps ``row`` and ``col``
    for tensors with two or more dimensions and ``v`` otherwise.
    """

    step: int = 0
    slots: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        """Flat ``param/slot -> array`` view, in a stable order."""
        return {f"{p}/{k}": a for p in sorted(self.slots) for k, a in sorted(self.slots[p].items())}

    @classmethod
    def from_arrays(cls, step: int, arrays: dict[str, np.ndarray]) -> OptimizerState:
        state = cls(step=step)
        for key, arr in arrays.items():
            p, k = key.rsplit("/", 1)
            state.slots.setdefault(p, {})[k] = arr
        return state


def rms(x) -> float:
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("rms of an empty tensor")
    return float(np.sqrt(np.mean(np.square(x))))


def _check_finite(grads) -> None:
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(name)


def adam_update(w, g, m, v, t: int, hyper: AdamHyper, lr: float):
    """One AdamW update for a single tensor: returns ``(delta, m, v)``."""
    m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
    v = hyper.beta2 * v + (1.0 - hyper.beta2) * (g * g)
    m_hat = m / (1.0 - hyper.beta1**t)
    v_hat = v / (1.0 - hyper.beta2**t)
    delta = -lr * (m_hat / (np.sqrt(v_hat) + hyper.eps) + hyper.weight_decay * w)
    return delta, m, v


def _adam_family_step(params, grads, state: OptimizerState, hyper: AdamHyper, lr: float, rms_scale: bool):
    _check_finite(grads)
    state.step += 1
    t = state.step
    deltas = {}
    for name, w in params.items():
        g = grads[name]
        slot = state.slots.get(name)
        if slot is None:
            slot = state.slots[name] = {"m": np.zeros_like(w), "v": np.zeros_like(w)}
        step_lr = lr * max(hyper.rms_eps, rms(w)) if rms_scale else lr
        delta, slot["m"], slot["v"] = adam_update(w, g, slot["m"], slot["v"], t, hyper, step_lr)
        w += delta
        deltas[name] = delta
    return deltas


def adamw_step(params, grads, state: OptimizerState, hyper: AdamHyper, lr: float):
    """Decoupled-weight-decay Adam with bias correction."""
    return _adam_family_step(params, grads, state, hyper, lr, rms_scale=False)


def adamw_rms_step(params, grads, state: OptimizerState, hyper: AdamHyper, lr: float):
    """AdamW whose per-tensor learning rate is ``lr * max(rms_eps, rms(W))``."""
    return _adam_family_step(params, grads, state, hyper, lr, rms_scale=True)


def factored_second_moment(row: np.ndarray, col: np.ndarray) -> np.ndarray:
    """Rank-one estimate ``outer(row, col) / sum(row)`` over the last two axes."""
    return row[..., :, None] * col[..., None, :] / row.sum(axis=-1)[..., None, None]


def adafactor_update(w, g, slot: dict, t: int, hyper: AdafactorHyper, lr: float):
    """One Adafactor update without momentum; returns ``(delta, slot)``."""
    beta2 = 1.0 - t ** (-hyper.decay_rate)
    sq = g * g + hyper.eps1
    if w.ndim >= 2:
        row = beta2 * slot["row"] + (1.0 - beta2) * sq.sum(axis=-1)
        col = beta2 * slot["col"] + (1.0 - beta2) * sq.sum(axis=-2)
        slot = {"row": row, "col": col}
        v_hat = factored_second_moment(row, col)
    else:
        v = beta2 * slot["v"] + (1.0 - beta2) * sq
        slot = {"v": v}
        v_hat = v
    u = g / np.sqrt(v_hat)
    u = u / max(1.0, rms(u) / hyper.clip_threshold)
    delta = -lr * max(hyper.eps2, rms(w)) * u
    return delta, slot


def adafactor_step(params, grads, state: OptimizerState, hyper: AdafactorHyper, lr: float):
    _check_finite(grads)
    state.step += 1
    deltas = {}
    for name, w in params.items():
        slot = state.slots.get(name)
        if slot is None:
            if w.ndim >= 2:
                slot = {"row": np.zeros(w.shape[:-1], w.dtype), "col": np.zeros(w.shape[:-2] + w.shape[-1:], w.dtype)}
            else:
                slot = {"v": np.zeros_like(w)}
        delta, state.slots[name] = adafactor_update(w, grads[name], slot, state.step, hyper, lr)
        w += delta
        deltas[name] = delta
    return deltas


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))


def clip_global_norm(grads, max_norm: float):
    """Scale all gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns ``(grads, norm)`` where ``norm`` is measured before clipping.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NonFiniteGradientError(next((n for n, g in grads.items() if not np.isfinite(g).all()), "<global>"))
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return grads, norm


class Optimizer:
    """Selects one of the step functions and owns its state."""

    def __init__(self, kind: str = "adamw_rms", adam: AdamHyper | None = None, adafactor: AdafactorHyper | None = None):
        if kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {kind!r}; choose one of {OPTIMIZERS}")
        self.kind = kind
        self.adam = adam or AdamHyper()
        self.adafactor = adafactor or AdafactorHyper()
        self.state = OptimizerState()

    def step(self, params, grads, lr: float):
        if self.kind == "adamw":
            return adamw_step(params, grads, self.state, self.adam, lr)
        if self.kind == "adamw_rms":
            return adamw_rms_step(params, grads, self.state, self.adam, lr)
        return adafactor_step(params, grads, self.state, self.adafactor, lr)

    def hyper_dict(self) -> dict:
        return asdict(self.adafactor) if self.kind == "adafactor" else asdict(self.adam)
