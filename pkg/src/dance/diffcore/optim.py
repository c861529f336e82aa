"""AdamW and the one-cycle learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .tensor import Parameter


def adamw_step(params: Iterable[Parameter], lr: float, weight_decay: float = 0.01,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> int:
    """One decoupled-weight-decay Adam update; returns how many parameters were skipped.

    Parameters without a gradient are left alone. A parameter whose gradient
    holds a non-finite value is skipped and counted. Gradients are cleared.
    """
    b1, b2 = betas
    skipped = 0
    for p in params:
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            skipped += 1
            p.grad = None
            continue
        p.step += 1
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.m *= b1
        p.m += (1.0 - b1) * g
        p.v *= b2
        p.v += (1.0 - b2) * g * g
        m_hat = p.m / (1.0 - b1 ** p.step)
        v_hat = p.v / (1.0 - b2 ** p.step)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad = None
    return skipped


@dataclass(frozen=True)
class LrSchedule:
    peak: float
    total_steps: int
    warmup_frac: float = 0.30
    floor_frac: float = 1.0 / 25.0

    def __post_init__(self):
        if self.peak <= 0 or self.total_steps < 1:
            raise ValueError("peak must be positive and total_steps >= 1")
        if not 0.0 <= self.warmup_frac <= 1.0 or not 0.0 < self.floor_frac <= 1.0:
            raise ValueError("warmup_frac must be in [0, 1] and floor_frac in (0, 1]")


def onecycle_lr(schedule: LrSchedule, step: int) -> float:
    """Cosine ramp floor -> peak over the warm-up, then cosine decay back to the floor."""
    total = schedule.total_steps
    if not 0 <= step <= total:
        raise IndexError(f"step {step} outside [0, {total}]")
    peak = schedule.peak
    floor = peak * schedule.floor_frac
    warm = schedule.warmup_frac * total
    if warm > 0 and step <= warm:
        frac = step / warm
        return floor + (peak - floor) * 0.5 * (1.0 - math.cos(math.pi * frac))
    frac = (step - warm) / (total - warm)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Parameter group with its own schedule; counts skipped non-finite updates."""

    def __init__(self, params: Sequence[Parameter], lr: float, total_steps: int,
                 weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8,
                 warmup_frac: float = 0.30):
        self.params = list(params)
        self.lr = lr
        self.schedule = LrSchedule(lr, max(1, total_steps), warmup_frac) if lr > 0 else None
        self.weight_decay = weight_decay
        self.betas = tuple(betas)
        self.eps = eps
        self.t = 0
        self.skipped = 0

    def current_lr(self) -> float:
        if self.schedule is None:
            return 0.0
        return onecycle_lr(self.schedule, min(self.t, self.schedule.total_steps))

    def step(self) -> None:
        lr = self.current_lr()
        if lr == 0.0:
            for p in self.params:
                p.grad = None
        else:
            self.skipped += adamw_step(self.params, lr, self.weight_decay, self.betas, self.eps)
        self.t += 1

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
