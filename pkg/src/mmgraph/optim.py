"""Adam with bias correction and a linear-warm-up / cosine-annealing schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mmgraph.tensor import ShapeError, Tensor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
              state: AdamState, lr: float) -> None:
    """Apply one Adam update in place to every tensor in ``params``.

    A missing gradient (``None``) is treated as zero, so that parameters a
    variant never touches still share the step count and stay put.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 1e-4
    warmup_epochs: int = 5
    total_epochs: int = 50

    def __post_init__(self):
        if self.base_lr < 0:
            raise ValueError("base_lr must be non-negative")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Learning rate for a zero-based epoch index.

    Epochs ``0..w-1`` ramp linearly through ``base/w, 2*base/w, ..., base``;
    from epoch ``w`` (which is again ``base``) a half-cosine decays over the
    remaining ``total - w`` epochs without reaching zero.
    """
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    w = schedule.warmup_epochs
    if epoch < w:
        return schedule.base_lr * (epoch + 1) / w
    progress = (epoch - w) / (schedule.total_epochs - w)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
