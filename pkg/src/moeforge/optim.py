"""Adam with bias correction and the inverse-square-root learning rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> AdamState:
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **kw,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
              state: AdamState, lr: float) -> None:
    """Apply one bias-corrected Adam update in place; ``None`` grads count as zero."""
    if not lr > 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(grads: Sequence[np.ndarray | None], max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads if g is not None))
    if total > max_norm:
        for g in grads:
            if g is not None:
                g *= max_norm / total
    return total


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 0.03
    warmup_steps: int = 5000

    def __post_init__(self):
        if self.base_lr <= 0 or self.warmup_steps < 1:
            raise ValueError("base_lr must be positive and warmup_steps >= 1")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    w = schedule.warmup_steps
    return schedule.base_lr * min(step * w**-1.5, step**-0.5)


@dataclass
class Optimizer:
    """Adam over a fixed parameter list, stepping the schedule on each update."""

    params: list[Tensor]
    schedule: LrSchedule
    clip_norm: float | None = None
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.for_params(self.params)

    @property
    def step_count(self) -> int:
        return self.state.step

    def current_lr(self) -> float:
        return lr_at(self.schedule, self.state.step + 1)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        lr = self.current_lr()
        grads = [p.grad for p in self.params]
        if self.clip_norm is not None:
            clip_grad_norm(grads, self.clip_norm)
        adam_step(self.params, grads, self.state, lr)
        return lr
