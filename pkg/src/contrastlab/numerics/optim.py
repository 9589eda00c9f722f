"""SGD with heavy-ball momentum and the learning-rate schedules used by the lab."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ConfigError, ContractError
from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ContractError(f"momentum must lie in [0, 1], got {self.momentum}")
        if self.weight_decay < 0:
            raise ContractError(f"weight decay must be >= 0, got {self.weight_decay}")


def _param_key(i: int, p: Tensor) -> str:
    return p.name if p.name is not None else f"#{i}"


def sgd_step(params: Sequence[Tensor], state: OptimizerState) -> None:
    """One in-place update: ``v <- mu*v + g + wd*theta``; ``theta <- theta - lr*v``.

    Gradients are left in place; the caller clears them.
    """
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {_param_key(i, p)!r} has no gradient")
    for i, p in enumerate(params):
        key = _param_key(i, p)
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        v = state.velocity.get(key)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise ContractError(f"velocity for {key!r} has shape {v.shape}, parameter {p.shape}")
        v = state.momentum * v + g
        state.velocity[key] = v
        p.data = p.data - state.lr * v


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


@dataclass(frozen=True)
class Schedule:
    """Per-epoch learning rate.

    kinds: ``cosine`` (linear warm-up then half-cosine decay to zero),
    ``step`` (multiply by ``decay`` at each milestone) and ``constant``.
    """

    kind: str
    base_lr: float
    total_epochs: int = 1
    warmup_epochs: int = 0
    milestones: tuple[int, ...] = ()
    decay: float = 0.1

    def __post_init__(self):
        if self.kind not in ("cosine", "step", "constant"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "cosine" and self.total_epochs > 0:
            if not 0 <= self.warmup_epochs < self.total_epochs:
                raise ConfigError(
                    f"warmup_epochs={self.warmup_epochs} must be < total_epochs={self.total_epochs}"
                )

    @classmethod
    def cosine(cls, base_lr, total_epochs, warmup_epochs=5):
        return cls("cosine", base_lr, total_epochs, warmup_epochs)

    @classmethod
    def step(cls, base_lr, milestones=(25, 37), decay=0.1, total_epochs=50):
        return cls("step", base_lr, total_epochs, milestones=tuple(milestones), decay=decay)

    @classmethod
    def constant(cls, base_lr):
        return cls("constant", base_lr)

    def lr(self, epoch: int) -> float:
        if self.kind == "constant":
            return self.base_lr
        if self.kind == "step":
            passed = sum(1 for m in self.milestones if epoch >= m)
            return self.base_lr * self.decay**passed
        if epoch < self.warmup_epochs:
            return self.base_lr * (epoch + 1) / self.warmup_epochs
        span = self.total_epochs - self.warmup_epochs
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - self.warmup_epochs) / span))
