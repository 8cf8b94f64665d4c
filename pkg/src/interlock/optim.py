"""Optimizers and learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NonFiniteGradientError
from .tensor import Parameter


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"  # "sgd" | "adam"
    momentum: float = 0.9
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigurationError(f"optim.kind must be 'sgd' or 'adam', got {self.kind!r}")


@dataclass
class OptimizerState:
    config: OptimizerConfig
    slots: dict[str, list[np.ndarray]] = field(default_factory=dict)
    step: int = 0

    def apply(self, params: list[Parameter], lr: float, *, global_step: int | None = None):
        """One update of ``params`` from their accumulated grads; grads are zeroed after.

        Values are rebound rather than modified in place, so a tape recorded
        before the update keeps differentiating at the weights it saw.
        """
        for p in params:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(p.id, global_step if global_step is not None else self.step + 1)
        self.step += 1
        cfg = self.config
        for p in params:
            g = p.grad
            if cfg.kind == "sgd":
                if cfg.weight_decay:
                    g = g + cfg.weight_decay * p.value
                slot = self.slots.get(p.id)
                if slot is None:
                    slot = self.slots[p.id] = [np.zeros_like(p.value)]
                buf = slot[0]
                buf *= cfg.momentum
                buf += g
                p.value = p.value - lr * buf
            else:
                if cfg.weight_decay:
                    g = g + cfg.weight_decay * p.value
                slot = self.slots.get(p.id)
                if slot is None:
                    slot = self.slots[p.id] = [np.zeros_like(p.value), np.zeros_like(p.value)]
                m, v = slot
                m *= cfg.beta1
                m += (1 - cfg.beta1) * g
                v *= cfg.beta2
                v += (1 - cfg.beta2) * g * g
                mhat = m / (1 - cfg.beta1**self.step)
                vhat = v / (1 - cfg.beta2**self.step)
                p.value = p.value - lr * mhat / (np.sqrt(vhat) + cfg.eps)
            p.zero_grad()


def sgd(momentum=0.9, weight_decay=0.0) -> OptimizerState:
    return OptimizerState(OptimizerConfig("sgd", momentum=momentum, weight_decay=weight_decay))


def adam(beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0) -> OptimizerState:
    return OptimizerState(OptimizerConfig("adam", beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay))


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "constant"  # "constant" | "step_decay" | "inv_sqrt_warmup"
    lr: float = 1e-4
    milestones: tuple = ()
    factor: float = 10.0
    dim: int = 1024
    warmup_steps: int = 4000

    def __post_init__(self):
        if self.kind not in ("constant", "step_decay", "inv_sqrt_warmup"):
            raise ConfigurationError(f"schedule.kind must be constant, step_decay or inv_sqrt_warmup, got {self.kind!r}")
        if self.kind != "inv_sqrt_warmup" and self.lr <= 0:
            raise ConfigurationError(f"schedule.lr must be positive, got {self.lr}")
        if self.kind == "step_decay" and self.factor <= 0:
            raise ConfigurationError("schedule.factor must be positive")
        if self.kind == "inv_sqrt_warmup" and (self.dim < 1 or self.warmup_steps < 1):
            raise ConfigurationError("inv_sqrt_warmup needs dim >= 1 and warmup_steps >= 1")

    @property
    def per_epoch(self) -> bool:
        return self.kind == "step_decay"


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at 1-based ``step`` (an epoch number for step_decay)."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if schedule.kind == "constant":
        return schedule.lr
    if schedule.kind == "step_decay":
        passed = sum(1 for m in schedule.milestones if step >= m)
        return schedule.lr / schedule.factor**passed
    return schedule.dim**-0.5 * min(step**-0.5, step * schedule.warmup_steps**-1.5)
