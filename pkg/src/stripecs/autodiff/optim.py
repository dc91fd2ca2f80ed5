from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .tensor import Parameter


@dataclass
class AdamWConfig:
    """AdamW hyperparameters with a step-wise learning-rate schedule.

    The rate is multiplied by ``decay_factor`` every ``decay_every`` epochs.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    decay_every: int = 1000
    decay_factor: float = 0.5

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {(self.beta1, self.beta2)}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.decay_every < 1:
            raise ValueError(f"decay_every must be >= 1, got {self.decay_every}")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay_factor ** (epoch // self.decay_every)


def adamw_step(params: Iterable[Parameter], cfg: AdamWConfig, lr: float | None = None) -> None:
    """One in-place AdamW update of every parameter from its ``grad``.

    Weight decay is decoupled: it shrinks the value directly and never enters
    the moment estimates.
    """
    lr = cfg.lr if lr is None else lr
    for p in params:
        dt = p.value.data.dtype.type
        g = p.grad
        p.step += 1
        p.m = dt(cfg.beta1) * p.m + dt(1 - cfg.beta1) * g
        p.v = dt(cfg.beta2) * p.v + dt(1 - cfg.beta2) * (g * g)
        m_hat = p.m / dt(1 - cfg.beta1 ** p.step)
        v_hat = p.v / dt(1 - cfg.beta2 ** p.step)
        value = p.value.data
        if cfg.weight_decay:
            value = value * dt(1 - lr * cfg.weight_decay)
        p.value.data = (value - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(cfg.eps))).astype(
            value.dtype, copy=False
        )


class AdamW:
    """Thin stateful wrapper: holds the parameter list and the config."""

    def __init__(self, params: Iterable[Parameter], cfg: AdamWConfig | None = None):
        self.params = list(params)
        self.cfg = cfg or AdamWConfig()

    def step(self, epoch: int = 0) -> float:
        lr = self.cfg.lr_at(epoch)
        adamw_step(self.params, self.cfg, lr)
        return lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
