from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np

from .params import ParamSet


class DivergenceError(FloatingPointError):
    pass


@dataclass
class OptState:
    """SGD with plain momentum and step decay of the learning rate."""

    base_lr: float = 0.001
    momentum: float = 0.9
    gamma: float = 0.1
    step: int = 7
    epoch: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "OptState":
        return OptState(self.base_lr, self.momentum, self.gamma, self.step, self.epoch,
                        {k: v.copy() for k, v in self.velocity.items()})


def lr_at_epoch(opt: OptState, epoch: int) -> float:
    # decimal arithmetic so 0.001 * 0.1**k lands on the nearest double to the exact value
    k = max(epoch, 0) // opt.step
    return float(Decimal(repr(opt.base_lr)) * Decimal(repr(opt.gamma)) ** k)


def sgd_step(params: ParamSet, grads: dict[str, np.ndarray], opt: OptState,
             lr: float | None = None) -> None:
    """In-place update: ``v = momentum * v + g``, ``p = p - lr * v`` for trainable tensors."""
    if lr is None:
        lr = lr_at_epoch(opt, opt.epoch)
    for name in params.trainable_names():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {params[name].shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise DivergenceError(f"{name}: {bad} non-finite gradient entries at epoch {opt.epoch}")
        v = opt.velocity.get(name)
        if v is None:
            v = np.zeros_like(params[name])
        v = opt.momentum * v + g
        opt.velocity[name] = v
        params[name] = (params[name] - lr * v).astype(params[name].dtype)
