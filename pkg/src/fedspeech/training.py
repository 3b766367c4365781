"""Mini-batch SGD loops shared by centralized and federated training.

Inputs are either raw frames (N, 1, H, W) or, when the backbone is frozen,
precomputed backbone embeddings (N, D); ``head_only`` selects which.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .nn.loss import cross_entropy
from .nn.network import Model, backward, forward, forward_head
from .nn.params import ParamSet
from .nn.optim import DivergenceError, OptState, lr_at_epoch, sgd_step


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.001
    momentum: float = 0.9
    gamma: float = 0.1
    step: int = 7
    batch_size: int = 32

    def new_state(self, epoch: int = 0) -> OptState:
        return OptState(self.base_lr, self.momentum, self.gamma, self.step, epoch)


def _logits(model: Model, x: np.ndarray, head_only: bool, cache: bool) -> np.ndarray:
    return forward_head(model, x, cache) if head_only else forward(model, x, cache)


def train_epoch(model: Model, x: np.ndarray, y: np.ndarray, opt: OptState, cfg: TrainConfig,
                rng: np.random.Generator, head_only: bool) -> float:
    """One shuffled pass; returns the mean training loss. Uses ``lr_at_epoch(opt, opt.epoch)``."""
    n = len(x)
    order = rng.permutation(n)
    lr = lr_at_epoch(opt, opt.epoch)
    total = 0.0
    for start in range(0, n, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        logits = _logits(model, x[idx], head_only, cache=True)
        loss, dlogits = cross_entropy(logits, y[idx])
        if not np.isfinite(loss.value):
            raise DivergenceError(f"non-finite loss at epoch {opt.epoch}")
        grads = backward(model, dlogits.astype(logits.dtype))
        sgd_step(model.params, grads, opt, lr)
        total += loss.value * len(idx)
    return total / max(n, 1)


def evaluate_loss(model: Model, x: np.ndarray, y: np.ndarray, head_only: bool, chunk: int = 256) -> float:
    if len(x) == 0:
        return float("nan")
    total = 0.0
    for i in range(0, len(x), chunk):
        logits = _logits(model, x[i:i + chunk], head_only, cache=False)
        loss, _ = cross_entropy(logits, y[i:i + chunk])
        total += loss.value * len(logits)
    return total / len(x)


def frame_logits(model: Model, x: np.ndarray, head_only: bool, chunk: int = 256) -> np.ndarray:
    outs = [_logits(model, x[i:i + chunk], head_only, cache=False) for i in range(0, len(x), chunk)]
    return np.concatenate(outs) if outs else np.zeros((0, model.num_classes))


@dataclass(frozen=True)
class EarlyStopping:
    patience: int = 5
    min_delta: float = 1e-4
    max_epochs: int = 25


def early_stop(history, patience: int, min_delta: float = 0.0) -> tuple[bool, int]:
    """(stop?, index of best loss) for a validation-loss history.

    An epoch improves on the best only if it is lower by more than
    ``min_delta``; stop once ``patience`` epochs pass without improvement.
    """
    if len(history) == 0:
        raise ValueError("early_stop needs at least one epoch of history")
    best = 0
    for e in range(1, len(history)):
        if history[e] < history[best] - min_delta:
            best = e
    return (len(history) - 1 - best) >= patience, best


@dataclass
class FitResult:
    params: ParamSet
    val_losses: list[float]
    train_losses: list[float]
    epochs_run: int
    best_epoch: int
    early_stopped: bool
    train_time_s: float


def fit(model: Model, x: np.ndarray, y: np.ndarray, val_x: np.ndarray, val_y: np.ndarray,
        cfg: TrainConfig = TrainConfig(), stopping: EarlyStopping = EarlyStopping(), seed: int = 0,
        head_only: bool = True) -> FitResult:
    """Centralized training with early stopping; ``model.params`` ends at the best epoch."""
    rng = np.random.default_rng(seed)
    opt = cfg.new_state()
    best_params = model.params.copy()
    val_losses: list[float] = []
    train_losses: list[float] = []
    stopped = False
    best = 0
    start = time.perf_counter()
    for epoch in range(stopping.max_epochs):
        opt.epoch = epoch
        train_losses.append(train_epoch(model, x, y, opt, cfg, rng, head_only))
        val_losses.append(evaluate_loss(model, val_x, val_y, head_only))
        stop, best = early_stop(val_losses, stopping.patience, stopping.min_delta)
        if best == epoch:
            best_params = model.params.copy()
        if stop:
            stopped = True
            break
    elapsed = time.perf_counter() - start
    if val_losses:
        model.params = best_params
    return FitResult(model.params, val_losses, train_losses, len(train_losses), best, stopped, elapsed)
