"""Mini-batch Adam training loop shared by plain and continual training."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import AdamState, adam_step
from .cascade import PropagationGraph
from .model import DiffPoolModel, loss_and_grad

log = logging.getLogger(__name__)

GradientFn = Callable[[DiffPoolModel, Sequence[PropagationGraph]], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-3
    patience: int = 10
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def fit(model: DiffPoolModel, graphs: Sequence[PropagationGraph], cfg: TrainConfig, *,
        grad_fn: GradientFn = loss_and_grad, opt_state: AdamState | None = None,
        on_epoch: Callable[[int, float], bool | None] | None = None) -> tuple[AdamState, list[float]]:
    """Train in place. Stops after ``cfg.patience`` epochs without a lower training loss.

    ``on_epoch(epoch, train_loss)`` may return True to stop early. Returns the
    optimizer state and the per-epoch mean training loss.
    """
    state = opt_state if opt_state is not None else AdamState.zeros(len(model.params))
    rng = np.random.default_rng(cfg.seed)
    losses: list[float] = []
    best, stale = np.inf, 0
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in batches(len(graphs), cfg.batch_size, rng):
            batch = [graphs[i] for i in idx]
            value, grad = grad_fn(model, batch)
            adam_step(model.params, grad, state, lr=cfg.lr)
            total += value * len(batch)
        epoch_loss = total / max(len(graphs), 1)
        losses.append(epoch_loss)
        log.debug("epoch %d loss %.5f", epoch, epoch_loss)
        if on_epoch is not None and on_epoch(epoch, epoch_loss):
            break
        if epoch_loss < best - 1e-6:
            best, stale = epoch_loss, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return state, losses
