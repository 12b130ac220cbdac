"""Adam, plateau learning-rate decay and early stopping on a monitored score."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import DimensionError, Tensor


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``; ``None`` grads count as zero."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError(f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moments")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise DimensionError(f"adam_step: grad {g.shape} vs param {p.shape}")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state, self.lr,
                  self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class PlateauSchedule:
    """Multiply lr by ``decay`` after ``patience`` consecutive epochs without improvement."""

    lr: float
    decay: float = 0.5
    patience: int = 5
    min_delta: float = 1e-4
    best: float = -np.inf
    bad_epochs: int = 0
    n_decays: int = 0

    def update(self, score: float) -> bool:
        """Record one epoch's score; True if the lr was decayed."""
        if score >= self.best + self.min_delta:
            self.best = score
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr *= self.decay
            self.n_decays += 1
            self.bad_epochs = 0
            return True
        return False


@dataclass
class EarlyStopping:
    patience: int = 15
    min_delta: float = 1e-4
    best: float = -np.inf
    best_epoch: int = -1
    bad_epochs: int = 0
    history: list[float] = field(default_factory=list)

    def update(self, score: float, epoch: int) -> bool:
        """Record one epoch's score; True if it is a new best."""
        self.history.append(score)
        if score >= self.best + self.min_delta:
            self.best, self.best_epoch, self.bad_epochs = score, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience
