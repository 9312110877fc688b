"""Adam, cosine annealing and a minimal minibatch loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import NumericError
from .params import ParamStore

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass(frozen=True)
class CosineSchedule:
    """Cosine annealing from ``base_lr`` at step 0 to 0 at ``total_steps``."""

    base_lr: float
    total_steps: int

    def __call__(self, step: int) -> float:
        if self.total_steps <= 0:
            return self.base_lr
        step = min(max(step, 0), self.total_steps)
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * step / self.total_steps))


def adam_step(store: ParamStore, lr: float, beta1: float = BETA1, beta2: float = BETA2,
              eps: float = EPS) -> None:
    """One Adam update of every non-frozen group; frozen groups are not touched.

    The step counter is shared across groups and persists in ``store.step``.
    """
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p in store.trainable():
        g = p.grad
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        denom = np.sqrt(p.v / c2)
        denom += eps
        p.value -= (lr / c1) * p.m / denom


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Yield index arrays covering a fresh permutation of ``range(n)``."""
    batch_size = max(1, min(batch_size, n))
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def fit(step_fn: Callable[[np.ndarray], float], store: ParamStore, n: int, *,
        epochs: int, batch_size: int, lr: float, rng: np.random.Generator,
        tag: str = "train") -> list[float]:
    """Run ``epochs`` passes of minibatch Adam with cosine annealing.

    ``step_fn(idx)`` must compute the loss on samples ``idx`` and leave the
    gradients in ``store`` (it is called after ``zero_grad``). Returns the
    mean loss per epoch.
    """
    bs = max(1, min(batch_size, n))
    steps_per_epoch = math.ceil(n / bs)
    schedule = CosineSchedule(lr, epochs * steps_per_epoch)
    history: list[float] = []
    step = 0
    for epoch in range(epochs):
        total, count = 0.0, 0
        for idx in iterate_minibatches(n, bs, rng):
            store.zero_grad()
            loss = step_fn(idx)
            if not math.isfinite(loss):
                raise NumericError(f"{tag}: non-finite loss at epoch {epoch} step {step}")
            adam_step(store, schedule(step))
            step += 1
            total += loss * len(idx)
            count += len(idx)
        history.append(total / count)
        log.debug("%s epoch %d loss %.6f", tag, epoch, history[-1])
    return history
