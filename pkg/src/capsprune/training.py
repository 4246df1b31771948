"""Mini-batch training with Adam, evaluation and best-epoch tracking."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .capsnet import CapsNetModel, accuracy, forward
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class Adam:
    """Adaptive-moment optimizer over a model's named parameters."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, model: CapsNetModel) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1 - b1 ** self.t
        corr2 = 1 - b2 ** self.t
        for name, p in model.params.items():
            g = p.grad
            if g is None:
                continue
            if name not in self.m or self.m[name].shape != g.shape:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            model.params[name] = Tensor._wrap((p.data - update).astype(p.dtype), requires_grad=True)


def loss_and_grads(model: CapsNetModel, images, labels) -> tuple[float, object]:
    """Forward + backward on one batch; parameter ``.grad`` fields are overwritten."""
    for p in model.params.values():
        p.zero_grad()
    with Tape() as tape:
        out = forward(model, images, labels)
    T.backward(tape, out.loss)
    return out.loss.item(), out


def batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train_epoch(model: CapsNetModel, images, labels, opt: Adam, batch_size: int, rng) -> float:
    total, seen = 0.0, 0
    for idx in batches(len(labels), batch_size, rng):
        loss, _ = loss_and_grads(model, images[idx], labels[idx])
        opt.step(model)
        total += loss * len(idx)
        seen += len(idx)
    return total / max(seen, 1)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)
    best_epoch: int = -1
    best_acc: float = -1.0


def train(
    model: CapsNetModel,
    train_set,
    test_set,
    epochs: int,
    *,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
    track_train_acc: bool = False,
) -> tuple[CapsNetModel, TrainHistory]:
    """Train for ``epochs`` and return the parameters with the best test accuracy.

    With ``epochs == 0`` the model comes back unchanged and its current test
    accuracy is recorded as the best.
    """
    model = model.copy()  # the optimizer rebinds parameters; keep the caller's model intact
    rng = np.random.Generator(np.random.Philox(seed))
    opt = Adam(lr)
    hist = TrainHistory()
    best = model.copy()
    hist.best_acc = accuracy(model, test_set.images, test_set.labels)
    hist.best_epoch = 0
    for epoch in range(1, epochs + 1):
        loss = train_epoch(model, train_set.images, train_set.labels, opt, batch_size, rng)
        acc = accuracy(model, test_set.images, test_set.labels)
        hist.train_loss.append(loss)
        hist.test_acc.append(acc)
        if track_train_acc:
            hist.train_acc.append(accuracy(model, train_set.images, train_set.labels))
        log.info("epoch %d loss %.5f test_acc %.4f", epoch, loss, acc)
        if acc > hist.best_acc:
            hist.best_acc, hist.best_epoch = acc, epoch
            best = model.copy()
    return best, hist
