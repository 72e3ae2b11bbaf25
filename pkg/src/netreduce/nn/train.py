"""Mini-batch SGD with momentum, and plain cross-entropy training of a Network."""
from __future__ import annotations

import logging

import numpy as np

from ..errors import TrainingDivergedError
from .network import Network

log = logging.getLogger(__name__)


class SGD:
    """``v <- momentum * v + g``; ``p <- p - lr * v`` (parameters updated in place)."""

    def __init__(self, params: list[np.ndarray], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v += g
            p -= self.lr * v


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def network_params(net: Network) -> list[np.ndarray]:
    return [p for layer in net.layers for p in layer.params().values()]


def train_classifier(net: Network, x: np.ndarray, labels: np.ndarray, epochs: int, lr: float = 0.05,
                     momentum: float = 0.9, batch_size: int = 32, seed: int = 0) -> list[float]:
    """Cross-entropy training in place; returns the mean training loss per epoch."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels, dtype=np.int64)
    opt = SGD(network_params(net), lr, momentum)
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(x))
        total = 0.0
        for b, start in enumerate(range(0, len(x), batch_size)):
            idx = order[start:start + batch_size]
            acts = net.forward(x[idx])
            logp = log_softmax(acts[-1])
            loss = -logp[np.arange(len(idx)), labels[idx]].sum()
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, b, loss)
            total += loss
            g = np.exp(logp)
            g[np.arange(len(idx)), labels[idx]] -= 1.0
            bundle = net.backward(acts, g / len(idx))
            opt.step([g for grads in bundle.params for g in grads.values()])
        history.append(total / len(x))
        log.debug("teacher epoch %d: loss %.4f", epoch, history[-1])
    return history
