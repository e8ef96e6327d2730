"""Mini-batch SGD for target models (reference training and fine-tuning)."""
from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .model.executor import backward, forward, predict_logits
from .model.graph import ModelGraph
from .numerics import log_softmax, make_rng, softmax

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, losses: list[float]):
        super().__init__(message)
        self.losses = losses


@dataclass
class TrainLog:
    epoch_losses: list[float] = field(default_factory=list)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = len(labels)
    lp = log_softmax(logits.astype(np.float64))
    loss = -lp[np.arange(n), labels].mean()
    grad = softmax(logits.astype(np.float64))
    grad[np.arange(n), labels] -= 1.0
    return float(loss), (grad / n).astype(np.float32)


def dataset_loss(graph: ModelGraph, x: np.ndarray, y: np.ndarray, batch_size: int = 100) -> float:
    logits = predict_logits(graph, x, batch_size)
    return cross_entropy(logits, y)[0]


def accuracy(graph: ModelGraph, x: np.ndarray, y: np.ndarray, batch_size: int = 100) -> float:
    if len(y) == 0:
        raise ValueError("accuracy of an empty split")
    logits = predict_logits(graph, x, batch_size)
    return float(np.mean(logits.argmax(axis=1) == y))


def sgd_train(
    graph: ModelGraph,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    lr: float,
    *,
    batch_size: int = 64,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
    seed: int = 0,
    cosine: bool = True,
    after_step: Callable[[ModelGraph, dict], None] | None = None,
    master: dict | None = None,
) -> TrainLog:
    """Train ``graph`` in place.

    ``master`` optionally maps layer id to float master weights; updates go to
    the masters and ``after_step`` is expected to refresh the live weights from
    them (straight-through re-quantization).
    """
    rng = make_rng(seed)
    layers = graph.compute_layers()
    if master is None:
        master = {layer.id: layer.weight for layer in layers}
    vel = {layer.id: (np.zeros_like(master[layer.id]), None if layer.bias is None else np.zeros_like(layer.bias))
           for layer in layers}
    steps_per_epoch = math.ceil(len(y) / batch_size)
    total = max(epochs * steps_per_epoch, 1)
    step = 0
    out = TrainLog()
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        losses = []
        for start in range(0, len(y), batch_size):
            idx = order[start : start + batch_size]
            cache: dict = {}
            logits = forward(graph, x[idx], cache=cache)
            loss, g = cross_entropy(logits, y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch}", out.epoch_losses + losses)
            losses.append(loss)
            grads = backward(graph, cache, g)
            cur_lr = lr * 0.5 * (1 + math.cos(math.pi * step / total)) if cosine else lr
            for layer in layers:
                dw, db = grads[layer.id]
                vw, vb = vel[layer.id]
                w = master[layer.id]
                vw *= momentum
                vw += dw + weight_decay * w
                w -= cur_lr * vw
                if layer.bias is not None:
                    vb *= momentum
                    vb += db
                    layer.bias -= cur_lr * vb
            if after_step is not None:
                after_step(graph, master)
            step += 1
        out.epoch_losses.append(float(np.mean(losses)))
        log.info("epoch %d loss %.4f", epoch, out.epoch_losses[-1])
    return out
