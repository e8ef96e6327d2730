"""Short straight-through fine-tuning of a compressed model."""
from __future__ import annotations

import numpy as np

from ..model.executor import BackwardUnsupported
from ..model.graph import ModelGraph
from .quant import quantize_weight

_TRAINABLE = {"conv2d", "linear", "activation", "pool", "flatten", "add"}


def _check_trainable(graph: ModelGraph) -> None:
    for layer in graph.layers:
        if layer.kind not in _TRAINABLE:
            raise BackwardUnsupported(f"layer {layer.id!r} of kind {layer.kind!r} has no backward")
        if layer.kind == "conv2d" and layer.depthwise:
            raise BackwardUnsupported(f"depthwise conv {layer.id!r} has no backward")
        if layer.kind == "activation" and layer.activation != "relu":
            raise BackwardUnsupported(f"activation {layer.activation!r} in {layer.id!r} has no backward")


def fine_tune(
    graph: ModelGraph,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    lr: float,
    *,
    batch_size: int = 64,
    seed: int = 0,
    weight_decay: float = 5e-4,
) -> ModelGraph:
    """SGD fine-tuning on a copy of ``graph``.

    Quantized layers keep float master weights; after every step the live
    weights are re-quantized from the masters at the layer's bit width.
    """
    from ..training import sgd_train

    _check_trainable(graph)
    out = graph.copy()
    if epochs <= 0 or lr == 0:
        return out
    master = {layer.id: layer.weight.copy() for layer in out.compute_layers()}

    def requantize(g: ModelGraph, masters: dict) -> None:
        for layer in g.compute_layers():
            w = masters[layer.id]
            layer.weight = w.copy() if layer.w_bits is None else quantize_weight(w, layer.w_bits)

    sgd_train(
        out, x, y, epochs, lr,
        batch_size=batch_size, seed=seed, weight_decay=weight_decay,
        after_step=requantize, master=master,
    )
    return out
