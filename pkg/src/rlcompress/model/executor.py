"""Forward and backward execution of a :class:`ModelGraph` on NCHW batches."""
from __future__ import annotations

import numpy as np

from ..compress.quant import quantize_activation
from ..numerics import conv2d_backward, conv2d_forward
from .graph import INPUT_ID, ModelGraph


class BackwardUnsupported(NotImplementedError):
    pass


def _last_use(graph: ModelGraph) -> dict[str, int]:
    last = {}
    for i, layer in enumerate(graph.layers):
        for src in layer.inputs:
            last[src] = i
    return last


def forward(graph: ModelGraph, x: np.ndarray, cache: dict | None = None) -> np.ndarray:
    """Logits for a batch.  Pass a dict as ``cache`` to keep what backward needs."""
    x = np.asarray(x, dtype=np.float32)
    if x.shape[1:] != graph.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match model {graph.input_shape}")
    values: dict[str, np.ndarray] = {INPUT_ID: x}
    last = _last_use(graph)
    for i, layer in enumerate(graph.layers):
        inp = values[layer.inputs[0]]
        if layer.kind in ("conv2d", "linear") and layer.a_bits is not None:
            inp = quantize_activation(inp, layer.a_bits)
        if layer.kind == "conv2d":
            if cache is not None and not layer.depthwise:
                out, cols = conv2d_forward(
                    inp, layer.weight, layer.bias, layer.stride, layer.padding, return_cols=True
                )
                cache[layer.id] = (inp.shape, cols)
            else:
                out = conv2d_forward(
                    inp, layer.weight, layer.bias, layer.stride, layer.padding, layer.depthwise
                )
        elif layer.kind == "linear":
            out = inp @ layer.weight.T
            if layer.bias is not None:
                out = out + layer.bias
            if cache is not None:
                cache[layer.id] = inp
        elif layer.kind == "activation":
            if layer.activation == "relu":
                out = np.maximum(inp, 0)
            elif layer.activation == "sigmoid":
                out = 1.0 / (1.0 + np.exp(-inp))
            elif layer.activation == "tanh":
                out = np.tanh(inp)
            else:
                out = inp
            if cache is not None:
                cache[layer.id] = out
        elif layer.kind == "pool":
            out = inp.mean(axis=(2, 3), keepdims=True)
            if cache is not None:
                cache[layer.id] = inp.shape
        elif layer.kind == "flatten":
            out = inp.reshape(inp.shape[0], -1)
            if cache is not None:
                cache[layer.id] = inp.shape
        else:  # add
            out = inp.copy()
            for src in layer.inputs[1:]:
                out += values[src]
        values[layer.id] = out.astype(np.float32, copy=False)
        for src in set(layer.inputs):
            if last.get(src) == i and src != graph.output_id:
                del values[src]
    return values[graph.output_id]


def backward(graph: ModelGraph, cache: dict, grad_logits: np.ndarray) -> dict[str, tuple]:
    """Parameter gradients ``{layer_id: (d_weight, d_bias)}`` from a cached forward.

    Activation fake-quantization is treated as identity (straight-through).
    """
    grads: dict[str, np.ndarray] = {graph.output_id: np.asarray(grad_logits, np.float32)}
    params: dict[str, tuple] = {}
    for layer in reversed(graph.layers):
        g = grads.pop(layer.id, None)
        if g is None:
            continue
        if layer.kind == "conv2d":
            if layer.depthwise:
                raise BackwardUnsupported("depthwise conv backward is not implemented")
            x_shape, cols = cache[layer.id]
            dx, dw, db = conv2d_backward(x_shape, layer.weight, cols, g, layer.stride, layer.padding)
            params[layer.id] = (dw, db)
        elif layer.kind == "linear":
            inp = cache[layer.id]
            params[layer.id] = (g.T @ inp, g.sum(axis=0))
            dx = g @ layer.weight
        elif layer.kind == "activation":
            if layer.activation != "relu":
                raise BackwardUnsupported(f"backward for activation {layer.activation!r}")
            dx = g * (cache[layer.id] > 0)
        elif layer.kind == "pool":
            shape = cache[layer.id]
            dx = np.broadcast_to(g / (shape[2] * shape[3]), shape)
        elif layer.kind == "flatten":
            dx = g.reshape(cache[layer.id])
        else:  # add
            dx = g
        srcs = layer.inputs
        for src in srcs:
            if src == INPUT_ID:
                continue
            if src in grads:
                grads[src] = grads[src] + dx
            else:
                grads[src] = dx
    return params


def predict_logits(graph: ModelGraph, x: np.ndarray, batch_size: int = 100) -> np.ndarray:
    """Logits for a whole array, evaluated in fixed-size batches."""
    outs = [forward(graph, x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(outs, axis=0)
