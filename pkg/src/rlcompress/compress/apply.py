"""Apply a discretized policy to a model: l1 channel pruning plus fake quantization."""
from __future__ import annotations

import numpy as np

from ..model.graph import INPUT_ID, Layer, ModelGraph
from .policy import (
    FP32,
    CompressionPolicy,
    DiscretePolicy,
    discretize_policy,
    validate_policy,
)
from .quant import quantize_weight


def prune_channels_l1(weight: np.ndarray, keep: int) -> np.ndarray:
    """Indices (ascending) of the ``keep`` output channels with the largest l1 norm.

    Equal norms are ranked by channel index, lower first.
    """
    out = weight.shape[0]
    if not 1 <= keep <= out:
        raise ValueError(f"keep must be in [1, {out}], got {keep}")
    norms = np.abs(weight.reshape(out, -1)).sum(axis=1, dtype=np.float64)
    ranked = np.argsort(-norms, kind="stable")
    return np.sort(ranked[:keep])


def _index_sets(graph: ModelGraph, policy: DiscretePolicy) -> dict[str, np.ndarray]:
    # kept output-channel indices of every node, propagated along the graph
    kept: dict[str, np.ndarray] = {INPUT_ID: np.arange(graph.input_shape[0])}
    for layer in graph.layers:
        src = kept[layer.inputs[0]]
        if layer.kind == "conv2d" and not layer.depthwise or layer.kind == "linear":
            cmp_ = policy.layers.get(layer.id)
            n = layer.out_channels if cmp_ is None else cmp_.kept
            kept[layer.id] = (
                np.arange(layer.out_channels) if n == layer.out_channels
                else prune_channels_l1(layer.weight, n)
            )
        elif layer.kind == "flatten":
            hw = layer.in_spatial[0] * layer.in_spatial[1]
            kept[layer.id] = (src[:, None] * hw + np.arange(hw)[None, :]).reshape(-1)
        else:
            kept[layer.id] = src
    return kept


def compress(graph: ModelGraph, policy: DiscretePolicy) -> ModelGraph:
    """New graph with pruned weights, sliced consumers and quantization installed."""
    validate_policy(graph, policy)
    kept = _index_sets(graph, policy)
    layers = []
    for layer in graph.layers:
        in_idx = kept[layer.inputs[0]]
        out_idx = kept[layer.id]
        new = Layer(
            id=layer.id,
            kind=layer.kind,
            inputs=list(layer.inputs),
            kernel=layer.kernel,
            stride=layer.stride,
            padding=layer.padding,
            depthwise=layer.depthwise,
            activation=layer.activation,
        )
        if layer.is_compute:
            w = layer.weight[out_idx]
            if not layer.depthwise:
                w = w[:, in_idx]
            new.weight = np.ascontiguousarray(w)
            new.bias = None if layer.bias is None else layer.bias[out_idx].copy()
            new.in_channels = len(in_idx)
            new.out_channels = len(out_idx)
            cmp_ = policy.layers.get(layer.id)
            if cmp_ is not None and cmp_.mode != FP32:
                new.w_bits, new.a_bits = cmp_.b_w, cmp_.b_a
                new.weight = quantize_weight(new.weight, cmp_.b_w)
        layers.append(new)
    out = ModelGraph(layers, graph.input_shape, name=graph.name, meta=dict(graph.meta))
    # keep the source graph's flags: compression must not change what is prunable
    for layer in out.compute_layers():
        layer.prunable = graph[layer.id].prunable
    out.groups = list(graph.groups)
    return out


def apply_policy(
    graph: ModelGraph,
    policy: CompressionPolicy | DiscretePolicy,
    joint_multiple: int | None = None,
) -> tuple[ModelGraph, DiscretePolicy]:
    if isinstance(policy, CompressionPolicy):
        discrete = discretize_policy(graph, policy, prune_multiple=joint_multiple)
    else:
        discrete = policy
    validate_policy(graph, discrete, prune_multiple=joint_multiple)
    return compress(graph, discrete), discrete
