"""Per-layer state vectors fed to the agents.

Feature order (agent kind decides which sensitivity blocks appear and the
width of the previous-action block)::

    0      layer index among actionable layers, in [0, 1]
    1-3    kind one-hot: conv, depthwise conv, linear
    4, 5   log-normalized input / output channels
    6      kernel area / largest kernel area
    7      stride / largest stride
    8      layer MACs / total MACs
    9      layer parameters / total parameters
    10     prunable flag
    11     MIX-supported flag under the partial policy
    ...    sensitivity summaries, 3 per method (prune; quant-act, quant-weight)
    ...    MACs already removed this episode / total MACs
    ...    MACs of this and all later actionable layers / total MACs
    ...    previous layer's action vector
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..agent.ddpg import ACTION_DIMS
from ..model.costs import active_channels, count_macs, count_params
from ..model.graph import Layer, ModelGraph, check_mix_support
from ..sensitivity import DISABLED_VALUE, PRUNE, QUANT_ACT, QUANT_WEIGHT, SensitivityTable

AGENT_METHODS = {
    "prune": (PRUNE,),
    "quant": (QUANT_ACT, QUANT_WEIGHT),
    "joint": (PRUNE, QUANT_ACT, QUANT_WEIGHT),
}
STATIC_FEATURES = 12
SENS_OFFSET = STATIC_FEATURES


def state_dim(kind: str) -> int:
    return STATIC_FEATURES + 3 * len(AGENT_METHODS[kind]) + 2 + ACTION_DIMS[kind]


def sensitivity_slice(kind: str) -> slice:
    return slice(SENS_OFFSET, SENS_OFFSET + 3 * len(AGENT_METHODS[kind]))


def actionable_layers(graph: ModelGraph, kind: str) -> list[Layer]:
    """Layers the agent visits, in topological order."""
    layers = graph.compute_layers()
    if kind == "prune":
        return [layer for layer in layers if layer.prunable]
    return layers


@dataclass
class ModelFeatures:
    """Static per-layer features of the uncompressed model."""

    graph: ModelGraph
    kind: str
    layers: list[Layer]
    static: dict[str, np.ndarray]
    ref_macs: dict[str, int]
    total_macs: int

    @classmethod
    def build(cls, graph: ModelGraph, kind: str) -> ModelFeatures:
        layers = actionable_layers(graph, kind)
        if not layers:
            raise ValueError(f"model has no layers a {kind} agent can act on")
        compute = graph.compute_layers()
        ref_macs = {layer.id: count_macs(layer) for layer in compute}
        params = {layer.id: count_params(layer) for layer in compute}
        total_macs = sum(ref_macs.values())
        total_params = sum(params.values())
        max_ch = max(max(layer.in_channels, layer.out_channels) for layer in compute)
        max_k = max(layer.kernel[0] * layer.kernel[1] if layer.kernel else 1 for layer in compute)
        max_stride = max(layer.stride for layer in compute)
        log_max = math.log1p(max_ch)
        static = {}
        n = len(layers)
        for i, layer in enumerate(layers):
            kernel_area = layer.kernel[0] * layer.kernel[1] if layer.kernel else 1
            static[layer.id] = np.array(
                [
                    i / (n - 1) if n > 1 else 0.0,
                    float(layer.kind == "conv2d" and not layer.depthwise),
                    float(layer.kind == "conv2d" and layer.depthwise),
                    float(layer.kind == "linear"),
                    math.log1p(layer.in_channels) / log_max,
                    math.log1p(layer.out_channels) / log_max,
                    kernel_area / max_k,
                    layer.stride / max_stride,
                    ref_macs[layer.id] / total_macs,
                    params[layer.id] / total_params,
                    float(layer.prunable),
                    0.0,  # filled per step from the partial policy
                ]
            )
        return cls(graph, kind, layers, static, ref_macs, total_macs)

    def remaining_macs(self, index: int) -> float:
        return sum(self.ref_macs[layer.id] for layer in self.layers[index:]) / self.total_macs

    def reduced_macs(self, kept: dict[str, int]) -> float:
        if not kept:
            return 0.0
        active = active_channels(self.graph, kept)
        now = sum(count_macs(layer, *active[layer.id]) for layer in self.graph.compute_layers())
        return (self.total_macs - now) / self.total_macs


def build_state(
    features: ModelFeatures,
    index: int,
    kept: dict[str, int],
    prev_action: np.ndarray,
    sens_table: SensitivityTable | None,
    sens_enabled: bool,
) -> np.ndarray:
    """State of the ``index``-th actionable layer given the partial policy's kept channels."""
    layer = features.layers[index]
    x = features.static[layer.id].copy()
    cin, _ = active_channels(features.graph, kept)[layer.id]
    x[11] = float(check_mix_support(layer, cin, layer.out_channels))
    sens = []
    for method in AGENT_METHODS[features.kind]:
        if sens_enabled and sens_table is not None:
            sens.extend(sens_table.summary(layer.id, method))
        else:
            sens.extend([DISABLED_VALUE] * 3)
    prev = np.asarray(prev_action, dtype=np.float64)
    if prev.shape != (ACTION_DIMS[features.kind],):
        raise ValueError("previous action has the wrong dimension")
    tail = [features.reduced_macs(kept), features.remaining_macs(index)]
    return np.concatenate([x, sens, tail, prev])
