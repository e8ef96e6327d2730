"""MAC, parameter and bit-operation accounting."""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

from .graph import Layer, ModelGraph, channel_source

if TYPE_CHECKING:
    from ..compress.policy import DiscretePolicy

FP32_BITS = 32


@dataclass(frozen=True)
class LayerCost:
    macs: int
    params: int
    b_w: int = FP32_BITS
    b_a: int = FP32_BITS

    @property
    def bops(self) -> int:
        return self.macs * self.b_w * self.b_a


@dataclass(frozen=True)
class Totals:
    macs: int
    bops: int
    params: int


def count_macs(layer: Layer, active_in: int | None = None, active_out: int | None = None) -> int:
    cin = layer.in_channels if active_in is None else active_in
    cout = layer.out_channels if active_out is None else active_out
    if cin > layer.in_channels or cout > layer.out_channels:
        raise ValueError(f"{layer.id}: active channels exceed the layer's channels")
    if layer.kind == "linear":
        return cin * cout
    if layer.kind == "conv2d":
        kh, kw = layer.kernel
        ho, wo = layer.out_spatial
        per_out = 1 if layer.depthwise else cin
        return cout * per_out * kh * kw * ho * wo
    return 0


def count_params(layer: Layer, active_in: int | None = None, active_out: int | None = None) -> int:
    cin = layer.in_channels if active_in is None else active_in
    cout = layer.out_channels if active_out is None else active_out
    bias = cout if layer.bias is not None else 0
    if layer.kind == "linear":
        return cin * cout + bias
    if layer.kind == "conv2d":
        kh, kw = layer.kernel
        return cout * (1 if layer.depthwise else cin) * kh * kw + bias
    return 0


def active_channels(graph: ModelGraph, kept: dict[str, int]) -> dict[str, tuple[int, int]]:
    """(active_in, active_out) per compute layer given kept output channels.

    ``kept`` maps compute-layer id to its kept output channel count; missing
    layers keep all channels.  Depthwise convs inherit their producer's count.
    """
    out_count: dict[str | None, int] = {None: graph.input_shape[0]}
    result = {}
    for layer in graph.compute_layers():
        src, fanout = channel_source(graph, layer.id)
        if src is None:
            cin = layer.in_channels
        else:
            cin = out_count[src] * fanout
        if layer.depthwise:
            cout = cin
        else:
            cout = kept.get(layer.id, layer.out_channels)
        out_count[layer.id] = cout
        result[layer.id] = (cin, cout)
    return result


def layer_costs(graph: ModelGraph, policy: DiscretePolicy | None = None) -> dict[str, LayerCost]:
    kept = {} if policy is None else {k: v.kept for k, v in policy.layers.items()}
    active = active_channels(graph, kept)
    costs = {}
    for layer in graph.compute_layers():
        cin, cout = active[layer.id]
        b_a = b_w = FP32_BITS
        if policy is not None and layer.id in policy.layers:
            cmp_ = policy.layers[layer.id]
            b_a, b_w = cmp_.b_a, cmp_.b_w
        costs[layer.id] = LayerCost(
            macs=count_macs(layer, cin, cout),
            params=count_params(layer, cin, cout),
            b_w=b_w,
            b_a=b_a,
        )
    return costs


def model_totals(graph: ModelGraph, policy: DiscretePolicy | None = None) -> Totals:
    costs = layer_costs(graph, policy).values()
    return Totals(
        macs=sum(c.macs for c in costs),
        bops=sum(c.bops for c in costs),
        params=sum(c.params for c in costs),
    )
