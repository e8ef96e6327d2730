from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from ..numerics import conv_output_size

KINDS = ("conv2d", "linear", "add", "pool", "flatten", "activation")
COMPUTE_KINDS = ("conv2d", "linear")
# ops whose output channel set is exactly their input channel set
CHANNEL_PRESERVING = ("activation", "pool", "add")
INPUT_ID = "input"


class ModelFormatError(ValueError):
    pass


class ShapeError(ModelFormatError):
    pass


@dataclass
class Layer:
    id: str
    kind: str
    inputs: list[str]
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    depthwise: bool = False
    activation: str = "relu"
    in_spatial: tuple[int, int] = (1, 1)
    out_spatial: tuple[int, int] = (1, 1)
    weight: np.ndarray | None = field(default=None, repr=False)
    bias: np.ndarray | None = field(default=None, repr=False)
    prunable: bool = False
    mix_supported: bool = False
    # set on compressed graphs only
    a_bits: int | None = None
    w_bits: int | None = None

    @property
    def is_compute(self) -> bool:
        return self.kind in COMPUTE_KINDS

    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "linear":
            return (self.out_channels, self.in_channels)
        kh, kw = self.kernel
        return (self.out_channels, 1 if self.depthwise else self.in_channels, kh, kw)


class ModelGraph:
    """Ordered, acyclic layer graph of a classification network.

    Layers are stored in topological order; edges are the ``inputs`` id lists.
    The last layer is the network output.
    """

    def __init__(
        self,
        layers: list[Layer],
        input_shape: tuple[int, int, int],
        name: str = "model",
        meta: dict | None = None,
    ):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.name = name
        self.meta = dict(meta or {})
        self._by_id = {layer.id: layer for layer in self.layers}
        self.groups: list[frozenset[str]] = []
        self.validate()
        self.groups = detect_dependency_groups(self)

    # -- access ------------------------------------------------------------
    def __getitem__(self, layer_id: str) -> Layer:
        return self._by_id[layer_id]

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self._by_id

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def output_id(self) -> str:
        return self.layers[-1].id

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_channels

    def compute_layers(self) -> list[Layer]:
        return [layer for layer in self.layers if layer.is_compute]

    def consumers(self, layer_id: str) -> list[Layer]:
        return [layer for layer in self.layers if layer_id in layer.inputs]

    def copy(self) -> ModelGraph:
        g = ModelGraph.__new__(ModelGraph)
        g.layers = [copy.copy(layer) for layer in self.layers]
        for layer in g.layers:
            layer.inputs = list(layer.inputs)
            if layer.weight is not None:
                layer.weight = layer.weight.copy()
            if layer.bias is not None:
                layer.bias = layer.bias.copy()
        g.input_shape = self.input_shape
        g.name = self.name
        g.meta = copy.deepcopy(self.meta)
        g._by_id = {layer.id: layer for layer in g.layers}
        g.groups = list(self.groups)
        return g

    # -- validation --------------------------------------------------------
    def validate(self) -> None:
        """Check ids, edges and shapes, and propagate spatial sizes."""
        seen: dict[str, tuple[int, tuple[int, int]]] = {
            INPUT_ID: (self.input_shape[0], tuple(self.input_shape[1:]))
        }
        if not self.layers:
            raise ModelFormatError("model has no layers")
        for layer in self.layers:
            if layer.kind not in KINDS:
                raise ModelFormatError(f"{layer.id}: unknown layer kind {layer.kind!r}")
            if layer.id in seen:
                raise ModelFormatError(f"duplicate layer id {layer.id!r}")
            if not layer.inputs:
                raise ShapeError(f"{layer.id}: layer has no inputs")
            for src in layer.inputs:
                if src not in seen:
                    raise ShapeError(f"{layer.id}: input {src!r} is not defined before this layer")
            if layer.kind != "add" and len(layer.inputs) != 1:
                raise ShapeError(f"{layer.id}: {layer.kind} takes exactly one input")
            in_ch, in_sp = seen[layer.inputs[0]]
            if layer.kind == "add":
                if len(layer.inputs) < 2:
                    raise ShapeError(f"{layer.id}: add needs at least two inputs")
                for src in layer.inputs[1:]:
                    if seen[src] != (in_ch, in_sp):
                        raise ShapeError(f"{layer.id}: add inputs disagree in shape")
            if layer.kind in COMPUTE_KINDS and layer.in_channels != in_ch:
                raise ShapeError(
                    f"{layer.id}: expects {layer.in_channels} input channels, producer gives {in_ch}"
                )
            layer.in_spatial = tuple(in_sp)
            if layer.kind == "conv2d":
                kh, kw = layer.kernel
                ho = conv_output_size(in_sp[0], kh, layer.stride, layer.padding)
                wo = conv_output_size(in_sp[1], kw, layer.stride, layer.padding)
                if ho < 1 or wo < 1:
                    raise ShapeError(f"{layer.id}: empty convolution output")
                if layer.depthwise and layer.out_channels != layer.in_channels:
                    raise ShapeError(f"{layer.id}: depthwise conv must keep the channel count")
                layer.out_spatial = (ho, wo)
            elif layer.kind == "linear":
                if in_sp != (1, 1):
                    raise ShapeError(f"{layer.id}: linear layer needs a flattened input")
                layer.out_spatial = (1, 1)
            elif layer.kind == "flatten":
                layer.in_channels = in_ch
                layer.out_channels = in_ch * in_sp[0] * in_sp[1]
                layer.out_spatial = (1, 1)
            elif layer.kind == "pool":
                layer.in_channels = layer.out_channels = in_ch
                layer.out_spatial = (1, 1)
            else:
                layer.in_channels = layer.out_channels = in_ch
                layer.out_spatial = tuple(in_sp)
            if layer.out_channels < 1:
                raise ShapeError(f"{layer.id}: out_channels must be >= 1")
            if layer.is_compute:
                if layer.weight is None or layer.weight.shape != layer.weight_shape():
                    got = None if layer.weight is None else layer.weight.shape
                    raise ShapeError(
                        f"{layer.id}: weight shape {got} does not match {layer.weight_shape()}"
                    )
                if layer.bias is not None and layer.bias.shape != (layer.out_channels,):
                    raise ShapeError(f"{layer.id}: bias shape mismatch")
            seen[layer.id] = (layer.out_channels, tuple(layer.out_spatial))

    # -- identity ----------------------------------------------------------
    def structure(self) -> list[dict]:
        out = []
        for layer in self.layers:
            entry = {"id": layer.id, "kind": layer.kind, "inputs": list(layer.inputs)}
            if layer.is_compute:
                entry.update(
                    in_channels=layer.in_channels,
                    out_channels=layer.out_channels,
                    bias=layer.bias is not None,
                )
            if layer.kind == "conv2d":
                entry.update(
                    kernel=list(layer.kernel),
                    stride=layer.stride,
                    padding=layer.padding,
                    depthwise=layer.depthwise,
                )
            if layer.kind == "activation":
                entry["activation"] = layer.activation
            out.append(entry)
        return out

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.structure(), sort_keys=True).encode())
        h.update(json.dumps(list(self.input_shape)).encode())
        for layer in self.compute_layers():
            h.update(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
            if layer.bias is not None:
                h.update(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
        return h.hexdigest()


def check_mix_support(layer: Layer, active_in: int | None = None, active_out: int | None = None) -> bool:
    """Whether the bit-serial mixed-precision kernels accept this layer configuration."""
    cin = layer.in_channels if active_in is None else active_in
    cout = layer.out_channels if active_out is None else active_out
    if layer.kind == "conv2d":
        return (
            not layer.depthwise
            and cin % 32 == 0
            and cout % 8 == 0
            and min(layer.out_spatial) >= 2
        )
    if layer.kind == "linear":
        return cout % 8 == 0
    return False


def channel_source(graph: ModelGraph, layer_id: str) -> tuple[str | None, int]:
    """Compute layer whose output channels feed ``layer_id``, plus the flatten fan-out.

    Walks back through channel-preserving ops, flatten and depthwise convs.
    Returns ``(None, k)`` when the channels come from the network input.
    """
    src = graph[layer_id].inputs[0]
    fanout = 1
    while src != INPUT_ID:
        node = graph[src]
        if node.kind == "conv2d" and not node.depthwise or node.kind == "linear":
            return src, fanout
        if node.kind == "flatten":
            fanout *= node.in_spatial[0] * node.in_spatial[1]
        src = node.inputs[0]
    return None, fanout


def _producers_through(graph: ModelGraph, src: str, acc: set[str]) -> None:
    # collect compute producers reachable backwards via ops that keep the channel identity
    if src == INPUT_ID:
        acc.add(INPUT_ID)
        return
    node = graph[src]
    if node.is_compute and not node.depthwise:
        acc.add(src)
        return
    if node.kind == "conv2d" and node.depthwise:
        acc.add(src)
    for s in node.inputs:
        _producers_through(graph, s, acc)


def detect_dependency_groups(graph: ModelGraph) -> list[frozenset[str]]:
    """Group compute layers whose output channels are coupled through add nodes.

    Sets ``prunable``/``mix_supported`` on every compute layer: grouped layers,
    depthwise convs and the classifier are not prunable.  Groups are returned
    sorted by their smallest member's position in the graph.
    """
    parent: dict[str, str] = {}

    def find(a: str) -> str:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a: str, b: str) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    def link(members: set[str]) -> None:
        for m in members:
            parent.setdefault(m, m)
        first = sorted(members)[0]
        for m in members:
            union(first, m)

    coupled: set[str] = set()
    for layer in graph.layers:
        if layer.kind == "conv2d" and layer.depthwise:
            # a depthwise conv shares its producer's channels
            members = {layer.id}
            _producers_through(graph, layer.inputs[0], members)
            link(members)
        elif layer.kind == "add":
            members = set()
            for src in layer.inputs:
                _producers_through(graph, src, members)
            link(members)
            coupled |= members

    order = {layer.id: i for i, layer in enumerate(graph.layers)}
    order[INPUT_ID] = -1
    classes: dict[str, set[str]] = {}
    for m in parent:
        classes.setdefault(find(m), set()).add(m)
    groups = []
    for members in classes.values():
        ids = frozenset(m for m in members if m != INPUT_ID)
        if ids and members & coupled:
            groups.append(ids)
    groups.sort(key=lambda g: min(order[m] for m in g))

    grouped = set().union(*groups) if groups else set()
    classifier = _classifier_ids(graph)
    for layer in graph.compute_layers():
        layer.prunable = not (
            layer.id in grouped or layer.id in classifier or layer.depthwise
        )
        layer.mix_supported = check_mix_support(layer)
    return groups


def _classifier_ids(graph: ModelGraph) -> set[str]:
    acc: set[str] = set()
    _producers_through(graph, graph.output_id, acc)
    return acc
