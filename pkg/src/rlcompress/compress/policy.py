"""Continuous compression policies and their mapping to discrete parameters.

Serialized policy (JSON object)::

    {"format": "rlcompress-policy", "version": 1,
     "prune_multiple": int | null, "max_bits": int,
     "layers": [{"id": str, "kept": int, "mode": "fp32"|"int8"|"mix",
                 "b_a": int, "b_w": int,
                 "prune": float | null, "r_a": float | null, "r_w": float | null,
                 "actions": [float, ...] | null}, ...]}

``kept/mode/b_a/b_w`` are the discrete parameters that get applied;
``prune/r_a/r_w/actions`` record the continuous values they came from.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from ..model.costs import active_channels
from ..model.graph import ModelGraph, check_mix_support

FP32, INT8, MIX = "fp32", "int8", "mix"
MODES = (FP32, INT8, MIX)
T_MIX = 0.5
T_INT8 = 0.2
DEFAULT_MAX_BITS = 6
DEFAULT_JOINT_MULTIPLE = 32
POLICY_FORMAT = "rlcompress-policy"


class PolicyError(ValueError):
    """A policy violates a layer constraint; ``layer`` and ``rule`` name it."""

    def __init__(self, layer: str, rule: str, detail: str = ""):
        super().__init__(f"layer {layer!r} violates {rule}" + (f": {detail}" if detail else ""))
        self.layer = layer
        self.rule = rule


def discretize(r: float, reference: int, multiple: int | None = None) -> int:
    """Map a compression ratio in [0, 1] to a count in [1, reference].

    ``floor((1 - r) * reference) + 1``, clamped to the reference; with
    ``multiple`` the result is rounded to the nearest positive multiple
    (at least ``multiple``) and clamped again.
    """
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"compression ratio {r} outside [0, 1]")
    if reference < 1:
        raise ValueError("reference must be >= 1")
    d = min(max(math.floor((1.0 - r) * reference) + 1, 1), reference)
    if multiple:
        d = max(multiple, multiple * math.floor(d / multiple + 0.5))
        d = min(d, reference)
    return d


@dataclass(frozen=True)
class QuantDecision:
    mode: str
    r_a: float | None = None
    r_w: float | None = None
    b_a: int = 32
    b_w: int = 32


def _mix_ratio(a: float) -> float:
    return min(max((a - T_MIX) / (1.0 - T_MIX), 0.0), 1.0)


def map_quant_action(a_a: float, a_w: float, mix_ok: bool, max_bits: int = DEFAULT_MAX_BITS) -> QuantDecision:
    """Threshold the activation/weight actions into FP32, INT8 or MIX."""
    top = max(a_a, a_w)
    if top > T_MIX and mix_ok:
        r_a, r_w = _mix_ratio(a_a), _mix_ratio(a_w)
        return QuantDecision(MIX, r_a, r_w, discretize(r_a, max_bits), discretize(r_w, max_bits))
    if top > T_INT8:
        return QuantDecision(INT8, b_a=8, b_w=8)
    return QuantDecision(FP32)


@dataclass
class LayerPolicy:
    prune: float | None = None
    quant: str = FP32
    r_a: float | None = None
    r_w: float | None = None
    actions: list[float] | None = None


@dataclass
class CompressionPolicy:
    layers: dict[str, LayerPolicy] = field(default_factory=dict)
    prune_multiple: int | None = None
    max_bits: int = DEFAULT_MAX_BITS

    def get(self, layer_id: str) -> LayerPolicy:
        return self.layers.get(layer_id, LayerPolicy())


@dataclass(frozen=True)
class LayerCMP:
    kept: int
    mode: str = FP32
    b_a: int = 32
    b_w: int = 32


@dataclass
class DiscretePolicy:
    layers: dict[str, LayerCMP] = field(default_factory=dict)
    prune_multiple: int | None = None
    max_bits: int = DEFAULT_MAX_BITS
    source: CompressionPolicy | None = None

    def to_dict(self) -> dict:
        src = self.source or CompressionPolicy()
        entries = []
        for lid, cmp_ in self.layers.items():
            lp = src.get(lid)
            entries.append(
                {
                    "id": lid,
                    "kept": cmp_.kept,
                    "mode": cmp_.mode,
                    "b_a": cmp_.b_a,
                    "b_w": cmp_.b_w,
                    "prune": lp.prune,
                    "r_a": lp.r_a,
                    "r_w": lp.r_w,
                    "actions": lp.actions,
                }
            )
        return {
            "format": POLICY_FORMAT,
            "version": 1,
            "prune_multiple": self.prune_multiple,
            "max_bits": self.max_bits,
            "layers": entries,
        }

    @classmethod
    def from_dict(cls, data: dict) -> DiscretePolicy:
        if data.get("format") != POLICY_FORMAT:
            raise ValueError("not a serialized policy")
        layers, src = {}, CompressionPolicy(
            prune_multiple=data.get("prune_multiple"), max_bits=data.get("max_bits", DEFAULT_MAX_BITS)
        )
        for e in data["layers"]:
            mode = e["mode"]
            if mode not in MODES:
                raise PolicyError(e["id"], "quant-mode", f"unknown mode {mode!r}")
            layers[e["id"]] = LayerCMP(int(e["kept"]), mode, int(e["b_a"]), int(e["b_w"]))
            src.layers[e["id"]] = LayerPolicy(
                prune=e.get("prune"), quant=mode, r_a=e.get("r_a"), r_w=e.get("r_w"), actions=e.get("actions")
            )
        return cls(layers, src.prune_multiple, src.max_bits, src)


def reference_policy(graph: ModelGraph) -> DiscretePolicy:
    """The identity policy: every channel kept, everything FP32."""
    return DiscretePolicy({layer.id: LayerCMP(layer.out_channels) for layer in graph.compute_layers()})


def discretize_policy(
    graph: ModelGraph,
    policy: CompressionPolicy,
    prune_multiple: int | None = None,
    max_bits: int | None = None,
) -> DiscretePolicy:
    multiple = policy.prune_multiple if prune_multiple is None else prune_multiple
    bits_cap = policy.max_bits if max_bits is None else max_bits
    layers = {}
    for layer in graph.compute_layers():
        lp = policy.get(layer.id)
        kept = layer.out_channels
        if lp.prune is not None:
            if not layer.prunable:
                raise PolicyError(layer.id, "non-prunable", "pruning parameter on a coupled or fixed layer")
            kept = discretize(lp.prune, layer.out_channels, multiple)
        if lp.quant == MIX:
            ra = 0.0 if lp.r_a is None else lp.r_a
            rw = 0.0 if lp.r_w is None else lp.r_w
            cmp_ = LayerCMP(kept, MIX, discretize(ra, bits_cap), discretize(rw, bits_cap))
        elif lp.quant == INT8:
            cmp_ = LayerCMP(kept, INT8, 8, 8)
        elif lp.quant == FP32:
            cmp_ = LayerCMP(kept)
        else:
            raise PolicyError(layer.id, "quant-mode", f"unknown mode {lp.quant!r}")
        layers[layer.id] = cmp_
    return DiscretePolicy(layers, multiple, bits_cap, policy)


def validate_policy(
    graph: ModelGraph,
    policy: DiscretePolicy,
    prune_multiple: int | None = None,
    max_bits: int | None = None,
) -> None:
    """Raise :class:`PolicyError` for the first violated constraint."""
    multiple = policy.prune_multiple if prune_multiple is None else prune_multiple
    bits_cap = policy.max_bits if max_bits is None else max_bits
    ids = {layer.id for layer in graph.compute_layers()}
    for lid in policy.layers:
        if lid not in ids:
            raise PolicyError(lid, "unknown-layer")
    active = active_channels(graph, {k: v.kept for k, v in policy.layers.items()})
    for layer in graph.compute_layers():
        cmp_ = policy.layers.get(layer.id, LayerCMP(layer.out_channels))
        if not 1 <= cmp_.kept <= layer.out_channels:
            raise PolicyError(layer.id, "channel-range", f"kept {cmp_.kept} of {layer.out_channels}")
        if cmp_.kept != layer.out_channels:
            if not layer.prunable:
                raise PolicyError(layer.id, "non-prunable", "coupled or fixed layer was pruned")
            if multiple and cmp_.kept % multiple:
                raise PolicyError(layer.id, "channel-multiple", f"kept {cmp_.kept} not a multiple of {multiple}")
        if cmp_.mode == FP32:
            if (cmp_.b_a, cmp_.b_w) != (32, 32):
                raise PolicyError(layer.id, "fp32-bits")
        elif cmp_.mode == INT8:
            if (cmp_.b_a, cmp_.b_w) != (8, 8):
                raise PolicyError(layer.id, "int8-bits")
        elif cmp_.mode == MIX:
            if not (1 <= cmp_.b_a <= bits_cap and 1 <= cmp_.b_w <= bits_cap):
                raise PolicyError(layer.id, "mix-bits", f"bits {cmp_.b_a}/{cmp_.b_w} outside [1, {bits_cap}]")
            cin, cout = active[layer.id]
            if not check_mix_support(layer, cin, cout):
                raise PolicyError(
                    layer.id,
                    "mix-support",
                    f"in={cin} out={cout} spatial={layer.out_spatial} depthwise={layer.depthwise}",
                )
        else:
            raise PolicyError(layer.id, "quant-mode", f"unknown mode {cmp_.mode!r}")


def save_policy(policy: DiscretePolicy, path: str | Path) -> None:
    Path(path).write_text(json.dumps(policy.to_dict(), indent=1) + "\n")


def load_policy(path: str | Path) -> DiscretePolicy:
    return DiscretePolicy.from_dict(json.loads(Path(path).read_text()))
