"""Synthetic device latency model.

Per compute layer with ``m`` MACs and a fixed overhead ``o``::

    FP32: m * t32 + o
    INT8: m * t32 / k8 + o
    MIX : m * (t_bs0 + t_bs * b_a * b_w) + o

``t_bs0`` is the bit-serial base cost per MAC (bit packing, popcount
accumulation) that does not shrink with the bit widths.

Profile file (JSON)::

    {"name": str, "t32_ns": float, "int8_speedup": float,
     "t_bs0_ns": float, "t_bs_ns": float, "overhead_ns": float}
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

from ..compress.policy import FP32, INT8, MIX, DiscretePolicy, LayerCMP, validate_policy
from ..model.costs import active_channels
from ..model.graph import ModelGraph

PROFILE_FIELDS = ("name", "t32_ns", "int8_speedup", "t_bs0_ns", "t_bs_ns", "overhead_ns")


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class DeviceProfile:
    name: str = "synthetic-a72"
    t32_ns: float = 1.0
    int8_speedup: float = 2.5
    t_bs0_ns: float = 0.1
    t_bs_ns: float = 0.0065
    overhead_ns: float = 20_000.0
    max_bits: int = 6

    def __post_init__(self):
        if self.t32_ns <= 0 or self.t_bs_ns <= 0 or self.t_bs0_ns < 0 or self.overhead_ns < 0:
            raise ProfileError("timings must be positive (base cost and overhead non-negative)")
        if self.int8_speedup <= 1:
            raise ProfileError("int8 speedup must exceed 1")
        # bit-serial above max_bits x max_bits must not beat INT8
        above = self.max_bits + 1
        if self.mix_ns(above, above) <= self.int8_ns:
            raise ProfileError(f"MIX {above}x{above} bits would beat INT8 on profile {self.name!r}")

    @property
    def int8_ns(self) -> float:
        return self.t32_ns / self.int8_speedup

    def mix_ns(self, b_a: int, b_w: int) -> float:
        return self.t_bs0_ns + self.t_bs_ns * b_a * b_w

    def per_mac_ns(self, mode: str, b_a: int = 32, b_w: int = 32) -> float:
        if mode == FP32:
            return self.t32_ns
        if mode == INT8:
            return self.int8_ns
        if mode == MIX:
            return self.mix_ns(b_a, b_w)
        raise ProfileError(f"unknown mode {mode!r}")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "max_bits"}

    @classmethod
    def from_dict(cls, data: dict) -> DeviceProfile:
        missing = [k for k in PROFILE_FIELDS if k not in data]
        if missing:
            raise ProfileError(f"profile misses fields {missing}")
        extra = set(data) - set(PROFILE_FIELDS)
        if extra:
            raise ProfileError(f"unknown profile fields {sorted(extra)}")
        try:
            return cls(
                name=str(data["name"]),
                **{k: float(data[k]) for k in PROFILE_FIELDS if k != "name"},
            )
        except (TypeError, ValueError) as exc:
            raise ProfileError(str(exc)) from exc


def load_profile(path: str | Path) -> DeviceProfile:
    return DeviceProfile.from_dict(json.loads(Path(path).read_text()))


def save_profile(profile: DeviceProfile, path: str | Path) -> None:
    Path(path).write_text(json.dumps(profile.to_dict(), indent=1) + "\n")


def layer_specs(graph: ModelGraph, policy: DiscretePolicy) -> list[dict]:
    """Per compute layer description as sent over the measurement protocol."""
    active = active_channels(graph, {k: v.kept for k, v in policy.layers.items()})
    specs = []
    for layer in graph.compute_layers():
        cin, cout = active[layer.id]
        cmp_ = policy.layers.get(layer.id, LayerCMP(layer.out_channels))
        kind = "linear" if layer.kind == "linear" else ("depthwise" if layer.depthwise else "conv")
        specs.append(
            {
                "id": layer.id,
                "kind": kind,
                "in": cin,
                "out": cout,
                "kernel": list(layer.kernel) if layer.kernel else [1, 1],
                "stride": layer.stride,
                "spatial": list(layer.out_spatial) if layer.out_spatial else [1, 1],
                "mode": cmp_.mode,
                "b_a": cmp_.b_a,
                "b_w": cmp_.b_w,
            }
        )
    return specs


def spec_macs(spec: dict) -> int:
    kind = spec["kind"]
    if kind == "linear":
        return int(spec["in"]) * int(spec["out"])
    kh, kw = spec["kernel"]
    ho, wo = spec["spatial"]
    per_out = 1 if kind == "depthwise" else int(spec["in"])
    if kind not in ("conv", "depthwise"):
        raise ProfileError(f"unknown layer kind {kind!r}")
    return int(spec["out"]) * per_out * int(kh) * int(kw) * int(ho) * int(wo)


def latency_from_specs(specs: list[dict], profile: DeviceProfile) -> float:
    """Latency in milliseconds of a list of layer specs."""
    total_ns = 0.0
    for spec in specs:
        per_mac = profile.per_mac_ns(spec["mode"], int(spec["b_a"]), int(spec["b_w"]))
        total_ns += spec_macs(spec) * per_mac + profile.overhead_ns
    return total_ns * 1e-6


def synthetic_latency(graph: ModelGraph, policy: DiscretePolicy, profile: DeviceProfile) -> float:
    validate_policy(graph, policy)
    specs = layer_specs(graph, policy)
    return latency_from_specs(specs, profile)

