"""Validation of a compressed model: accuracy, MACs, BOPs and latency."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Protocol

import numpy as np

from ..compress.apply import apply_policy
from ..compress.policy import CompressionPolicy, DiscretePolicy, reference_policy, validate_policy
from ..model.costs import model_totals
from ..model.graph import ModelGraph
from ..training import accuracy
from .device import DeviceProfile, synthetic_latency
from .remote import RemoteLatencyClient, remote_latency


class LatencyProvider(Protocol):
    def latency_ms(self, graph: ModelGraph, policy: DiscretePolicy) -> float: ...


@dataclass(frozen=True)
class SyntheticProvider:
    profile: DeviceProfile = DeviceProfile()

    def latency_ms(self, graph: ModelGraph, policy: DiscretePolicy) -> float:
        return synthetic_latency(graph, policy, self.profile)


@dataclass
class RemoteProvider:
    client: RemoteLatencyClient
    repeats: int | None = None

    def latency_ms(self, graph: ModelGraph, policy: DiscretePolicy) -> float:
        return remote_latency(graph, policy, self.client, self.repeats)


@dataclass(frozen=True)
class CostReport:
    macs: int
    bops: int
    params: int
    latency_ms: float
    accuracy: float
    reference_latency_ms: float

    @property
    def relative_latency(self) -> float:
        return self.latency_ms / self.reference_latency_ms

    def to_dict(self) -> dict:
        return {**asdict(self), "relative_latency": self.relative_latency}

    @classmethod
    def from_dict(cls, data: dict) -> CostReport:
        return cls(
            macs=int(data["macs"]),
            bops=int(data["bops"]),
            params=int(data["params"]),
            latency_ms=float(data["latency_ms"]),
            accuracy=float(data["accuracy"]),
            reference_latency_ms=float(data["reference_latency_ms"]),
        )


def validate_accuracy(graph: ModelGraph, x: np.ndarray, y: np.ndarray) -> float:
    """Top-1 accuracy of ``graph`` on a non-empty split."""
    return accuracy(graph, x, y)


def reference_latency(graph: ModelGraph, provider: LatencyProvider) -> float:
    return provider.latency_ms(graph, reference_policy(graph))


def evaluate(
    graph: ModelGraph,
    policy: CompressionPolicy | DiscretePolicy,
    provider: LatencyProvider,
    x: np.ndarray,
    y: np.ndarray,
    reference_latency_ms: float | None = None,
    compressed: ModelGraph | None = None,
) -> CostReport:
    """Apply ``policy`` to a copy of ``graph`` and measure it.

    ``compressed`` may pass an already compressed (e.g. fine-tuned) model
    for ``policy``; its accuracy is then measured instead.
    """
    if isinstance(policy, DiscretePolicy):
        discrete = policy
        validate_policy(graph, discrete)
        if compressed is None:
            compressed, _ = apply_policy(graph, discrete)
    else:
        model, discrete = apply_policy(graph, policy)
        compressed = compressed or model
    totals = model_totals(graph, discrete)
    lat = provider.latency_ms(graph, discrete)
    ref = reference_latency(graph, provider) if reference_latency_ms is None else reference_latency_ms
    return CostReport(
        macs=totals.macs,
        bops=totals.bops,
        params=totals.params,
        latency_ms=lat,
        accuracy=validate_accuracy(compressed, x, y),
        reference_latency_ms=ref,
    )
