"""Single-layer sensitivity analysis.

For every layer and compression method a handful of probe policies is built,
each compressing exactly that layer.  Its sensitivity is the mean KL
divergence between the probed model's softmax output and the reference
model's output over ``N`` training samples.

Cache file (JSON)::

    {"format": "rlcompress-sensitivity", "version": 1,
     "model_hash": str, "key": str, "config": {...}, "samples": int,
     "entries": [{"layer": str, "method": str, "param": int, "omega": float}, ...]}

``param`` is the kept channel count for ``prune`` and the probed bit width
for ``quant-act`` / ``quant-weight``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .compress.apply import compress
from .compress.policy import DEFAULT_MAX_BITS, MIX, DiscretePolicy, LayerCMP, discretize
from .model.executor import predict_logits
from .model.graph import Layer, ModelGraph
from .numerics import kl_rows, make_rng

log = logging.getLogger(__name__)

PRUNE, QUANT_ACT, QUANT_WEIGHT = "prune", "quant-act", "quant-weight"
METHODS = (PRUNE, QUANT_ACT, QUANT_WEIGHT)
CACHE_FORMAT = "rlcompress-sensitivity"
DISABLED_VALUE = 0.5


class SensitivityError(ValueError):
    pass


@dataclass(frozen=True)
class SensitivityConfig:
    samples: int = 256
    prune_points: int = 10
    max_bits: int = DEFAULT_MAX_BITS
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1:
            raise SensitivityError("sensitivity needs at least one sample")
        if self.prune_points < 1:
            raise SensitivityError("prune_points must be >= 1")
        if not 1 <= self.max_bits <= 8:
            raise SensitivityError("max_bits must be in [1, 8]")


@dataclass
class SensitivityTable:
    entries: dict[tuple[str, str, int], float] = field(default_factory=dict)
    samples: int = 0
    model_hash: str = ""

    def probes(self, layer_id: str, method: str) -> list[tuple[int, float]]:
        """``(param, omega)`` pairs ordered from weakest to strongest compression."""
        items = [(p, om) for (lid, m, p), om in self.entries.items() if lid == layer_id and m == method]
        # weaker compression = more channels / more bits
        return sorted(items, key=lambda t: -t[0])

    def summary(self, layer_id: str, method: str) -> tuple[float, float, float]:
        """Omega at the weakest, median and strongest probe, squashed into [0, 1).

        Layers without probes for ``method`` summarize to zeros.
        """
        items = self.probes(layer_id, method)
        if not items:
            return (0.0, 0.0, 0.0)
        picks = (items[0][1], items[len(items) // 2][1], items[-1][1])
        return tuple(float(-math.expm1(-om)) for om in picks)

    def layers(self) -> set[str]:
        return {lid for lid, _, _ in self.entries}

    def to_dict(self) -> dict:
        return {
            "format": CACHE_FORMAT,
            "version": 1,
            "model_hash": self.model_hash,
            "samples": self.samples,
            "entries": [
                {"layer": lid, "method": m, "param": p, "omega": om}
                for (lid, m, p), om in self.entries.items()
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> SensitivityTable:
        if data.get("format") != CACHE_FORMAT:
            raise SensitivityError("not a sensitivity table")
        entries = {(e["layer"], e["method"], int(e["param"])): float(e["omega"]) for e in data["entries"]}
        return cls(entries, int(data["samples"]), data.get("model_hash", ""))


def supports(layer: Layer, method: str) -> bool:
    if method == PRUNE:
        return layer.is_compute and layer.prunable
    if method in (QUANT_ACT, QUANT_WEIGHT):
        return layer.is_compute and layer.mix_supported
    raise SensitivityError(f"unknown method {method!r}")


def prune_probe_counts(reference: int, points: int) -> list[int]:
    """Kept-channel counts for ``points`` sparsity values spread evenly over (0, 1]."""
    return [discretize(k / points, reference) for k in range(1, points + 1)]


def build_probe_policies(
    graph: ModelGraph,
    layer_id: str,
    method: str,
    points: int = 10,
    max_bits: int = DEFAULT_MAX_BITS,
) -> list[tuple[int, DiscretePolicy]]:
    """Single-layer probe policies as ``(param, policy)`` pairs."""
    layer = graph[layer_id]
    if not supports(layer, method):
        raise SensitivityError(f"layer {layer_id!r} does not support {method}")
    out = []
    if method == PRUNE:
        for kept in prune_probe_counts(layer.out_channels, points):
            out.append((kept, DiscretePolicy({layer_id: LayerCMP(kept)}, max_bits=max_bits)))
    else:
        for bits in range(1, max_bits + 1):
            b_a, b_w = (bits, max_bits) if method == QUANT_ACT else (max_bits, bits)
            cmp_ = LayerCMP(layer.out_channels, MIX, b_a, b_w)
            out.append((bits, DiscretePolicy({layer_id: cmp_}, max_bits=max_bits)))
    return out


def measure_distortion(
    graph: ModelGraph,
    policy: DiscretePolicy,
    samples: np.ndarray,
    reference_logits: np.ndarray | None = None,
) -> float:
    """Mean KL(compressed || original) of the softmax outputs over ``samples``."""
    if len(samples) < 1:
        raise SensitivityError("need at least one sample")
    if reference_logits is None:
        reference_logits = predict_logits(graph, samples)
    compressed = compress(graph, policy)
    return float(np.mean(kl_rows(predict_logits(compressed, samples), reference_logits)))


def select_samples(x: np.ndarray, n: int, seed: int) -> np.ndarray:
    """The first ``n`` items of the training inputs shuffled with ``seed``."""
    if n < 1:
        raise SensitivityError("need at least one sample")
    order = make_rng(seed).permutation(len(x))
    return x[order[:n]]


def cache_key(graph: ModelGraph, config: SensitivityConfig, data_hash: str = "") -> str:
    blob = json.dumps({"model": graph.content_hash(), "data": data_hash, **asdict(config)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:32]


def compute_table(graph: ModelGraph, train_x: np.ndarray, config: SensitivityConfig) -> SensitivityTable:
    samples = select_samples(train_x, config.samples, config.seed)
    ref = predict_logits(graph, samples)
    table = SensitivityTable(samples=len(samples), model_hash=graph.content_hash())
    for layer in graph.compute_layers():
        for method in METHODS:
            if not supports(layer, method):
                continue
            for param, policy in build_probe_policies(
                graph, layer.id, method, config.prune_points, config.max_bits
            ):
                table.entries[(layer.id, method, param)] = measure_distortion(graph, policy, samples, ref)
        log.debug("sensitivity done for %s", layer.id)
    return table


def run_analysis(
    graph: ModelGraph,
    train_x: np.ndarray,
    config: SensitivityConfig | None = None,
    cache_dir: str | Path | None = None,
    data_hash: str = "",
) -> SensitivityTable:
    """Full sensitivity table, loaded from or stored to ``cache_dir`` when given."""
    config = config or SensitivityConfig()
    path = None
    if cache_dir is not None:
        key = cache_key(graph, config, data_hash)
        path = Path(cache_dir) / f"sensitivity-{key}.json"
        if path.exists():
            log.info("sensitivity cache hit %s", path)
            return SensitivityTable.from_dict(json.loads(path.read_text()))
    table = compute_table(graph, train_x, config)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        data = table.to_dict()
        data["key"] = path.stem.split("-", 1)[1]
        data["config"] = asdict(config)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(data, indent=1) + "\n")
        tmp.replace(path)
    return table


def expected_entry_count(graph: ModelGraph, config: SensitivityConfig) -> int:
    # probes of tiny layers can collapse onto the same channel count
    n_prune = sum(
        len(set(prune_probe_counts(layer.out_channels, config.prune_points)))
        for layer in graph.compute_layers()
        if layer.prunable
    )
    n_mix = sum(1 for layer in graph.compute_layers() if layer.mix_supported)
    return n_prune + 2 * n_mix * config.max_bits
