"""Episode loop, policy search schemes and the search history file.

History file (JSON lines): a header record followed by one record per
finished episode::

    {"type": "header", "version": 1, "config": {...}, "stage": str,
     "reference_latency_ms": float, "model_hash": str, "frozen": {...} | null}
    {"type": "episode", "episode": int, "warmup": bool, "sigma": float | null,
     "policy": {...}, "report": {...}, "reward": float}
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..agent.ddpg import AgentConfig, DDPGAgent, Transition
from ..compress.apply import apply_policy
from ..compress.finetune import fine_tune
from ..compress.policy import (
    FP32,
    INT8,
    MIX,
    CompressionPolicy,
    DiscretePolicy,
    LayerCMP,
    LayerPolicy,
    discretize,
    discretize_policy,
    map_quant_action,
    validate_policy,
)
from ..cost.evaluate import CostReport, LatencyProvider, evaluate
from ..cost.remote import MeasurementError
from ..data import Dataset
from ..model.costs import active_channels
from ..model.graph import ModelGraph, check_mix_support
from ..sensitivity import SensitivityTable
from .config import SearchConfig
from .state import ModelFeatures, build_state, state_dim

log = logging.getLogger(__name__)

HISTORY_VERSION = 1
# the best policy must land within this distance above the target
TARGET_SLACK = 0.05


class SearchError(RuntimeError):
    pass


def compute_reward(accuracy: float, latency: float, reference_latency: float, c: float, beta: float) -> float:
    """``acc + beta * |T_P / (c * T) - 1|``."""
    if latency <= 0 or reference_latency <= 0:
        raise ValueError("latencies must be positive")
    if c <= 0 or beta >= 0:
        raise ValueError("need c > 0 and beta < 0")
    return accuracy + beta * abs(latency / (c * reference_latency) - 1.0)


@dataclass
class EpisodeResult:
    episode: int
    policy: DiscretePolicy
    report: CostReport
    reward: float
    sigma: float | None
    warmup: bool

    def to_record(self) -> dict:
        return {
            "type": "episode",
            "episode": self.episode,
            "warmup": self.warmup,
            "sigma": self.sigma,
            "policy": self.policy.to_dict(),
            "report": self.report.to_dict(),
            "reward": self.reward,
        }

    @classmethod
    def from_record(cls, rec: dict) -> EpisodeResult:
        return cls(
            episode=int(rec["episode"]),
            policy=DiscretePolicy.from_dict(rec["policy"]),
            report=CostReport.from_dict(rec["report"]),
            reward=float(rec["reward"]),
            sigma=rec["sigma"],
            warmup=bool(rec["warmup"]),
        )


@dataclass
class SearchSetup:
    """Everything a search needs besides its configuration."""

    graph: ModelGraph
    dataset: Dataset
    provider: LatencyProvider
    sensitivity: SensitivityTable | None = None
    reference_latency_ms: float | None = None

    def __post_init__(self):
        if self.reference_latency_ms is None:
            from ..compress.policy import reference_policy

            self.reference_latency_ms = self.provider.latency_ms(self.graph, reference_policy(self.graph))


@dataclass
class SearchResult:
    config: SearchConfig
    history: list[EpisodeResult]
    best: EpisodeResult
    reference_latency_ms: float
    stage: str = "single"
    frozen: DiscretePolicy | None = None
    discarded: list[int] = field(default_factory=list)
    agent: DDPGAgent | None = None
    model_hash: str = ""

    def header(self) -> dict:
        return {
            "type": "header",
            "version": HISTORY_VERSION,
            "config": self.config.to_dict(),
            "stage": self.stage,
            "reference_latency_ms": self.reference_latency_ms,
            "model_hash": self.model_hash,
            "frozen": None if self.frozen is None else self.frozen.to_dict(),
        }


# ---------------------------------------------------------------------------
# frozen parameters of a sequential second stage


@dataclass(frozen=True)
class Frozen:
    """Stage-1 decisions a second stage must not change."""

    policy: DiscretePolicy
    method: str  # "prune" freezes kept channels, "quant" freezes mode and bits

    def merge(self, layer_id: str, cmp_: LayerCMP) -> LayerCMP:
        old = self.policy.layers.get(layer_id)
        if old is None:
            return cmp_
        if self.method == "prune":
            return LayerCMP(old.kept, cmp_.mode, cmp_.b_a, cmp_.b_w)
        return LayerCMP(cmp_.kept, old.mode, old.b_a, old.b_w)


def _episode_policy(
    graph: ModelGraph,
    config: SearchConfig,
    continuous: CompressionPolicy,
    frozen: Frozen | None,
) -> DiscretePolicy:
    discrete = discretize_policy(graph, continuous, config.multiple, config.max_bits)
    if frozen is not None:
        discrete = DiscretePolicy(
            {lid: frozen.merge(lid, cmp_) for lid, cmp_ in discrete.layers.items()},
            discrete.prune_multiple,
            discrete.max_bits,
            discrete.source,
        )
    return discrete


def _apply_action(
    graph: ModelGraph,
    config: SearchConfig,
    layer_id: str,
    action: np.ndarray,
    kept: dict[str, int],
    frozen: Frozen | None,
) -> LayerPolicy:
    """Policy entry for one layer; updates ``kept`` with the layer's channel count."""
    layer = graph[layer_id]
    kind = config.agent
    lp = LayerPolicy(actions=[float(a) for a in action])
    frozen_cmp = None if frozen is None else frozen.policy.layers.get(layer_id)
    if kind in ("prune", "joint") and layer.prunable:
        if frozen_cmp is not None and frozen.method == "prune":
            kept[layer_id] = frozen_cmp.kept
        else:
            lp.prune = float(action[0])
            kept[layer_id] = discretize(lp.prune, layer.out_channels, config.multiple)
    elif frozen_cmp is not None and frozen.method == "prune":
        kept[layer_id] = frozen_cmp.kept
    if kind in ("quant", "joint"):
        a_a, a_w = float(action[-2]), float(action[-1])
        cin, _ = active_channels(graph, kept)[layer_id]
        mix_ok = check_mix_support(layer, cin, kept.get(layer_id, layer.out_channels))
        decision = map_quant_action(a_a, a_w, mix_ok, config.max_bits)
        lp.quant, lp.r_a, lp.r_w = decision.mode, decision.r_a, decision.r_w
    elif frozen_cmp is not None and frozen.method == "quant":
        lp.quant = frozen_cmp.mode
    return lp


def run_episode(
    agent: DDPGAgent,
    setup: SearchSetup,
    config: SearchConfig,
    features: ModelFeatures,
    episode: int,
    frozen: Frozen | None = None,
) -> EpisodeResult | None:
    """One full policy prediction, evaluation and agent update.

    Returns ``None`` when the measurement failed more often than allowed.
    """
    graph = setup.graph
    continuous = CompressionPolicy(prune_multiple=config.multiple, max_bits=config.max_bits)
    kept: dict[str, int] = {}
    if frozen is not None and frozen.method == "prune":
        kept = {lid: c.kept for lid, c in frozen.policy.layers.items() if c.kept != graph[lid].out_channels}
    prev = np.zeros(agent.config.action_dim)
    states, actions = [], []
    warm = episode < config.warmup
    for i, layer in enumerate(features.layers):
        raw = build_state(features, i, kept, prev, setup.sensitivity, config.sensitivity)
        s = agent.observe(raw)
        a = agent.explore(agent.predict(s), episode)
        continuous.layers[layer.id] = _apply_action(graph, config, layer.id, a, kept, frozen)
        states.append(s)
        actions.append(a)
        prev = a
    discrete = _episode_policy(graph, config, continuous, frozen)
    validate_policy(graph, discrete)

    report = _measure(setup, config, discrete, episode)
    if report is None:
        return None
    reward = compute_reward(
        report.accuracy, report.latency_ms, report.reference_latency_ms, config.target, config.beta
    )
    agent.observe_reward(reward)
    n = len(states)
    for t in range(n):
        last = t == n - 1
        agent.record(Transition(states[t], actions[t], reward, states[t if last else t + 1], last))
    if not warm:
        steps = n if config.optimize_steps is None else config.optimize_steps
        for _ in range(steps):
            if len(agent.buffer) >= agent.config.batch_size:
                agent.optimize()
    agent.episode = episode + 1
    return EpisodeResult(episode, discrete, report, reward, None if warm else agent.sigma(episode), warm)


def _measure(setup: SearchSetup, config: SearchConfig, discrete: DiscretePolicy, episode: int) -> CostReport | None:
    data = setup.dataset.val
    if config.val_samples is not None:
        data = data.head(config.val_samples)
    compressed = None
    if config.episode_finetune_epochs:
        compressed, _ = apply_policy(setup.graph, discrete)
        train = setup.dataset.train.head(1000)
        compressed = fine_tune(compressed, train.x, train.y, config.episode_finetune_epochs, config.finetune_lr,
                               seed=config.seed + episode)
    for attempt in range(config.max_retries + 1):
        try:
            return evaluate(
                setup.graph, discrete, setup.provider, data.x, data.y,
                reference_latency_ms=setup.reference_latency_ms, compressed=compressed,
            )
        except MeasurementError as exc:
            log.warning("episode %d measurement failed (attempt %d): %s", episode, attempt + 1, exc)
    log.warning("episode %d discarded after %d failed measurements", episode, config.max_retries + 1)
    return None


def select_best(history: list[EpisodeResult], target: float) -> EpisodeResult:
    """Highest reward among episodes within the latency slack, else highest reward overall."""
    if not history:
        raise SearchError("no finished episodes to choose from")
    ok = [e for e in history if e.report.relative_latency <= target + TARGET_SLACK]
    pool = ok or history
    return max(pool, key=lambda e: (e.reward, -e.episode))


def make_agent(config: SearchConfig) -> DDPGAgent:
    return DDPGAgent(
        AgentConfig(kind=config.agent, state_dim=state_dim(config.agent), warmup=config.warmup, seed=config.seed)
    )


def run_search(
    config: SearchConfig,
    setup: SearchSetup,
    history_path: str | Path | None = None,
    frozen: Frozen | None = None,
    stage: str = "single",
) -> SearchResult:
    if config.sensitivity and setup.sensitivity is None:
        raise SearchError("sensitivity is enabled but no sensitivity table was given")
    features = ModelFeatures.build(setup.graph, config.agent)
    agent = make_agent(config)
    history: list[EpisodeResult] = []
    discarded: list[int] = []
    result = SearchResult(config, history, None, setup.reference_latency_ms, stage,  # type: ignore[arg-type]
                          None if frozen is None else frozen.policy, discarded, agent,
                          setup.graph.content_hash())
    fh = None
    if history_path is not None:
        Path(history_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(history_path, "w")
        fh.write(json.dumps(result.header()) + "\n")
    try:
        for ep in range(config.num_episodes):
            res = run_episode(agent, setup, config, features, ep, frozen)
            if res is None:
                discarded.append(ep)
                continue
            history.append(res)
            if fh is not None:
                fh.write(json.dumps(res.to_record()) + "\n")
            if ep % 10 == 0 or ep == config.num_episodes - 1:
                log.info(
                    "%s ep %d reward %.4f acc %.4f rel-lat %.4f",
                    config.agent, ep, res.reward, res.report.accuracy, res.report.relative_latency,
                )
    finally:
        if fh is not None:
            fh.close()
    result.best = select_best(history, config.target)
    return result


def stage_target(c: float) -> float:
    """Latency target of the first stage of a sequential search."""
    return 0.5 * (1.0 - c)


def run_sequential(
    config_first: SearchConfig,
    config_second: SearchConfig,
    setup: SearchSetup,
    history_dir: str | Path | None = None,
) -> tuple[SearchResult, SearchResult]:
    """Search one method with target ``0.5 * (1 - c)``, then the other with ``c``.

    The second stage keeps every decision of the first stage's best policy.
    """
    kinds = {config_first.agent, config_second.agent}
    if kinds != {"prune", "quant"}:
        raise SearchError("a sequential search needs one pruning and one quantization stage")
    c = config_second.target
    first = config_first.with_(target=stage_target(c))
    if first.agent == "prune":
        # the pruning stage obeys the same channel rounding as the joint agent
        first = first.with_(prune_multiple=first.joint_multiple)
    second = config_second
    if second.agent == "prune":
        second = second.with_(prune_multiple=second.joint_multiple)
    path1 = path2 = None
    if history_dir is not None:
        path1 = Path(history_dir) / f"history-stage1-{first.agent}.jsonl"
        path2 = Path(history_dir) / f"history-stage2-{second.agent}.jsonl"
    r1 = run_search(first, setup, path1, stage="stage1")
    frozen = Frozen(r1.best.policy, first.agent)
    r2 = run_search(second, setup, path2, frozen=frozen, stage="stage2")
    return r1, r2


def frozen_violations(frozen: DiscretePolicy, method: str, policy: DiscretePolicy) -> list[str]:
    """Layers whose frozen stage-1 parameters differ in ``policy``."""
    bad = []
    for lid, old in frozen.layers.items():
        new = policy.layers.get(lid)
        if new is None:
            bad.append(lid)
        elif method == "prune" and new.kept != old.kept:
            bad.append(lid)
        elif method == "quant" and (new.mode, new.b_a, new.b_w) != (old.mode, old.b_a, old.b_w):
            bad.append(lid)
    return bad


def fine_tune_and_report(
    setup: SearchSetup,
    policy: DiscretePolicy,
    epochs: int = 5,
    lr: float = 0.01,
    train_samples: int | None = None,
    seed: int = 0,
) -> tuple[CostReport, float]:
    """Fine-tune the compressed model and measure it on the test split.

    Returns the final report and the test accuracy before fine-tuning.
    """
    compressed, _ = apply_policy(setup.graph, policy)
    test = setup.dataset.test
    base = evaluate(setup.graph, policy, setup.provider, test.x, test.y,
                    reference_latency_ms=setup.reference_latency_ms, compressed=compressed)
    if epochs <= 0:
        return base, base.accuracy
    train = setup.dataset.train if train_samples is None else setup.dataset.train.head(train_samples)
    tuned = fine_tune(compressed, train.x, train.y, epochs, lr, seed=seed)
    final = evaluate(setup.graph, policy, setup.provider, test.x, test.y,
                     reference_latency_ms=setup.reference_latency_ms, compressed=tuned)
    return final, base.accuracy


def read_history(path: str | Path) -> tuple[dict, list[EpisodeResult]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise SearchError(f"{path} is empty")
    header = json.loads(lines[0])
    if header.get("type") != "header" or header.get("version") != HISTORY_VERSION:
        raise SearchError(f"{path} is not a search history")
    episodes = [EpisodeResult.from_record(json.loads(line)) for line in lines[1:] if line.strip()]
    return header, episodes


def policy_modes_summary(policy: DiscretePolicy) -> dict[str, int]:
    counts = {FP32: 0, INT8: 0, MIX: 0}
    for cmp_ in policy.layers.values():
        counts[cmp_.mode] += 1
    return counts
