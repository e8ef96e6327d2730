"""DDPG agent: actor/critic MLPs, replay buffer, exploration and normalizers."""
from __future__ import annotations

import io
import json
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..numerics import (
    AdamState,
    MlpNet,
    adam_step,
    make_rng,
    mlp_backward,
    mlp_forward,
    sample_truncated_normal,
)

ACTION_DIMS = {"prune": 1, "quant": 2, "joint": 3}
CHECKPOINT_VERSION = 1


class AgentError(ValueError):
    pass


@dataclass
class AgentConfig:
    kind: str
    state_dim: int
    gamma: float = 0.99
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    batch_size: int = 128
    buffer_size: int = 2000
    sigma0: float = 0.5
    sigma_decay: float = 0.95
    warmup: int = 10
    tau: float = 0.01
    hidden: tuple[int, int] = (400, 300)
    final_scale: float = 1e-3
    reward_decay: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ACTION_DIMS:
            raise AgentError(f"unknown agent kind {self.kind!r}")
        if self.state_dim < 1:
            raise AgentError("state_dim must be positive")
        if not 0 < self.gamma < 1:
            raise AgentError("gamma must lie in (0, 1)")
        if self.sigma0 <= 0:
            raise AgentError("sigma0 must be positive")
        if not 0 < self.sigma_decay < 1:
            raise AgentError("sigma decay must lie in (0, 1)")
        if self.batch_size < 1 or self.buffer_size < 1:
            raise AgentError("batch and buffer sizes must be positive")
        if not 0 < self.tau <= 1:
            raise AgentError("tau must lie in (0, 1]")
        self.hidden = tuple(self.hidden)

    @property
    def action_dim(self) -> int:
        return ACTION_DIMS[self.kind]


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool


class ReplayBuffer:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: deque[Transition] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Transition:
        return self._items[i]

    def append(self, t: Transition) -> None:
        self._items.append(t)

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        if n < 1 or len(self._items) < n:
            raise AgentError(f"cannot sample {n} transitions from a buffer of {len(self._items)}")
        idx = rng.choice(len(self._items), size=n, replace=False)
        return [self._items[i] for i in idx]


@dataclass
class RunningNorm:
    """Running per-feature mean and variance (Welford)."""

    dim: int
    eps: float = 1e-8
    count: int = 0
    mean: np.ndarray = None  # type: ignore[assignment]
    m2: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.m2 is None:
            self.m2 = np.zeros(self.dim)

    @property
    def var(self) -> np.ndarray:
        return self.m2 / self.count if self.count else np.zeros(self.dim)

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (x - self.mean)

    def normalize(self, x: np.ndarray, update: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise AgentError(f"state has shape {x.shape}, expected ({self.dim},)")
        if update:
            self.update(x)
        return (x - self.mean) / np.sqrt(self.var + self.eps)


@dataclass
class RewardNormalizer:
    """Bias-corrected exponential moving average of reward mean and absolute deviation."""

    decay: float = 0.99
    floor: float = 1e-3
    count: int = 0
    mean_acc: float = 0.0
    dev_acc: float = 0.0

    @property
    def mean(self) -> float:
        return self.mean_acc / (1 - self.decay**self.count) if self.count else 0.0

    @property
    def scale(self) -> float:
        dev = self.dev_acc / (1 - self.decay**self.count) if self.count else 1.0
        return max(dev, self.floor)

    def update(self, r: float) -> None:
        self.count += 1
        self.mean_acc = self.decay * self.mean_acc + (1 - self.decay) * r
        self.dev_acc = self.decay * self.dev_acc + (1 - self.decay) * abs(r - self.mean)

    def normalize(self, rewards: np.ndarray) -> np.ndarray:
        return (np.asarray(rewards, dtype=np.float64) - self.mean) / self.scale


def sigma_at(config: AgentConfig, episode: int) -> float:
    return config.sigma0 * config.sigma_decay**episode


# gradient helpers are module level so tests can run them on float64 copies


def critic_loss_grads(critic: MlpNet, s: np.ndarray, a: np.ndarray, y: np.ndarray):
    """Mean squared TD error and its parameter gradients."""
    inp = np.concatenate([s, a], axis=1)
    q = mlp_forward(critic, inp)[:, 0]
    diff = q - y
    loss = float(np.mean(diff * diff))
    grads, _ = mlp_backward(critic, inp, (2.0 * diff / len(y))[:, None])
    return loss, grads


def actor_objective_grads(actor: MlpNet, critic: MlpNet, s: np.ndarray):
    """Mean Q(s, mu(s)) and the gradients of its negation w.r.t. the actor parameters."""
    act = mlp_forward(actor, s)
    inp = np.concatenate([s, act], axis=1)
    q = mlp_forward(critic, inp)[:, 0]
    _, dinp = mlp_backward(critic, inp, np.full((len(s), 1), -1.0 / len(s), dtype=q.dtype))
    da = dinp[:, s.shape[1]:]
    mlp_forward(actor, s)  # restore the actor cache for its backward
    grads, _ = mlp_backward(actor, s, da)
    return float(np.mean(q)), grads


class DDPGAgent:
    def __init__(self, config: AgentConfig):
        self.config = config
        self.rng = make_rng(config.seed)
        h1, h2 = config.hidden
        s, a = config.state_dim, config.action_dim
        self.actor = MlpNet.build([s, h1, h2, a], ["relu", "relu", "sigmoid"], self.rng, config.final_scale)
        self.critic = MlpNet.build([s + a, h1, h2, 1], ["relu", "relu", "linear"], self.rng, config.final_scale)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = AdamState.for_params(self.actor.params(), config.actor_lr)
        self.critic_opt = AdamState.for_params(self.critic.params(), config.critic_lr)
        self.buffer = ReplayBuffer(config.buffer_size)
        self.state_norm = RunningNorm(s)
        self.reward_norm = RewardNormalizer(config.reward_decay)
        self.episode = 0
        self.updates = 0

    # acting

    def observe(self, state: np.ndarray, update: bool = True) -> np.ndarray:
        """Normalize a raw state, updating the running statistics first."""
        return self.state_norm.normalize(state, update)

    def predict(self, state: np.ndarray) -> np.ndarray:
        state = np.asarray(state, dtype=np.float64)
        if state.shape != (self.config.state_dim,):
            raise AgentError(f"state has shape {state.shape}, expected ({self.config.state_dim},)")
        return mlp_forward(self.actor, state).astype(np.float64)

    def sigma(self, episode: int) -> float:
        return sigma_at(self.config, episode)

    def explore(self, action: np.ndarray, episode: int) -> np.ndarray:
        if episode < 0:
            raise AgentError("episode must be >= 0")
        if episode < self.config.warmup:
            return self.rng.uniform(0.0, 1.0, size=self.config.action_dim)
        noisy = sample_truncated_normal(self.rng, np.asarray(action, np.float64), self.sigma(episode))
        return np.atleast_1d(noisy)

    # learning

    def record(self, t: Transition) -> None:
        if np.shape(t.state) != (self.config.state_dim,) or np.shape(t.action) != (self.config.action_dim,):
            raise AgentError("transition dimensions do not match the agent")
        self.buffer.append(t)

    def observe_reward(self, reward: float) -> None:
        self.reward_norm.update(reward)

    def optimize(self) -> tuple[float, float]:
        cfg = self.config
        batch = self.buffer.sample(cfg.batch_size, self.rng) if len(self.buffer) >= cfg.batch_size else None
        if batch is None:
            raise AgentError(f"buffer holds {len(self.buffer)} transitions, need {cfg.batch_size}")
        dt = self.actor.layers[0].weight.dtype
        s = np.stack([t.state for t in batch]).astype(dt)
        a = np.stack([t.action for t in batch]).astype(dt)
        s2 = np.stack([t.next_state for t in batch]).astype(dt)
        r = self.reward_norm.normalize(np.array([t.reward for t in batch]))
        done = np.array([t.terminal for t in batch])

        q_next = mlp_forward(self.critic_target, np.concatenate([s2, mlp_forward(self.actor_target, s2)], axis=1))[:, 0]
        y = (r + cfg.gamma * np.where(done, 0.0, q_next)).astype(dt)

        critic_loss, cgrads = critic_loss_grads(self.critic, s, a, y)
        self.critic.set_params(adam_step(self.critic.params(), cgrads, self.critic_opt))
        objective, agrads = actor_objective_grads(self.actor, self.critic, s)
        self.actor.set_params(adam_step(self.actor.params(), agrads, self.actor_opt))

        _soft_update(self.actor_target, self.actor, cfg.tau)
        _soft_update(self.critic_target, self.critic, cfg.tau)
        self.updates += 1
        return critic_loss, objective

    # persistence

    def save(self, path: str | Path) -> None:
        arrays = {}
        for name, net in self._nets().items():
            for i, p in enumerate(net.params()):
                arrays[f"{name}/{i}"] = p
        for name, opt in (("actor_opt", self.actor_opt), ("critic_opt", self.critic_opt)):
            for i, (m, v) in enumerate(zip(opt.m, opt.v)):
                arrays[f"{name}/m{i}"] = m
                arrays[f"{name}/v{i}"] = v
        arrays["state_norm/mean"] = self.state_norm.mean
        arrays["state_norm/m2"] = self.state_norm.m2
        meta = {
            "format": "rlcompress-agent",
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "episode": self.episode,
            "updates": self.updates,
            "actor_opt_step": self.actor_opt.step,
            "critic_opt_step": self.critic_opt.step,
            "state_norm_count": self.state_norm.count,
            "reward_norm": asdict(self.reward_norm),
            "rng": self.rng.bit_generator.state,
        }
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> DDPGAgent:
        with np.load(Path(path)) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            if meta.get("format") != "rlcompress-agent" or meta.get("version") != CHECKPOINT_VERSION:
                raise AgentError("unsupported agent checkpoint")
            agent = cls(AgentConfig(**meta["config"]))
            for name, net in agent._nets().items():
                net.set_params([data[f"{name}/{i}"] for i in range(len(net.params()))])
            for name, opt in (("actor_opt", agent.actor_opt), ("critic_opt", agent.critic_opt)):
                opt.m = [data[f"{name}/m{i}"] for i in range(len(opt.m))]
                opt.v = [data[f"{name}/v{i}"] for i in range(len(opt.v))]
            agent.state_norm.mean = data["state_norm/mean"]
            agent.state_norm.m2 = data["state_norm/m2"]
        agent.actor_opt.step = meta["actor_opt_step"]
        agent.critic_opt.step = meta["critic_opt_step"]
        agent.state_norm.count = meta["state_norm_count"]
        agent.reward_norm = RewardNormalizer(**meta["reward_norm"])
        agent.episode = meta["episode"]
        agent.updates = meta["updates"]
        agent.rng.bit_generator.state = meta["rng"]
        return agent

    def _nets(self) -> dict[str, MlpNet]:
        return {
            "actor": self.actor,
            "critic": self.critic,
            "actor_target": self.actor_target,
            "critic_target": self.critic_target,
        }


def _soft_update(target: MlpNet, source: MlpNet, tau: float) -> None:
    target.set_params([(1 - tau) * t + tau * s for t, s in zip(target.params(), source.params())])

