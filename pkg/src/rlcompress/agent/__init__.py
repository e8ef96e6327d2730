"""DDPG agents for compression policy search."""
from .ddpg import (
    ACTION_DIMS,
    AgentConfig,
    AgentError,
    DDPGAgent,
    ReplayBuffer,
    RewardNormalizer,
    RunningNorm,
    Transition,
    sigma_at,
)

__all__ = [
    "ACTION_DIMS",
    "AgentConfig",
    "AgentError",
    "DDPGAgent",
    "ReplayBuffer",
    "RewardNormalizer",
    "RunningNorm",
    "Transition",
    "sigma_at",
]
