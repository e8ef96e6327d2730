"""Reinforcement-learning search for hardware-aware pruning and quantization policies."""

__version__ = "0.1.0"
