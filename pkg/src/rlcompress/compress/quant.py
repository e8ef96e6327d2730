"""Uniform asymmetric fake quantization.

For bit width ``b`` and a calibrated range ``[x_min, x_max]``::

    n = 2**b - 1
    s = n / (x_max - x_min)
    z = floor(s * x_min) + 2**(b - 1)
    q = clip(floor(s * r - z), -n, n)
    r_hat = (q + z) / s

Channels with ``x_min == x_max`` carry no information and pass through.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_BITS = 8
# floor() snaps values this close (relative) below a level up onto it, so that
# re-quantizing a dequantized float32 tensor is a fixed point
_SNAP = 1e-6


@dataclass(frozen=True)
class QuantizerParams:
    bits: int
    x_min: np.ndarray
    x_max: np.ndarray
    axis: int | None = None

    def __post_init__(self):
        if not 1 <= self.bits <= MAX_BITS:
            raise ValueError(f"bit width must be in [1, {MAX_BITS}], got {self.bits}")
        if np.any(np.asarray(self.x_max) < np.asarray(self.x_min)):
            raise ValueError("x_max must not be below x_min")

    @property
    def n(self) -> int:
        return 2**self.bits - 1

    @property
    def degenerate(self) -> np.ndarray:
        return np.asarray(self.x_max) == np.asarray(self.x_min)

    @property
    def scale(self) -> np.ndarray:
        rng = np.asarray(self.x_max, np.float64) - np.asarray(self.x_min, np.float64)
        with np.errstate(divide="ignore"):
            return np.where(rng > 0, self.n / np.where(rng > 0, rng, 1.0), np.inf)

    @property
    def offset(self) -> np.ndarray:
        s = np.where(self.degenerate, 0.0, self.scale)
        return np.floor(s * np.asarray(self.x_min, np.float64)) + 2 ** (self.bits - 1)


def calibrate(tensor: np.ndarray, bits: int, axis: int | None = 0) -> QuantizerParams:
    """Min/max range per slice along ``axis`` (per output channel by default) or per tensor."""
    t = np.asarray(tensor)
    if axis is None:
        return QuantizerParams(bits, np.array(t.min()), np.array(t.max()), None)
    reduce = tuple(i for i in range(t.ndim) if i != axis)
    return QuantizerParams(bits, t.min(axis=reduce), t.max(axis=reduce), axis)


def _broadcast(v: np.ndarray, ndim: int, axis: int | None) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if axis is None or v.ndim == 0:
        return v
    shape = [1] * ndim
    shape[axis] = -1
    return v.reshape(shape)


def quantize_levels(tensor: np.ndarray, params: QuantizerParams) -> np.ndarray:
    """Integer levels q of ``tensor`` (float64 array; degenerate channels undefined)."""
    r = np.asarray(tensor, dtype=np.float64)
    s = _broadcast(np.where(params.degenerate, 1.0, params.scale), r.ndim, params.axis)
    z = _broadcast(params.offset, r.ndim, params.axis)
    v = s * r - z
    q = np.floor(v + _SNAP * np.maximum(1.0, np.abs(s * r)))
    return np.clip(q, -params.n, params.n)


def fake_quantize(tensor: np.ndarray, params: QuantizerParams) -> np.ndarray:
    r = np.asarray(tensor)
    q = quantize_levels(r, params)
    s = _broadcast(np.where(params.degenerate, 1.0, params.scale), r.ndim, params.axis)
    z = _broadcast(params.offset, r.ndim, params.axis)
    out = (q + z) / s
    keep = _broadcast(params.degenerate, r.ndim, params.axis).astype(bool)
    out = np.where(keep, r, out)
    return out.astype(r.dtype if r.dtype.kind == "f" else np.float32)


def quantize_weight(weight: np.ndarray, bits: int) -> np.ndarray:
    return fake_quantize(weight, calibrate(weight, bits, axis=0))


def quantize_activation(x: np.ndarray, bits: int) -> np.ndarray:
    """Per-tensor fake quantization with the range of the current batch."""
    return fake_quantize(x, calibrate(x, bits, axis=None))
