"""Dense tensor math used by the agents and the target-model executor.

Arrays are plain ``numpy.ndarray`` objects in float32.  The multilayer
perceptrons carry their own forward cache so that a backward pass can be run
right after a forward pass without recomputing activations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32
ACTIVATIONS = ("relu", "sigmoid", "linear", "tanh")
KL_EPS = 1e-10
TRUNC_NORMAL_RETRIES = 100


class NumericsError(ValueError):
    pass


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# multilayer perceptron
# ---------------------------------------------------------------------------


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0)
    if kind == "sigmoid":
        # split form avoids overflow in exp for large |z|
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    if kind == "sigmoid":
        return y * (1 - y)
    if kind == "tanh":
        return 1 - y * y
    return np.ones_like(z)


@dataclass
class Dense:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "linear"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise NumericsError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise NumericsError("dense layer weight/bias shapes do not match")


@dataclass
class MlpNet:
    layers: list[Dense]
    _cache: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise NumericsError("consecutive layer dimensions do not chain")

    @classmethod
    def build(
        cls,
        sizes: list[int],
        activations: list[str],
        rng: np.random.Generator,
        final_scale: float | None = None,
        dtype=DTYPE,
    ) -> MlpNet:
        """Fan-in uniform initialisation; ``final_scale`` overrides the last layer's range."""
        if len(activations) != len(sizes) - 1:
            raise NumericsError("need one activation per layer")
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
            bound = 1.0 / np.sqrt(n_in)
            if final_scale is not None and i == len(sizes) - 2:
                bound = final_scale
            w = rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype)
            b = rng.uniform(-bound, bound, size=n_out).astype(dtype)
            layers.append(Dense(w, b, activations[i]))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def set_params(self, params: list[np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            layer.weight = params[2 * i]
            layer.bias = params[2 * i + 1]

    def copy(self, dtype=None) -> MlpNet:
        layers = []
        for layer in self.layers:
            w, b = layer.weight.copy(), layer.bias.copy()
            if dtype is not None:
                w, b = w.astype(dtype), b.astype(dtype)
            layers.append(Dense(w, b, layer.activation))
        return MlpNet(layers)


def mlp_forward(net: MlpNet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[-1] != net.in_dim:
        raise NumericsError(f"input width {x.shape[-1]} does not match {net.in_dim}")
    dtype = net.layers[0].weight.dtype
    h = x.astype(dtype, copy=False)
    zs, hs = [], [h]
    for layer in net.layers:
        z = h @ layer.weight + layer.bias
        h = _activate(z, layer.activation)
        zs.append(z)
        hs.append(h)
    _check_finite(h, "mlp output")
    net._cache = (x, zs, hs, squeeze)
    return h[0] if squeeze else h


def mlp_backward(
    net: MlpNet, x: np.ndarray, output_grad: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients of a scalar loss given dL/d(output) for the cached forward pass.

    Returns ``(param_grads, input_grad)``; ``param_grads`` is ordered like
    :meth:`MlpNet.params`.
    """
    if net._cache is None:
        raise NumericsError("mlp_backward called without a forward pass")
    cached_x, zs, hs, squeeze = net._cache
    if cached_x is not x and not np.array_equal(cached_x, np.asarray(x).reshape(cached_x.shape)):
        raise NumericsError("forward cache belongs to a different input")
    g = np.asarray(output_grad, dtype=hs[-1].dtype)
    if squeeze:
        g = g[None, :]
    grads: list[np.ndarray] = []
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        g = g * _activation_grad(zs[i], hs[i + 1], layer.activation)
        grads.append(g.sum(axis=0))
        grads.append(hs[i].T @ g)
        g = g @ layer.weight.T
    grads.reverse()  # now [W0, b0, W1, b1, ...]
    return grads, (g[0] if squeeze else g)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float, **kw) -> AdamState:
        return cls(
            lr=lr,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kw,
        )


def adam_step(
    params: list[np.ndarray], grads: list[np.ndarray], state: AdamState
) -> list[np.ndarray]:
    if len(params) != len(grads) or len(params) != len(state.m):
        raise NumericsError("parameter, gradient and state lists differ in length")
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1**t
    c2 = 1 - state.beta2**t
    out = []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise NumericsError("gradient shape does not match parameter")
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p = p - (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
        out.append(p)
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, kh, kw)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    # rows ordered (n, ho, wo), columns ordered (kh, kw, c)
    n, c = x.shape[:2]
    xh = x.transpose(0, 2, 3, 1)
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xh[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def conv2d_forward(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    padding: int = 0,
    depthwise: bool = False,
    return_cols: bool = False,
):
    """Cross-correlation of an NCHW input with an OIHW kernel.

    Depthwise kernels have shape (C, 1, kh, kw).  With ``return_cols`` the
    im2col matrix is returned as well, for reuse by :func:`conv2d_backward`.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise NumericsError("conv2d expects NCHW input and OIHW weight")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if depthwise:
        if ci != 1 or o != c:
            raise NumericsError("depthwise weight must be (C, 1, kh, kw)")
    elif ci != c:
        raise NumericsError(f"input has {c} channels, weight expects {ci}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise NumericsError("convolution output would be empty")
    if depthwise:
        win = _windows(x, kh, kw, stride, padding)
        out = np.einsum("nchwij,cij->nchw", win, weight[:, 0], optimize=True)
        cols = None
    else:
        cols = _im2col(x, kh, kw, stride, padding, ho, wo)
        wmat = weight.transpose(0, 2, 3, 1).reshape(o, -1)
        out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out, dtype=x.dtype)
    if return_cols:
        return out, cols
    return out


def conv2d_backward(
    x_shape: tuple[int, ...],
    weight: np.ndarray,
    cols: np.ndarray,
    grad_out: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (input, weight, bias) of a dense conv given its im2col matrix."""
    n, c, h, w = x_shape
    o, _, kh, kw = weight.shape
    _, _, ho, wo = grad_out.shape
    g = grad_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    wmat = weight.transpose(0, 2, 3, 1).reshape(o, -1)
    grad_w = (g.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
    grad_b = g.sum(axis=0)
    dcols = (g @ wmat).reshape(n, ho, wo, kh, kw, c)
    hp, wp = h + 2 * padding, w + 2 * padding
    dx = np.zeros((n, hp, wp, c), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
    if padding:
        dx = dx[:, padding:-padding, padding:-padding, :]
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), np.ascontiguousarray(grad_w), grad_b


# ---------------------------------------------------------------------------
# probability utilities
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def kl_rows(p_logits: np.ndarray, q_logits: np.ndarray, eps: float = KL_EPS) -> np.ndarray:
    """Row-wise KL(softmax(p) || softmax(q)) over the last axis, in float64."""
    p_logits = np.asarray(p_logits, dtype=np.float64)
    q_logits = np.asarray(q_logits, dtype=np.float64)
    if p_logits.shape != q_logits.shape:
        raise NumericsError("KL inputs must have equal shapes")
    p = softmax(p_logits)
    q = softmax(q_logits)
    kl = (p * (np.log(p + eps) - np.log(q + eps))).sum(axis=-1)
    return np.maximum(kl, 0.0)


def softmax_kl(p_logits: np.ndarray, q_logits: np.ndarray, eps: float = KL_EPS) -> float:
    """KL divergence of the softmax distributions; batched inputs are averaged over rows."""
    return float(np.mean(kl_rows(p_logits, q_logits, eps)))


def sample_truncated_normal(
    rng: np.random.Generator,
    mean,
    sigma: float,
    low: float = 0.0,
    high: float = 1.0,
    max_retries: int = TRUNC_NORMAL_RETRIES,
):
    """Rejection-sample N(mean, sigma^2) restricted to [low, high].

    Works elementwise on array means.  Components still outside the interval
    after ``max_retries`` draws are clamped.
    """
    if not low < high:
        raise NumericsError("truncated normal needs low < high")
    mean_arr = np.asarray(mean, dtype=np.float64)
    if sigma <= 0:
        out = np.clip(mean_arr, low, high)
        return float(out) if out.ndim == 0 else out
    out = np.empty(mean_arr.shape)
    pending = np.ones(mean_arr.shape, dtype=bool)
    for _ in range(max_retries):
        draw = rng.normal(mean_arr, sigma)
        ok = pending & (draw >= low) & (draw <= high)
        out[ok] = draw[ok]
        pending &= ~ok
        if not pending.any():
            break
    if pending.any():
        out[pending] = np.clip(mean_arr, low, high)[pending]
    return float(out) if out.ndim == 0 else out
