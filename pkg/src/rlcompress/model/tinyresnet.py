"""Builder for the bundled TinyResNet and helpers for small test graphs."""
from __future__ import annotations

import numpy as np

from .graph import Layer, ModelGraph


def conv(lid, src, cin, cout, k=3, stride=1, padding=None, rng=None, gain=1.0, depthwise=False):
    pad = k // 2 if padding is None else padding
    fan_in = (1 if depthwise else cin) * k * k
    shape = (cout, 1 if depthwise else cin, k, k)
    if rng is None:
        w = np.zeros(shape, np.float32)
    else:
        w = (rng.standard_normal(shape) * gain * np.sqrt(2.0 / fan_in)).astype(np.float32)
    return Layer(
        lid, "conv2d", [src], in_channels=cin, out_channels=cout, kernel=(k, k),
        stride=stride, padding=pad, depthwise=depthwise,
        weight=w, bias=np.zeros(cout, np.float32),
    )


def linear(lid, src, cin, cout, rng=None):
    if rng is None:
        w = np.zeros((cout, cin), np.float32)
    else:
        w = rng.uniform(-1, 1, (cout, cin)).astype(np.float32) / np.sqrt(cin)
    return Layer(lid, "linear", [src], in_channels=cin, out_channels=cout,
                 weight=w, bias=np.zeros(cout, np.float32))


def relu(lid, src):
    return Layer(lid, "activation", [src], activation="relu")


def add(lid, *srcs):
    return Layer(lid, "add", list(srcs))


def residual_block(prefix, src, cin, cout, stride, rng, branch_gain=0.5) -> tuple[list[Layer], str]:
    layers = [
        conv(f"{prefix}_conv1", src, cin, cout, 3, stride, rng=rng),
        relu(f"{prefix}_relu1", f"{prefix}_conv1"),
        conv(f"{prefix}_conv2", f"{prefix}_relu1", cout, cout, 3, 1, rng=rng, gain=branch_gain),
    ]
    shortcut = src
    if stride != 1 or cin != cout:
        layers.append(conv(f"{prefix}_short", src, cin, cout, 1, stride, padding=0, rng=rng))
        shortcut = f"{prefix}_short"
    layers.append(add(f"{prefix}_add", f"{prefix}_conv2", shortcut))
    layers.append(relu(f"{prefix}_out", f"{prefix}_add"))
    return layers, f"{prefix}_out"


def build_tinyresnet(
    rng: np.random.Generator | None = None,
    num_classes: int = 10,
    input_shape: tuple[int, int, int] = (3, 16, 16),
    widths: tuple[int, int, int] = (32, 64, 64),
) -> ModelGraph:
    """Stem conv 3->32, three residual blocks (stride 1, 2, 2), global pool, linear head."""
    layers = [conv("stem", "input", input_shape[0], 32, 3, 1, rng=rng), relu("stem_relu", "stem")]
    src, cin = "stem_relu", 32
    for i, (cout, stride) in enumerate(zip(widths, (1, 2, 2)), start=1):
        block, src = residual_block(f"b{i}", src, cin, cout, stride, rng)
        layers += block
        cin = cout
    layers += [
        Layer("pool", "pool", [src]),
        Layer("flatten", "flatten", ["pool"]),
        linear("fc", "flatten", cin, num_classes, rng=rng),
    ]
    return ModelGraph(layers, input_shape=input_shape, name="tinyresnet")
