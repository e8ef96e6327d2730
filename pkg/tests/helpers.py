"""Shared builders and independent oracles for the test suite."""
from __future__ import annotations

import itertools

import numpy as np

from rlcompress.agent.ddpg import actor_objective_grads, critic_loss_grads
from rlcompress.compress.policy import FP32, INT8, MIX, DiscretePolicy, LayerCMP
from rlcompress.model.graph import Layer, ModelGraph
from rlcompress.model.tinyresnet import add, conv, linear, relu
from rlcompress.numerics import MlpNet, make_rng

# ---------------------------------------------------------------------------
# small graphs


def chain_graph(rng=None, cin=3, hw=8, widths=(8, 16), classes=4) -> ModelGraph:
    """conv -> relu -> conv -> relu -> pool -> flatten -> linear."""
    rng = rng if rng is not None else make_rng(0)
    layers, src, c = [], "input", cin
    for i, w in enumerate(widths):
        layers.append(conv(f"c{i}", src, c, w, 3, rng=rng))
        layers.append(relu(f"r{i}", f"c{i}"))
        src, c = f"r{i}", w
    layers += [Layer("pool", "pool", [src]), Layer("flat", "flatten", ["pool"]), linear("fc", "flat", c, classes, rng=rng)]
    return ModelGraph(layers, (cin, hw, hw), name="chain")


def single_linear_graph(rng=None, n_in=4, n_out=3) -> ModelGraph:
    rng = rng if rng is not None else make_rng(0)
    return ModelGraph([linear("fc", "input", n_in, n_out, rng=rng)], (n_in, 1, 1), name="single")


def random_residual_graph(rng: np.random.Generator, ops: int = 12) -> ModelGraph:
    """Random conv graph with nested adds, depthwise convs and channel changes."""
    layers = [conv("stem", "input", 3, 8, 3, rng=rng)]
    shape = {"input": (3, 8), "stem": (8, 8)}
    order = ["stem"]
    for i in range(ops):
        kind = rng.choice(["conv", "relu", "dw", "add", "add", "widen", "down"])
        src = order[int(rng.integers(max(0, len(order) - 4), len(order)))]
        c, hw = shape[src]
        lid = f"n{i}"
        if kind == "conv":
            layers.append(conv(lid, src, c, c, 3, rng=rng))
        elif kind == "relu":
            layers.append(relu(lid, src))
        elif kind == "dw":
            layers.append(conv(lid, src, c, c, 3, rng=rng, depthwise=True))
        elif kind == "widen":
            c = c * 2
            layers.append(conv(lid, src, c // 2, c, 1, padding=0, rng=rng))
        elif kind == "down" and hw > 2:
            hw = hw // 2
            layers.append(conv(lid, src, c, c, 3, stride=2, rng=rng))
        else:
            same = [n for n in order + ["input"] if shape[n] == (c, hw) and n != src]
            if not same:
                layers.append(relu(lid, src))
            else:
                k = int(rng.integers(1, min(2, len(same)) + 1))
                picks = [same[j] for j in rng.choice(len(same), size=k, replace=False)]
                layers.append(add(lid, src, *picks))
        shape[lid] = (c, hw)
        order.append(lid)
    last = order[-1]
    c = shape[last][0]
    layers += [Layer("pool", "pool", [last]), Layer("flat", "flatten", ["pool"]), linear("fc", "flat", c, 5, rng=rng)]
    return ModelGraph(layers, (3, 8, 8), name="random")


# ---------------------------------------------------------------------------
# oracles


def naive_conv(x, w, b=None, stride=1, padding=0, depthwise=False):
    """Six nested loops over (n, o, y, x, c, kh, kw) in float64."""
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for yy in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    chans = [oc] if depthwise else range(c)
                    for ic_i, ic in enumerate(chans):
                        wc = 0 if depthwise else ic_i
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[bi, ic, yy * stride + i, xx * stride + j] * w[oc, wc, i, j]
                    out[bi, oc, yy, xx] = acc + (0.0 if b is None else b[oc])
    return out


def loop_count_macs(layer: Layer, active_in: int, active_out: int) -> int:
    """Count multiply-accumulates by literally iterating over the loop nest."""
    if layer.kind == "linear":
        return sum(1 for _ in itertools.product(range(active_out), range(active_in)))
    kh, kw = layer.kernel
    ho, wo = layer.out_spatial
    per_out = 1 if layer.depthwise else active_in
    count = 0
    for _ in range(active_out):
        for _ in range(ho * wo):
            count += per_out * kh * kw
    return count


def symbolic_groups(graph: ModelGraph) -> set[frozenset[str]]:
    """Dependency groups by forward propagation of channel symbols.

    Every dense compute layer emits a fresh symbol; shape-preserving ops and
    depthwise convs pass their input's symbol through; an add unifies the
    symbols of its inputs.  A group is the set of compute layers whose symbol
    ends up in a class touched by an add.
    """
    parent: dict[str, str] = {}

    def find(a):
        parent.setdefault(a, a)
        while parent[a] != a:
            a = parent[a]
        return a

    sym = {"input": "input"}
    touched = set()
    for layer in graph.layers:
        if layer.is_compute and not layer.depthwise:
            sym[layer.id] = layer.id
        elif layer.kind == "add":
            roots = [find(sym[s]) for s in layer.inputs]
            for r in roots[1:]:
                parent[find(r)] = find(roots[0])
            touched.update(sym[s] for s in layer.inputs)
            sym[layer.id] = sym[layer.inputs[0]]
        else:
            sym[layer.id] = sym[layer.inputs[0]]
    coupled_roots = {find(t) for t in touched}
    classes: dict[str, set[str]] = {}
    for layer in graph.compute_layers():
        root = find(sym[layer.id])
        if root in coupled_roots:
            classes.setdefault(root, set()).add(layer.id)
    return {frozenset(v) for v in classes.values()}


def brute_force_totals(graph: ModelGraph, policy: DiscretePolicy) -> tuple[int, int]:
    """MACs and BOPs re-derived from kept counts by walking producers by hand."""
    kept_out: dict[str, int] = {"input": graph.input_shape[0]}
    macs = bops = 0
    for layer in graph.layers:
        src = layer.inputs[0]
        if layer.kind == "flatten":
            kept_out[layer.id] = kept_out[src] * layer.in_spatial[0] * layer.in_spatial[1]
            continue
        if not layer.is_compute:
            kept_out[layer.id] = kept_out[src]
            continue
        cin = kept_out[src]
        cmp_ = policy.layers.get(layer.id, LayerCMP(layer.out_channels))
        cout = cin if layer.depthwise else cmp_.kept
        kept_out[layer.id] = cout
        m = loop_count_macs(layer, cin, cout)
        macs += m
        bops += m * cmp_.b_a * cmp_.b_w
    return macs, bops


def random_valid_policy(graph: ModelGraph, rng: np.random.Generator, multiple: int | None = None,
                        max_bits: int = 6) -> DiscretePolicy:
    """A random policy that respects prunability and the MIX constraints."""
    from rlcompress.model.costs import active_channels
    from rlcompress.model.graph import check_mix_support

    kept = {}
    for layer in graph.compute_layers():
        if layer.prunable and rng.random() < 0.6:
            if multiple:
                choices = list(range(multiple, layer.out_channels + 1, multiple)) or [layer.out_channels]
                kept[layer.id] = int(rng.choice(choices))
            else:
                kept[layer.id] = int(rng.integers(1, layer.out_channels + 1))
    active = active_channels(graph, kept)
    layers = {}
    for layer in graph.compute_layers():
        k = kept.get(layer.id, layer.out_channels)
        mode = rng.choice([FP32, INT8, MIX])
        if mode == MIX and check_mix_support(layer, *active[layer.id]):
            layers[layer.id] = LayerCMP(k, MIX, int(rng.integers(1, max_bits + 1)), int(rng.integers(1, max_bits + 1)))
        elif mode == FP32:
            layers[layer.id] = LayerCMP(k)
        else:
            layers[layer.id] = LayerCMP(k, INT8, 8, 8)
    return DiscretePolicy(layers, multiple, max_bits)


# ---------------------------------------------------------------------------
# finite differences


def central_difference(f, params: list[np.ndarray], eps: float = 1e-6) -> list[np.ndarray]:
    """Numerical gradient of the scalar ``f()`` w.r.t. each array in ``params`` (modified in place)."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = f()
            flat[i] = old - eps
            down = f()
            flat[i] = old
            gflat[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(a: list[np.ndarray], b: list[np.ndarray]) -> float:
    va = np.concatenate([x.reshape(-1) for x in a])
    vb = np.concatenate([x.reshape(-1) for x in b])
    return float(np.linalg.norm(va - vb) / max(np.linalg.norm(va) + np.linalg.norm(vb), 1e-12))


# ---------------------------------------------------------------------------
# random numeric instances


def conv_case(rng):
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 5))
    h, w = int(rng.integers(3, 8)), int(rng.integers(3, 8))
    k = int(rng.choice([1, 2, 3]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    depthwise = bool(rng.random() < 0.3)
    o = c if depthwise else int(rng.integers(1, 6))
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    wt = rng.standard_normal((o, 1 if depthwise else c, k, k)).astype(np.float32)
    b = rng.standard_normal(o).astype(np.float32)
    return x, wt, b, stride, pad, depthwise


def random_actor_critic(rng: np.random.Generator):
    """Small float64 actor and critic with random layer sizes."""
    s, a = int(rng.integers(1, 6)), int(rng.integers(1, 4))
    h1, h2 = int(rng.integers(2, 8)), int(rng.integers(2, 8))
    actor = MlpNet.build([s, h1, h2, a], ["relu", "relu", "sigmoid"], rng, dtype=np.float64)
    critic = MlpNet.build([s + a, h1, h2, 1], ["relu", "relu", "linear"], rng, dtype=np.float64)
    return s, a, actor, critic


def worst_gradient_error(net: str, instances: int, seed: int = 0) -> float:
    """Largest relative error between analytic and central-difference agent gradients."""
    worst = 0.0
    for i in range(instances):
        rng = make_rng(seed + i)
        s_dim, a_dim, actor, critic = random_actor_critic(rng)
        n = int(rng.integers(1, 6))
        s = rng.standard_normal((n, s_dim))
        if net == "critic":
            a, y = rng.uniform(size=(n, a_dim)), rng.standard_normal(n)
            _, grads = critic_loss_grads(critic, s, a, y)
            numeric = central_difference(lambda: critic_loss_grads(critic, s, a, y)[0], critic.params())
        else:
            _, grads = actor_objective_grads(actor, critic, s)
            numeric = central_difference(lambda: -actor_objective_grads(actor, critic, s)[0], actor.params())
        worst = max(worst, relative_error(grads, numeric))
    return worst
