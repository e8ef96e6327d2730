from __future__ import annotations

import io
import json
import zipfile

import numpy as np
import pytest

from helpers import brute_force_totals, chain_graph, loop_count_macs, random_residual_graph, random_valid_policy, \
    single_linear_graph, symbolic_groups
from rlcompress.bundled import bundled_model_bytes
from rlcompress.compress.policy import INT8, DiscretePolicy, LayerCMP, reference_policy
from rlcompress.model import (
    Layer,
    ModelFormatError,
    ModelGraph,
    ShapeError,
    build_tinyresnet,
    check_mix_support,
    count_macs,
    count_params,
    detect_dependency_groups,
    forward,
    layer_costs,
    load_model,
    model_totals,
    parse_model,
    save_model,
    serialize_model,
)
from rlcompress.model.tinyresnet import add, conv, linear, relu
from rlcompress.numerics import make_rng


def test_bundled_model_has_declared_layer_count(tinyresnet):
    desc = json.loads(zipfile.ZipFile(io.BytesIO(bundled_model_bytes())).read("graph.json"))
    assert len(tinyresnet) == len(desc["layers"])
    assert [layer.id for layer in tinyresnet.layers] == [e["id"] for e in desc["layers"]]
    assert len(tinyresnet.compute_layers()) == 10


def test_tinyresnet_flags(tinyresnet):
    prunable = {layer.id for layer in tinyresnet.compute_layers() if layer.prunable}
    assert prunable == {"b1_conv1", "b2_conv1", "b3_conv1"}
    assert not tinyresnet["stem"].mix_supported
    assert tinyresnet["b1_conv1"].mix_supported and tinyresnet["fc"].mix_supported is False
    assert sorted(map(sorted, tinyresnet.groups)) == [
        ["b1_conv2", "stem"], ["b2_conv2", "b2_short"], ["b3_conv2", "b3_short"]
    ]


def test_dangling_edge_is_a_shape_error():
    with pytest.raises(ShapeError):
        ModelGraph([Layer("r", "activation", ["nowhere"])], (1, 2, 2))


def test_channel_mismatch_is_a_shape_error():
    rng = make_rng(0)
    with pytest.raises(ShapeError):
        ModelGraph([conv("a", "input", 3, 8, rng=rng), conv("b", "a", 4, 8, rng=rng)], (3, 8, 8))


def test_add_inputs_must_agree():
    rng = make_rng(0)
    layers = [conv("a", "input", 3, 8, rng=rng), conv("b", "input", 3, 4, rng=rng), add("s", "a", "b")]
    with pytest.raises(ShapeError):
        ModelGraph(layers, (3, 8, 8))


def test_duplicate_ids_and_unknown_kinds():
    rng = make_rng(0)
    with pytest.raises(ModelFormatError):
        ModelGraph([conv("a", "input", 3, 8, rng=rng), relu("a", "a")], (3, 8, 8))
    with pytest.raises(ModelFormatError):
        ModelGraph([Layer("x", "softmax", ["input"])], (3, 8, 8))


def test_single_linear_layer_has_no_groups():
    g = single_linear_graph()
    assert len(g.compute_layers()) == 1 and g.groups == []
    # the only layer is the classifier, whose width is fixed by the task
    assert not g["fc"].prunable


def test_plain_chain_prunability():
    g = chain_graph()
    assert g["c0"].prunable and g["c1"].prunable and not g["fc"].prunable
    assert g.groups == []


def test_residual_block_groups_both_producers():
    rng = make_rng(0)
    layers = [
        conv("stem", "input", 3, 8, rng=rng),
        conv("a", "stem", 8, 8, rng=rng),
        relu("ar", "a"),
        conv("b", "ar", 8, 8, rng=rng),
        add("sum", "b", "stem"),
        Layer("pool", "pool", ["sum"]),
        Layer("flat", "flatten", ["pool"]),
        linear("fc", "flat", 8, 2, rng=rng),
    ]
    g = ModelGraph(layers, (3, 8, 8))
    assert g.groups == [frozenset({"stem", "b"})]
    assert not g["stem"].prunable and not g["b"].prunable and g["a"].prunable


def test_groups_match_symbolic_oracle_on_random_residual_graphs():
    for seed in range(20):
        g = random_residual_graph(make_rng(seed), ops=int(make_rng(seed + 100).integers(6, 20)))
        assert set(g.groups) == symbolic_groups(g), seed


def test_grouping_is_idempotent():
    g = random_residual_graph(make_rng(4))
    first = list(g.groups)
    assert detect_dependency_groups(g) == first == detect_dependency_groups(g.copy())


def test_groups_are_disjoint():
    for seed in range(10):
        g = random_residual_graph(make_rng(seed))
        seen = set()
        for grp in g.groups:
            assert not seen & grp
            seen |= grp


# -- MACs and BOPs -------------------------------------------------------------


def test_linear_macs():
    assert count_macs(single_linear_graph(n_in=4, n_out=3)["fc"]) == 12


def test_conv_macs_formula_and_loop_count():
    g = ModelGraph([conv("c", "input", 3, 8, 3, rng=make_rng(0))], (3, 16, 16))
    layer = g["c"]
    assert count_macs(layer) == 8 * 3 * 9 * 256 == 55296
    assert loop_count_macs(layer, 3, 8) == 55296


def test_pruned_conv_has_half_macs():
    layer = ModelGraph([conv("c", "input", 8, 8, 3, rng=make_rng(0))], (8, 6, 6))["c"]
    assert 2 * count_macs(layer, 8, 4) == count_macs(layer)


def test_active_channels_cannot_exceed_layer():
    layer = single_linear_graph()["fc"]
    with pytest.raises(ValueError):
        count_macs(layer, 5, 3)


def test_count_params_includes_bias():
    layer = single_linear_graph(n_in=4, n_out=3)["fc"]
    assert count_params(layer) == 15


@pytest.mark.parametrize(
    "cin,cout,hw,depthwise,expected",
    [(32, 8, 4, False, True), (3, 32, 8, False, False), (32, 32, 1, False, False),
     (64, 12, 4, False, False), (32, 32, 4, True, False)],
)
def test_mix_support_rules(cin, cout, hw, depthwise, expected):
    layer = Layer("c", "conv2d", ["input"], in_channels=cin, out_channels=cout, depthwise=depthwise,
                  out_spatial=(hw, hw))
    assert check_mix_support(layer) is expected


def test_mix_support_linear_needs_multiple_of_8():
    assert check_mix_support(single_linear_graph(n_out=16)["fc"])
    assert not check_mix_support(single_linear_graph(n_out=10)["fc"])


def test_reference_totals_are_layer_sums(tinyresnet):
    totals = model_totals(tinyresnet, reference_policy(tinyresnet))
    assert totals.macs == sum(count_macs(layer) for layer in tinyresnet.compute_layers())
    assert totals.bops == 32 * 32 * totals.macs
    assert model_totals(tinyresnet) == totals


def test_all_int8_bops_are_one_sixteenth(tinyresnet):
    int8 = DiscretePolicy({layer.id: LayerCMP(layer.out_channels, INT8, 8, 8) for layer in tinyresnet.compute_layers()})
    assert model_totals(tinyresnet, int8).bops * 16 == model_totals(tinyresnet).bops


def test_mixed_policies_match_brute_force(tinyresnet):
    rng = make_rng(2)
    for _ in range(25):
        pol = random_valid_policy(tinyresnet, rng)
        t = model_totals(tinyresnet, pol)
        assert (t.macs, t.bops) == brute_force_totals(tinyresnet, pol)


def test_random_graph_totals_match_brute_force():
    for seed in range(10):
        g = random_residual_graph(make_rng(seed))
        pol = random_valid_policy(g, make_rng(seed + 50))
        t = model_totals(g, pol)
        assert (t.macs, t.bops) == brute_force_totals(g, pol)


def test_macs_monotone_in_kept_channels(tinyresnet):
    prev = None
    for kept in range(64, 0, -7):
        macs = model_totals(tinyresnet, DiscretePolicy({"b2_conv1": LayerCMP(kept)})).macs
        assert prev is None or macs < prev
        prev = macs


def test_bops_product_form(tinyresnet):
    pol = DiscretePolicy({"b1_conv1": LayerCMP(32, "mix", 3, 5)})
    cost = layer_costs(tinyresnet, pol)["b1_conv1"]
    assert cost.bops == cost.macs * 15


# -- file format ----------------------------------------------------------------


def test_round_trip_is_byte_stable(tmp_path):
    g = build_tinyresnet(make_rng(3))
    path = tmp_path / "m.rlcm"
    save_model(g, path)
    again = load_model(path)
    assert serialize_model(again) == path.read_bytes()
    assert again.content_hash() == g.content_hash()


def test_bundled_model_round_trips(tinyresnet):
    assert serialize_model(parse_model(serialize_model(tinyresnet))) == serialize_model(tinyresnet)


def _rewrite(data: bytes, edit) -> bytes:
    src = zipfile.ZipFile(io.BytesIO(data))
    out = io.BytesIO()
    with zipfile.ZipFile(out, "w") as zf:
        for name in src.namelist():
            payload = src.read(name)
            new = edit(name, payload)
            if new is not None:
                zf.writestr(name, new)
    return out.getvalue()


def test_batchnorm_is_folded_at_load():
    g = ModelGraph([conv("c", "input", 2, 3, 1, padding=0, rng=make_rng(0))], (2, 4, 4))
    gamma, beta = np.array([1.0, 2.0, 0.5], np.float32), np.array([0.1, -0.2, 0.0], np.float32)
    mean, var = np.array([0.3, 0.0, -1.0], np.float32), np.array([1.0, 4.0, 0.25], np.float32)
    blobs = {"gamma": gamma, "beta": beta, "mean": mean, "var": var}

    def edit(name, payload):
        if name == "graph.json":
            desc = json.loads(payload)
            desc["layers"][0]["batchnorm"] = {"eps": 0.0}
            return json.dumps(desc)
        return payload

    buf = io.BytesIO(_rewrite(serialize_model(g), edit))
    with zipfile.ZipFile(buf, "a") as zf:
        for k, v in blobs.items():
            zf.writestr(f"blobs/c.bn_{k}", v.astype("<f4").tobytes())
    folded = parse_model(buf.getvalue())
    x = make_rng(1).standard_normal((2, 2, 4, 4)).astype(np.float32)
    raw = forward(g, x)
    expected = (raw - mean.reshape(1, -1, 1, 1)) / np.sqrt(var).reshape(1, -1, 1, 1) * gamma.reshape(1, -1, 1, 1) \
        + beta.reshape(1, -1, 1, 1)
    np.testing.assert_allclose(forward(folded, x), expected, rtol=1e-5, atol=1e-5)


def test_missing_blob_and_bad_container():
    data = serialize_model(chain_graph())
    broken = _rewrite(data, lambda name, p: None if name == "blobs/c1.weight" else p)
    with pytest.raises(ModelFormatError):
        parse_model(broken)
    with pytest.raises(ModelFormatError):
        parse_model(b"not a zip")


def test_wrong_blob_size_is_a_shape_error():
    data = serialize_model(chain_graph())
    with pytest.raises(ShapeError):
        parse_model(_rewrite(data, lambda name, p: p[:-4] if name == "blobs/c0.bias" else p))


def test_unsupported_version():
    def edit(name, payload):
        if name == "graph.json":
            desc = json.loads(payload)
            desc["version"] = 99
            return json.dumps(desc)
        return payload

    with pytest.raises(ModelFormatError):
        parse_model(_rewrite(serialize_model(chain_graph()), edit))


def test_copy_is_deep():
    g = chain_graph()
    c = g.copy()
    c["c0"].weight[...] = 0
    assert g["c0"].weight.any()
