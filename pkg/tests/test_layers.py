import math

import pytest

from mhnas.layers import (
    CONV2D, DEPTHWISE, FC, POOL, GraphBuilder, Layer, LayerGraph, StructuralError,
    apply_width_multiplier, build_baseline, compute_madds, compute_params, concat,
    parse_baseline_ref, round_channels,
)


def _single_conv(k=1, cin=1, cout=1, res=1, stride=1):
    b = GraphBuilder(res)
    b.conv(cin, cout, k, stride)
    return b.build()


def test_identity_conv_counts():
    g = _single_conv()
    assert compute_madds(g) == 1
    assert compute_params(g) == 1


def test_layer_formulas_by_hand():
    # 3x3 conv, 8 -> 16 channels, 10x10 input, stride 2 -> 5x5 output
    g = _single_conv(3, 8, 16, 10, 2)
    assert compute_madds(g) == 5 * 5 * 9 * 8 * 16
    assert compute_params(g) == 9 * 8 * 16
    b = GraphBuilder(7)
    b.dwconv(12, 5, 1)
    b.pool(12)
    b.fc(12, 10)
    g = b.build()
    assert compute_madds(g) == 7 * 7 * 25 * 12 + 0 + 12 * 10
    assert compute_params(g) == 25 * 12 + 12 * 10 + 10


def test_same_padding_ceil():
    assert Layer(CONV2D, 1, 1, 7, 3, 2).out_res == 4
    assert Layer(CONV2D, 1, 1, 1, 3, 2).out_res == 1
    assert Layer(DEPTHWISE, 4, 4, 113, 3, 2).out_res == 57


@pytest.mark.parametrize("name,wm,madds,params", [
    ("mobilenet_v1", 1.25, 883e6, 6.25e6),
    ("mobilenet_v2", 1.25, 487e6, 5.01e6),
])
def test_baselines_near_published(name, wm, madds, params):
    g = build_baseline(name, wm)
    assert abs(compute_madds(g) / madds - 1) <= 0.03
    assert abs(compute_params(g) / params - 1) <= 0.03


def test_baselines_exact_counts():
    # regression values for the width-8 rounding convention
    assert compute_madds(build_baseline("mobilenet_v1")) == 568_741_376
    assert compute_params(build_baseline("mobilenet_v1")) == 4_211_113
    assert compute_madds(build_baseline("mobilenet_v2")) == 300_775_552
    assert compute_params(build_baseline("mobilenet_v2")) == 3_472_041


def test_v1_structure():
    g = build_baseline("mobilenet_v1")
    assert g.layers[0].kind == CONV2D and g.layers[0].kernel == 3 and g.layers[0].stride == 2
    body = g.layers[1:-2]
    assert len(body) == 26
    assert [l.kind for l in body[::2]] == [DEPTHWISE] * 13
    assert [l.kind for l in g.layers[-2:]] == [POOL, FC]
    assert g.out_res == 1 and g.layers[-3].out_res == 7


def test_baseline_errors():
    with pytest.raises(ValueError):
        build_baseline("mobilenet_v2", 0)
    with pytest.raises(KeyError):
        build_baseline("resnet50")


def test_parse_baseline_ref():
    assert parse_baseline_ref("mobilenet_v1@1.25") == ("mobilenet_v1", 1.25)
    assert parse_baseline_ref("mobilenet_v2") == ("mobilenet_v2", 1.0)


def test_round_channels():
    assert round_channels(40) == 40
    assert round_channels(8 * 0.5) == 8
    assert round_channels(16 * 0.5) == 8
    assert round_channels(12) == 16  # tie goes up
    assert round_channels(11.9) == 8
    assert round_channels(120, 32, 32) == 128


def test_width_multiplier_examples():
    g = build_baseline("mobilenet_v1")
    assert apply_width_multiplier(g, 1.0) is g
    g125 = apply_width_multiplier(g, 1.25)
    assert g125.layers[0].out_ch == 40
    assert g125.layers[0].in_ch == 3
    assert g125.layers[-1].out_ch == 1001
    assert g125 == build_baseline("mobilenet_v1", 1.25)
    b = GraphBuilder(8)
    b.conv(3, 16, 3)
    b.conv(16, 32)
    small = apply_width_multiplier(b.build(), 0.5)
    assert [l.out_ch for l in small.layers] == [8, 16]


def test_width_multiplier_grows_madds():
    g = build_baseline("mobilenet_v1")
    for wm in (1.0, 1.25, 1.5, 2.0):
        assert compute_madds(apply_width_multiplier(g, wm)) >= compute_madds(g)


def test_additive_over_concat():
    a = build_baseline("mobilenet_v1")
    head, tail = LayerGraph(a.layers[:10]), LayerGraph(a.layers[10:], a.layers[10].in_res)
    joined = concat(head, tail)
    assert joined == a
    assert compute_madds(joined) == compute_madds(head) + compute_madds(tail)
    assert compute_params(joined) == compute_params(head) + compute_params(tail)


def test_doubling_resolution_quadruples_conv_madds():
    for name in ("mobilenet_v1", "mobilenet_v2"):
        g1 = build_baseline(name, resolution=224)
        g2 = build_baseline(name, resolution=448)
        for a, b in zip(g1.layers, g2.layers):
            assert a.params() == b.params()
            if a.kind in (CONV2D, DEPTHWISE):
                assert b.madds() == 4 * a.madds()
            else:
                assert b.madds() == a.madds()


def test_structural_errors_name_layer():
    b = GraphBuilder(8)
    b.conv(3, 16)
    b.conv(8, 16)  # channel mismatch
    with pytest.raises(StructuralError) as exc:
        b.build()
    assert exc.value.index == 1
    with pytest.raises(StructuralError):
        LayerGraph((Layer(DEPTHWISE, 4, 8, 8, 3),))
    with pytest.raises(StructuralError):
        LayerGraph((Layer(CONV2D, 4, 4, 8, 3, 3),))
    b = GraphBuilder(8)
    b.conv(3, 8, 3, 2)
    b.residual(8, 1)  # bypassed span starts at 3 channels
    with pytest.raises(StructuralError):
        b.build()


def test_residual_ok():
    b = GraphBuilder(8)
    b.conv(3, 8)
    b.conv(8, 16)
    b.conv(16, 8)
    b.residual(8, 2)
    g = b.build()
    assert compute_madds(g) == 8 * 8 * (3 * 8 + 8 * 16 + 16 * 8)


def test_json_round_trip(tmp_path):
    g = build_baseline("mobilenet_v2", 0.75)
    path = tmp_path / "g.json"
    g.save(path)
    assert LayerGraph.load(path) == g
    doc = g.to_dict()
    assert doc["input_resolution"] == 224 and doc["num_classes"] == 1001
    first = doc["layers"][0]
    assert first == {"kind": "conv2d", "kernel": 3, "stride": 2, "in_ch": 3, "out_ch": 24}


def test_documented_json_example_parses():
    g = LayerGraph.from_dict({"input_resolution": 224, "num_classes": 1001, "layers": [
        {"kind": "conv2d", "kernel": 3, "stride": 2, "in_ch": 3, "out_ch": 32},
        {"kind": "global_avg_pool", "in_ch": 32, "out_ch": 32},
        {"kind": "fully_connected", "in_ch": 32, "out_ch": 1001},
    ]})
    assert compute_madds(g) == 112 * 112 * 9 * 3 * 32 + 32 * 1001
    assert math.isclose(compute_params(g), 9 * 3 * 32 + 32 * 1001 + 1001)
