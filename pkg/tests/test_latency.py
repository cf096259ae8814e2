import json

import numpy as np
import pytest

from mhnas import hardware
from mhnas.kernels import BIAS, FEATURE_NAMES, LAYER_COUNT, N_FEATURES, FeatureSchemaError
from mhnas.latency import (
    MIN_LATENCY_MS, CostModel, HardwareMixError, LatencySample, SchemaMismatchError,
    UnderdeterminedError, calibration_report, extract_features, feature_matrix, fit, fold_weights,
    graphs_from_dir, pearson, predict, read_samples, report_from_pairs, write_samples,
)
from mhnas.layers import CONV2D, GraphBuilder, Layer, LayerGraph, build_baseline, compute_madds, concat
from mhnas.space import compile_genome, sample_uniform

F = {n: i for i, n in enumerate(FEATURE_NAMES)}


def _graphs(n, seed=0):
    rng = np.random.default_rng(seed)
    return {f"g{i:04d}": hardware.random_graph(rng) for i in range(n)}


def _samples(hw, graphs, w):
    X = feature_matrix(list(graphs.values()))
    return [LatencySample(k, hw, float(y)) for k, y in zip(graphs, X @ w)]


def test_schema_shape():
    assert N_FEATURES == 16
    assert FEATURE_NAMES[-2:] == ("layer_count", "bias")
    assert FEATURE_NAMES[0] == "conv1x1_madds" and FEATURE_NAMES[13] == "pool_outputs"


def test_stem_only_graph():
    b = GraphBuilder(224)
    b.conv(3, 32, 3, 2)
    f = extract_features(b.build())
    assert f[BIAS] == 1 and f[LAYER_COUNT] == 1
    assert f[F["conv3x3_madds"]] == 112 * 112 * 9 * 3 * 32
    assert f[F["conv3x3_outputs"]] == 112 * 112 * 32
    others = np.delete(f, [F["conv3x3_madds"], F["conv3x3_outputs"], LAYER_COUNT, BIAS])
    assert not others.any()


def test_features_additive_over_concat():
    g = build_baseline("mobilenet_v2")
    # split right after a residual add so no skip crosses the cut
    k = [i for i, l in enumerate(g.layers) if l.kind == "residual_add"][2] + 1
    a, b = LayerGraph(g.layers[:k]), LayerGraph(g.layers[k:], g.layers[k].in_res)
    fa, fb, fg = extract_features(a), extract_features(b), extract_features(concat(a, b))
    assert np.array_equal(fg[:BIAS], fa[:BIAS] + fb[:BIAS])
    assert fg[BIAS] == 1


def test_v1_buckets_cross_check():
    g = build_baseline("mobilenet_v1")
    f = extract_features(g)
    stem = g.layers[0].madds()
    classifier = g.layers[-1].madds()
    assert f[F["conv1x1_madds"]] + f[F["dw3x3_madds"]] == compute_madds(g) - stem - classifier
    assert f[F["conv3x3_madds"]] == stem and f[F["fc_madds"]] == classifier
    assert f[F["conv5x5_madds"]] == f[F["dw5x5_madds"]] == 0


def test_unsupported_kernel_raises():
    g = LayerGraph((Layer(CONV2D, 3, 8, 16, 7, 2),), 16)
    with pytest.raises(FeatureSchemaError):
        extract_features(g)


def test_noiseless_recovery_all_hardware():
    graphs = _graphs(400)
    unseen = list(_graphs(50, seed=99).values())
    for hw in hardware.SYNTHETIC_HARDWARE:
        w = hardware.synthetic_weights(hw)
        m = fit(_samples(hw, graphs, w), graphs)
        nz = w != 0
        assert np.max(np.abs(m.weights - w)[nz] / np.abs(w[nz])) <= 1e-6
        assert np.all(m.weights[~nz] == 0)
        assert m.calibration.pearson_r >= 0.999999
        truth = feature_matrix(unseen) @ w
        pred = np.array([predict(m, g) for g in unseen])
        np.testing.assert_allclose(pred, truth, rtol=1e-9)


def test_fold_weights_is_prediction_identical():
    rng = np.random.default_rng(1)
    w = rng.random(N_FEATURES)
    X = feature_matrix(list(_graphs(30).values()))
    np.testing.assert_allclose(X @ fold_weights(w), X @ w, rtol=1e-12)


def test_noisy_fit_calibrates(default_space):
    rng = np.random.default_rng(2)
    graphs = {f"a{i}": compile_genome(sample_uniform(default_space.decisions, rng), default_space)
              for i in range(600)}
    samples = hardware.make_samples("gpu", graphs, 0.05, seed=3)
    m = fit(samples, graphs, holdout=0.2, seed=1)
    assert m.calibration.n_test == 120 and m.calibration.n_train == 480
    assert 0.9 <= m.calibration.pearson_r <= 1.0
    rep = calibration_report(m, samples, graphs)
    assert 0.9 <= rep.pearson_r <= 1.0 and len(rep.rows()) == 600


def test_fit_is_deterministic_and_affine_invariant():
    graphs = _graphs(200)
    samples = hardware.make_samples("dsp", graphs, 0.05, seed=0)
    a = fit(samples, graphs, seed=4)
    b = fit(samples, graphs, seed=4)
    assert np.array_equal(a.weights, b.weights) and a.calibration == b.calibration
    scaled = [LatencySample(s.arch_id, s.hardware_id, 3.0 * s.latency_ms + 2.0) for s in samples]
    c = fit(scaled, graphs, seed=4)
    assert c.calibration.pearson_r == pytest.approx(a.calibration.pearson_r, abs=1e-9)


def test_fit_errors():
    graphs = _graphs(20)
    w = hardware.synthetic_weights("gpu")
    with pytest.raises(UnderdeterminedError):
        fit(_samples("gpu", dict(list(graphs.items())[:3]), w), graphs)
    mixed = _samples("gpu", graphs, w) + [LatencySample("g0000", "dsp", 1.0)]
    with pytest.raises(HardwareMixError):
        fit(mixed, graphs)
    with pytest.raises(ValueError):
        LatencySample("x", "gpu", 0.0)


def test_bias_only_model_and_clamp():
    w = np.zeros(N_FEATURES)
    w[BIAS] = 4.5
    m = CostModel("x", w)
    for g in (build_baseline("mobilenet_v1"), build_baseline("mobilenet_v2", 0.5)):
        assert predict(m, g) == 4.5
    w[BIAS] = -1.0
    assert predict(CostModel("x", w), build_baseline("mobilenet_v1")) == MIN_LATENCY_MS


def test_predict_linearity():
    m = hardware.synthetic_cost_model("cpu_float")
    g = build_baseline("mobilenet_v1")
    parts = [LayerGraph(g.layers[:9]), LayerGraph(g.layers[9:20], g.layers[9].in_res),
             LayerGraph(g.layers[20:], g.layers[20].in_res)]
    total = sum(predict(m, p) for p in parts) - (len(parts) - 1) * m.weights[BIAS]
    assert predict(m, g) == pytest.approx(total, rel=1e-12)


def test_schema_mismatch():
    with pytest.raises(SchemaMismatchError):
        predict(CostModel("x", np.ones(5)), build_baseline("mobilenet_v1"))
    with pytest.raises(SchemaMismatchError):
        CostModel.from_dict({"hardware_id": "x", "schema_version": 2, "weights": [0.0] * 16})


def test_pearson_degenerate():
    assert pearson([1, 2, 3], [2, 4, 6]) == (pytest.approx(1.0), False)
    assert pearson([1, 2, 3], [5, 5, 5]) == (0.0, True)
    rep = report_from_pairs("x", [1, 2, 3], [1, 2, 3])
    assert rep.pearson_r == pytest.approx(1.0) and rep.rmse == 0
    with pytest.raises(ValueError):
        calibration_report(hardware.synthetic_cost_model("gpu"), [], {})


def test_calibration_report_rejects_other_hardware():
    graphs = _graphs(3)
    s = [LatencySample("g0000", "dsp", 1.0)]
    with pytest.raises(HardwareMixError):
        calibration_report(hardware.synthetic_cost_model("gpu"), s, graphs)


def test_persistence(tmp_path):
    graphs = _graphs(100)
    samples = hardware.make_samples("edgetpu", graphs, 0.05, seed=0)
    m = fit(samples, graphs)
    path = tmp_path / "m.json"
    m.save(path)
    doc = json.loads(path.read_text())
    assert doc["hardware_id"] == "edgetpu" and doc["schema_version"] == 1
    assert set(doc["calibration"]) >= {"pearson_r", "rmse", "n_train", "n_test"}
    again = CostModel.load(path)
    assert np.array_equal(again.weights, m.weights) and again.calibration == m.calibration
    write_samples(tmp_path / "s.csv", samples)
    assert read_samples(tmp_path / "s.csv") == samples
    assert (tmp_path / "s.csv").read_text().startswith("arch_id,hardware_id,latency_ms\n")
    d = tmp_path / "graphs"
    d.mkdir()
    for k, g in graphs.items():
        g.save(d / f"{k}.json")
    assert fit(samples, graphs_from_dir(d)).weights.tolist() == m.weights.tolist()


def test_synthetic_hardware_hits_reference():
    g = build_baseline("mobilenet_v1", 1.25)
    for hw, ms in hardware.REFERENCE_MS.items():
        assert predict(hardware.synthetic_cost_model(hw), g) == pytest.approx(ms, rel=1e-12)
    with pytest.raises(KeyError):
        hardware.synthetic_weights("tpu_v9")
