"""Synthetic Pixel4-style hardware: ground-truth linear latency generators.

No devices are measured here. Each hardware gets a hand-shaped weight vector
over the latency feature schema (relative cost per MAdd per bucket, per output
element, per layer, fixed overhead), rescaled so that MobileNetV1 @ 1.25 lands
on that hardware's published latency. The shapes differ on purpose: CPUs pay
mostly for MAdds, accelerators pay for depthwise layers and memory traffic.
"""

from __future__ import annotations

from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .kernels import N_FEATURES
from .latency import CostModel, LatencySample, extract_features, feature_matrix, fold_weights
from .layers import GraphBuilder, LayerGraph, build_baseline

# MobileNetV1 @ 1.25 latency in ms on the Pixel4 targets
REFERENCE_MS = {
    "cpu_float": 54.7,
    "cpu_uint8": 18.2,
    "gpu": 7.12,
    "dsp": 3.72,
    "edgetpu": 2.84,
}

# relative cost per MAdd for conv1x1, conv3x3, conv5x5, dw3x3, dw5x5, fc, pool;
# then per output element, per layer, fixed
_SHAPES = {
    "cpu_float": ((1.0, 1.1, 1.2, 3.0, 3.0, 1.5, 1.0), 20.0, 2e4, 1e5),
    "cpu_uint8": ((1.0, 1.0, 1.0, 2.5, 2.5, 1.0, 1.0), 40.0, 5e4, 2e5),
    "gpu": ((1.0, 1.0, 1.0, 2.0, 2.0, 1.0, 1.0), 80.0, 2e6, 2e7),
    "dsp": ((1.0, 0.8, 0.8, 4.0, 4.0, 1.0, 1.0), 60.0, 5e5, 5e6),
    "edgetpu": ((1.0, 0.6, 0.6, 8.0, 10.0, 1.0, 1.0), 100.0, 1e6, 1e7),
}

SYNTHETIC_HARDWARE = tuple(_SHAPES)


@lru_cache(maxsize=None)
def synthetic_weights(hardware_id: str) -> np.ndarray:
    if hardware_id not in _SHAPES:
        raise KeyError(f"no synthetic hardware {hardware_id!r}; have {list(_SHAPES)}")
    per_madd, per_output, per_layer, fixed = _SHAPES[hardware_id]
    w = np.zeros(N_FEATURES)
    w[0:14:2] = per_madd
    w[1:14:2] = per_output
    w[14] = per_layer
    w[15] = fixed
    w = fold_weights(w)
    ref = extract_features(build_baseline("mobilenet_v1", 1.25))
    w *= REFERENCE_MS[hardware_id] / float(ref @ w)
    w.setflags(write=False)
    return w


def synthetic_cost_model(hardware_id: str) -> CostModel:
    return CostModel(hardware_id, synthetic_weights(hardware_id))


def resolve_cost_model(ref: str, base_dir=None) -> CostModel:
    """``"synthetic:<hw>"`` or a path to a cost-model JSON (relative to ``base_dir``)."""
    if ref.startswith("synthetic:"):
        return synthetic_cost_model(ref.split(":", 1)[1])
    path = Path(ref)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    return CostModel.load(path)


def true_latency(hardware_id: str, graphs: Sequence[LayerGraph]) -> np.ndarray:
    return feature_matrix(graphs) @ synthetic_weights(hardware_id)


def make_samples(hardware_id: str, graphs: dict[str, LayerGraph], noise: float = 0.05,
                 seed=0) -> list[LatencySample]:
    """Noisy latency measurements: ``true * (1 + noise * N(0, 1))``, floored at 1% of true."""
    rng = np.random.default_rng(seed)
    ids = list(graphs)
    lat = true_latency(hardware_id, [graphs[i] for i in ids])
    factor = np.maximum(1.0 + noise * rng.standard_normal(len(ids)), 0.01)
    return [LatencySample(i, hardware_id, float(x)) for i, x in zip(ids, lat * factor)]


def random_graph(rng: np.random.Generator, max_layers: int = 12) -> LayerGraph:
    """Random well-formed chain covering every feature bucket.

    Graphs from a search space share their head, which leaves some feature
    columns constant; these do not, so fits on them identify every weight.
    """
    res = int(rng.choice([16, 28, 32, 56, 64, 112]))
    b = GraphBuilder(res, 1001)
    c = int(rng.integers(1, 9)) * 8
    b.conv(3, c, int(rng.choice([1, 3, 5])), int(rng.integers(1, 3)))
    for _ in range(int(rng.integers(1, max_layers))):
        stride = int(rng.integers(1, 3)) if b.res > 2 else 1
        if rng.random() < 0.5:
            out = int(rng.integers(1, 17)) * 8
            start = len(b.layers)
            b.conv(c, out, int(rng.choice([1, 3, 5])), stride)
            if stride == 1 and out == c and rng.random() < 0.5:
                b.residual(c, len(b.layers) - start)
            c = out
        else:
            b.dwconv(c, int(rng.choice([3, 5])), stride)
    if rng.random() < 0.8:
        b.pool(c)
        for _ in range(int(rng.integers(0, 3))):
            out = int(rng.integers(1, 129)) * 8
            b.fc(c, out)
            c = out
    return b.build()
