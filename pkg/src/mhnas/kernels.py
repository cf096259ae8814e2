"""Hot numeric kernels.

Each kernel has a loop implementation compiled with numba and a vectorized
numpy implementation. The public wrappers dispatch on
:data:`mhnas._accel.USE_NUMBA`; both paths are kept importable so tests and
``benchmarks/bench_kernels.py`` can compare them directly.
"""

import numpy as np

from . import _accel
from ._accel import njit

# layer kind codes, mirrored from layers.KINDS
K_CONV, K_DW, K_POOL, K_FC, K_RES = 0, 1, 2, 3, 4

BUCKETS = ("conv1x1", "conv3x3", "conv5x5", "dw3x3", "dw5x5", "fc", "pool")
FEATURE_NAMES = tuple(
    f"{b}_{q}" for b in BUCKETS for q in ("madds", "outputs")
) + ("layer_count", "bias")
N_FEATURES = len(FEATURE_NAMES)
LAYER_COUNT = N_FEATURES - 2
BIAS = N_FEATURES - 1


class FeatureSchemaError(ValueError):
    def __init__(self, row: int):
        super().__init__(f"layer row {row} has no feature bucket (kind/kernel unsupported)")
        self.row = row


# ---------------------------------------------------------------- features


@njit
def _bucket_of(kind, kernel):
    if kind == 0:
        if kernel == 1:
            return 0
        if kernel == 3:
            return 1
        if kernel == 5:
            return 2
        return -1
    if kind == 1:
        if kernel == 3:
            return 3
        if kernel == 5:
            return 4
        return -1
    if kind == 3:
        return 5
    if kind == 2:
        return 6
    if kind == 4:
        return -2
    return -1


@njit
def _features_loop(table, offsets):
    n = offsets.shape[0] - 1
    out = np.zeros((n, 16), dtype=np.float64)
    for g in range(n):
        out[g, 15] = 1.0
        for r in range(offsets[g], offsets[g + 1]):
            kind = table[r, 0]
            k = table[r, 1]
            stride = table[r, 2]
            cin = table[r, 3]
            cout = table[r, 4]
            res = table[r, 5]
            b = _bucket_of(kind, k)
            if b == -1:
                return out, r
            out[g, 14] += 1.0
            if b == -2:
                continue
            if kind == 2 or kind == 3:
                ores = 1
            else:
                ores = (res + stride - 1) // stride
            outputs = float(ores) * ores * cout
            if kind == 0:
                ops = float(ores) * ores * k * k * cin * cout
            elif kind == 1:
                ops = float(ores) * ores * k * k * cin
            elif kind == 3:
                ops = float(cin) * cout
            else:
                ops = float(res) * res * cin
            out[g, 2 * b] += ops
            out[g, 2 * b + 1] += outputs
    return out, -1


def _bucket_numpy(kind, kernel):
    b = np.full(kind.shape, -1, dtype=np.int64)
    conv = kind == K_CONV
    dw = kind == K_DW
    b[conv & (kernel == 1)] = 0
    b[conv & (kernel == 3)] = 1
    b[conv & (kernel == 5)] = 2
    b[dw & (kernel == 3)] = 3
    b[dw & (kernel == 5)] = 4
    b[kind == K_FC] = 5
    b[kind == K_POOL] = 6
    b[kind == K_RES] = -2
    return b


def _features_numpy(table, offsets):
    n = len(offsets) - 1
    out = np.zeros((n, N_FEATURES), dtype=np.float64)
    out[:, BIAS] = 1.0
    if len(table) == 0:
        return out, -1
    t = table.astype(np.float64)
    kind, k, stride, cin, cout, res = (table[:, j] for j in range(6))
    bucket = _bucket_numpy(kind, k)
    bad = np.flatnonzero(bucket == -1)
    if bad.size:
        return out, int(bad[0])
    owner = np.repeat(np.arange(n), np.diff(offsets))
    ores = np.where((kind == K_POOL) | (kind == K_FC), 1.0, np.ceil(t[:, 5] / t[:, 2]))
    area = ores * ores
    kk = t[:, 1] * t[:, 1]
    ops = np.select(
        [kind == K_CONV, kind == K_DW, kind == K_FC, kind == K_POOL],
        [area * kk * t[:, 3] * t[:, 4], area * kk * t[:, 3], t[:, 3] * t[:, 4],
         t[:, 5] * t[:, 5] * t[:, 3]],
        0.0,
    )
    outputs = area * t[:, 4]
    np.add.at(out[:, LAYER_COUNT], owner, 1.0)
    m = bucket >= 0
    np.add.at(out, (owner[m], 2 * bucket[m]), ops[m])
    np.add.at(out, (owner[m], 2 * bucket[m] + 1), outputs[m])
    return out, -1


def batch_features(table, offsets, use_numba=None):
    """Feature matrix ``(n_graphs, N_FEATURES)`` for stacked layer tables."""
    use_numba = _accel.USE_NUMBA if use_numba is None else use_numba
    table = np.ascontiguousarray(table, dtype=np.int64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    fn = _features_loop if use_numba else _features_numpy
    out, bad = fn(table, offsets)
    if bad >= 0:
        raise FeatureSchemaError(int(bad))
    return out


# ---------------------------------------------------------------- metrics


@njit
def _norm_metrics_loop(lat, norm):
    n, h = lat.shape
    avg = np.empty(n, dtype=np.float64)
    mx = np.empty(n, dtype=np.float64)
    for i in range(n):
        s = 0.0
        m = -np.inf
        for j in range(h):
            r = lat[i, j] / norm[j]
            s += r
            if r > m:
                m = r
        avg[i] = s / h
        mx[i] = m
    return avg, mx


def _norm_metrics_numpy(lat, norm):
    ratios = lat / norm[None, :]
    return ratios.mean(axis=1), ratios.max(axis=1)


def batch_norm_metrics(lat, norm, use_numba=None):
    """Row-wise normalized average and max latency for a ``(n, N)`` latency matrix."""
    use_numba = _accel.USE_NUMBA if use_numba is None else use_numba
    lat = np.ascontiguousarray(lat, dtype=np.float64)
    norm = np.ascontiguousarray(norm, dtype=np.float64)
    if lat.ndim != 2 or lat.shape[1] != norm.shape[0]:
        raise ValueError("latency matrix and norm factors disagree on hardware count")
    fn = _norm_metrics_loop if use_numba else _norm_metrics_numpy
    return fn(lat, norm)


# ---------------------------------------------------------------- pareto


@njit
def _pareto_loop(lat, acc):
    n = lat.shape[0]
    keep = np.ones(n, dtype=np.bool_)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if lat[j] <= lat[i] and acc[j] >= acc[i] and (lat[j] < lat[i] or acc[j] > acc[i]):
                keep[i] = False
                break
    return keep


def _pareto_numpy(lat, acc):
    le = lat[None, :] <= lat[:, None]
    ge = acc[None, :] >= acc[:, None]
    strict = (lat[None, :] < lat[:, None]) | (acc[None, :] > acc[:, None])
    # dominated[i] iff some j has lat_j <= lat_i, acc_j >= acc_i, one strict
    return ~np.any(le & ge & strict, axis=1)


def pareto_mask(lat, acc, use_numba=None):
    """Boolean mask of points not dominated in (minimize ``lat``, maximize ``acc``)."""
    use_numba = _accel.USE_NUMBA if use_numba is None else use_numba
    lat = np.ascontiguousarray(lat, dtype=np.float64)
    acc = np.ascontiguousarray(acc, dtype=np.float64)
    fn = _pareto_loop if use_numba else _pareto_numpy
    return fn(lat, acc)
