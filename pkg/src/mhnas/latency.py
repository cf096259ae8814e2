"""Linear latency cost models over per-bucket layer features."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .kernels import FEATURE_NAMES, N_FEATURES, batch_features
from .layers import LayerGraph, stack_tables

SCHEMA_VERSION = 1
MIN_LATENCY_MS = 1e-3
RIDGE_REL = 1e-8

# Depthwise MAdds are exactly K*K times their output count, so the two columns
# of a depthwise bucket are collinear. Their output weights are folded into the
# MAdds weights: (outputs column, MAdds column, K*K).
FOLDED = tuple(
    (FEATURE_NAMES.index(f"dw{k}x{k}_outputs"), FEATURE_NAMES.index(f"dw{k}x{k}_madds"), k * k)
    for k in (3, 5)
)
_FREE = np.array([i for i in range(N_FEATURES) if i not in {o for o, _, _ in FOLDED}])


def fold_weights(w: np.ndarray) -> np.ndarray:
    """Equivalent weights with zero on the redundant depthwise output columns."""
    w = np.array(w, dtype=np.float64)
    for o, m, kk in FOLDED:
        w[m] += w[o] / kk
        w[o] = 0.0
    return w


class UnderdeterminedError(ValueError):
    pass


class SchemaMismatchError(ValueError):
    pass


class HardwareMixError(ValueError):
    pass


@dataclass(frozen=True)
class LatencySample:
    arch_id: str
    hardware_id: str
    latency_ms: float

    def __post_init__(self):
        if not self.latency_ms > 0:
            raise ValueError(f"latency_ms must be positive, got {self.latency_ms}")


@dataclass(frozen=True)
class Calibration:
    pearson_r: float
    rmse: float
    n_train: int
    n_test: int
    degenerate: bool = False


@dataclass(frozen=True)
class CostModel:
    hardware_id: str
    weights: np.ndarray
    calibration: Calibration | None = None

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def predict(self, g: LayerGraph) -> float:
        return predict(self, g)

    def to_dict(self) -> dict:
        d = {
            "hardware_id": self.hardware_id,
            "schema_version": SCHEMA_VERSION,
            "features": list(FEATURE_NAMES),
            "weights": [float(x) for x in self.weights],
        }
        if self.calibration is not None:
            c = self.calibration
            d["calibration"] = {
                "pearson_r": c.pearson_r, "rmse": c.rmse,
                "n_train": c.n_train, "n_test": c.n_test, "degenerate": c.degenerate,
            }
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "CostModel":
        if doc.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise SchemaMismatchError(f"unsupported schema_version {doc['schema_version']}")
        cal = doc.get("calibration")
        return cls(
            doc["hardware_id"],
            np.asarray(doc["weights"], dtype=np.float64),
            Calibration(**cal) if cal else None,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "CostModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def extract_features(g: LayerGraph) -> np.ndarray:
    table, offsets = stack_tables([g])
    return batch_features(table, offsets)[0]


def feature_matrix(graphs: Sequence[LayerGraph]) -> np.ndarray:
    table, offsets = stack_tables(graphs)
    return batch_features(table, offsets)


def _check_schema(m: CostModel) -> None:
    if m.weights.shape != (N_FEATURES,):
        raise SchemaMismatchError(
            f"model has {m.weights.size} weights, feature schema has {N_FEATURES}"
        )


def predict_features(m: CostModel, X: np.ndarray) -> np.ndarray:
    _check_schema(m)
    return np.maximum(np.asarray(X) @ m.weights, MIN_LATENCY_MS)


def predict(m: CostModel, g: LayerGraph) -> float:
    return float(predict_features(m, extract_features(g)))


def solve_ridge(X: np.ndarray, y: np.ndarray, rel: float = RIDGE_REL, refine: int = 2) -> np.ndarray:
    """Ridge-stabilized least squares on column-normalized features.

    Columns are scaled to unit RMS before the penalty
    ``rel * trace(X'X) / d`` is applied, so MAdds-sized and bias-sized
    features are damped alike. Solved as the stacked system
    ``[X; sqrt(eps) I] w = [y; 0]``, which has the same minimizer as the
    ridge normal equations without squaring the condition number.

    ``refine`` iterated-Tikhonov steps re-solve for the residual. Each step
    shrinks the ridge bias along a direction with singular value ``s`` by
    ``eps / (s^2 + eps)``: well-determined weights converge to least squares
    while near-null directions stay damped.
    """
    n, d = X.shape
    scale = np.sqrt(np.mean(X * X, axis=0))
    scale[scale == 0] = 1.0
    Xs = X / scale
    eps = rel * np.einsum("ij,ij->", Xs, Xs) / d
    A = np.vstack([Xs, np.sqrt(eps) * np.eye(d)])
    ws = np.zeros(d)
    r = np.asarray(y, dtype=np.float64)
    for _ in range(1 + refine):
        step, *_ = np.linalg.lstsq(A, np.concatenate([r, np.zeros(d)]), rcond=None)
        ws += step
        r = y - Xs @ ws
    return ws / scale


def pearson(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    """Correlation and a degenerate flag; zero-variance inputs give ``(0.0, True)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da = a - a.mean()
    db = b - b.mean()
    va = float(da @ da)
    vb = float(db @ db)
    if va <= 0.0 or vb <= 0.0 or len(a) < 2:
        return 0.0, True
    return float(np.clip(da @ db / np.sqrt(va * vb), -1.0, 1.0)), False


GraphResolver = Mapping[str, LayerGraph] | Callable[[str], LayerGraph]


def _resolve(graphs: GraphResolver, arch_id: str) -> LayerGraph:
    if callable(graphs) and not isinstance(graphs, Mapping):
        return graphs(arch_id)
    return graphs[arch_id]


def fit(samples: Sequence[LatencySample], graphs: GraphResolver, holdout: float = 0.1,
        seed: int = 0) -> CostModel:
    """Fit a linear cost model for one hardware from (architecture, latency) samples.

    Calibration is measured on the held-out split (on the training split when
    the holdout is empty).
    """
    if not samples:
        raise UnderdeterminedError("no samples")
    hw = {s.hardware_id for s in samples}
    if len(hw) != 1:
        raise HardwareMixError(f"samples mix hardware ids {sorted(hw)}")
    if not 0.0 <= holdout < 1.0:
        raise ValueError("holdout must lie in [0, 1)")
    n = len(samples)
    n_test = int(round(holdout * n))
    n_train = n - n_test
    if n_train < N_FEATURES:
        raise UnderdeterminedError(
            f"{n_train} training rows for {N_FEATURES} features"
        )
    X = feature_matrix([_resolve(graphs, s.arch_id) for s in samples])
    y = np.array([s.latency_ms for s in samples])
    order = np.random.default_rng(seed).permutation(n)
    test, train = order[:n_test], order[n_test:]
    if np.linalg.matrix_rank(X[train]) == 0:
        raise UnderdeterminedError("training features are all zero")
    w = np.zeros(N_FEATURES)
    w[_FREE] = solve_ridge(X[train][:, _FREE], y[train])
    model = CostModel(hw.pop(), w)
    ev = test if n_test >= 2 else train
    pred = predict_features(model, X[ev])
    r, degenerate = pearson(y[ev], pred)
    rmse = float(np.sqrt(np.mean((pred - y[ev]) ** 2)))
    cal = Calibration(r, rmse, int(n_train), int(n_test), degenerate)
    return CostModel(model.hardware_id, w, cal)


@dataclass
class CalibrationReport:
    hardware_id: str
    true_ms: np.ndarray
    predicted_ms: np.ndarray
    pearson_r: float
    rmse: float
    degenerate: bool

    def rows(self):
        return list(zip(self.true_ms.tolist(), self.predicted_ms.tolist()))


def calibration_report(m: CostModel, samples: Sequence[LatencySample],
                       graphs: GraphResolver) -> CalibrationReport:
    if not samples:
        raise ValueError("calibration report needs at least one sample")
    bad = {s.hardware_id for s in samples} - {m.hardware_id}
    if bad:
        raise HardwareMixError(f"samples for {sorted(bad)} given to model {m.hardware_id}")
    truth = np.array([s.latency_ms for s in samples])
    pred = predict_features(m, feature_matrix([_resolve(graphs, s.arch_id) for s in samples]))
    return report_from_pairs(m.hardware_id, truth, pred)


def report_from_pairs(hardware_id: str, truth, pred) -> CalibrationReport:
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    r, degenerate = pearson(truth, pred)
    rmse = float(np.sqrt(np.mean((pred - truth) ** 2)))
    return CalibrationReport(hardware_id, truth, pred, r, rmse, degenerate)


def read_samples(path) -> list[LatencySample]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"arch_id", "hardware_id", "latency_ms"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [
            LatencySample(row["arch_id"], row["hardware_id"], float(row["latency_ms"]))
            for row in reader
        ]


def write_samples(path, samples: Sequence[LatencySample]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arch_id", "hardware_id", "latency_ms"])
        for s in samples:
            w.writerow([s.arch_id, s.hardware_id, repr(float(s.latency_ms))])


def graphs_from_dir(directory) -> Callable[[str], LayerGraph]:
    """Resolver reading ``<directory>/<arch_id>.json`` on demand."""
    root = Path(directory)
    cache: dict[str, LayerGraph] = {}

    def resolve(arch_id: str) -> LayerGraph:
        if arch_id not in cache:
            path = root / f"{arch_id}.json"
            if not path.exists():
                raise KeyError(f"no graph file for arch_id {arch_id!r} in {root}")
            cache[arch_id] = LayerGraph.load(path)
        return cache[arch_id]

    return resolve
