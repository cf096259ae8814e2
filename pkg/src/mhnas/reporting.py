"""Pareto fronts, comparison tables and tradeoff CSVs."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .kernels import pareto_mask
from .metrics import NormFactors, f_avg, f_max

BASE_COLUMNS = ("model_id", "accuracy", "params", "madds")
MN_NORM = ("mn_norm_avg", "mn_norm_max")
UNSUPPORTED = "x"
_MISSING = {"", "x", "×", "-", "na", "none"}


class MissingKeyError(KeyError):
    pass


@dataclass(frozen=True)
class TradeoffPoint:
    model_id: str
    accuracy: float
    metrics: Mapping[str, float] = field(default_factory=dict)
    madds: float | None = None
    params: float | None = None

    def __post_init__(self):
        if not 0.0 < self.accuracy < 1.0:
            raise ValueError(f"{self.model_id}: accuracy {self.accuracy} outside (0, 1)")
        for k, v in self.metrics.items():
            if not v > 0:
                raise ValueError(f"{self.model_id}: metric {k}={v} must be positive")
        object.__setattr__(self, "metrics", dict(self.metrics))

    @property
    def family(self) -> str:
        return self.model_id.split("@", 1)[0]


def _cell(text: str) -> float | None:
    text = text.strip()
    if text.lower() in _MISSING:
        return None
    return float(text)


def read_points(path_or_text) -> list[TradeoffPoint]:
    """Points CSV: ``model_id,accuracy,params,madds,<metric columns...>``.

    Empty or ``x`` cells mark hardware the model does not run on.
    """
    fh = io.StringIO(path_or_text) if "\n" in str(path_or_text) else open(path_or_text, newline="")
    with fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if cols[:2] != ["model_id", "accuracy"]:
            raise ValueError("points CSV must start with model_id,accuracy")
        metric_cols = [c for c in cols if c not in BASE_COLUMNS]
        points = []
        for row in reader:
            metrics = {c: v for c in metric_cols if (v := _cell(row[c])) is not None}
            points.append(TradeoffPoint(
                row["model_id"], float(row["accuracy"]), metrics,
                _cell(row.get("madds") or ""), _cell(row.get("params") or ""),
            ))
    return points


def metric_keys(points: Sequence[TradeoffPoint]) -> list[str]:
    keys: dict[str, None] = {}
    for p in points:
        keys.update(dict.fromkeys(p.metrics))
    return list(keys)


def write_points(path, points: Sequence[TradeoffPoint], keys: Sequence[str] | None = None) -> None:
    keys = metric_keys(points) if keys is None else list(keys)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*BASE_COLUMNS, *keys])
        for p in points:
            w.writerow([
                p.model_id, repr(p.accuracy),
                "" if p.params is None else repr(p.params),
                "" if p.madds is None else repr(p.madds),
                *(repr(p.metrics[k]) if k in p.metrics else UNSUPPORTED for k in keys),
            ])


# ---------------------------------------------------------------- pareto


@dataclass(frozen=True)
class ParetoFront:
    points: tuple[TradeoffPoint, ...]
    latency_key: str

    @property
    def model_ids(self) -> list[str]:
        return [p.model_id for p in self.points]


def dominates(p: TradeoffPoint, q: TradeoffPoint, key: str) -> bool:
    lp, lq = p.metrics[key], q.metrics[key]
    return lp <= lq and p.accuracy >= q.accuracy and (lp < lq or p.accuracy > q.accuracy)


def pareto_front(points: Sequence[TradeoffPoint], latency_key: str) -> ParetoFront:
    """Non-dominated points (lower latency, higher accuracy), sorted by latency.

    Exact duplicates do not dominate each other, so both stay on the front.
    """
    if not points:
        raise ValueError("pareto_front needs at least one point")
    missing = [p.model_id for p in points if latency_key not in p.metrics]
    if missing:
        raise MissingKeyError(f"{latency_key!r} missing for {missing}")
    lat = np.array([p.metrics[latency_key] for p in points])
    acc = np.array([p.accuracy for p in points])
    keep = pareto_mask(lat, acc)
    front = [p for p, k in zip(points, keep) if k]
    front.sort(key=lambda p: (p.metrics[latency_key], -p.accuracy, p.model_id))
    return ParetoFront(tuple(front), latency_key)


# ---------------------------------------------------------------- tables


@dataclass
class ComparisonTable:
    columns: list[str]
    rows: list[dict]  # column -> float, or None for unsupported
    best: dict[str, set[str]]  # column -> model ids holding the column's best value

    def render_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model_id", *self.columns])
        for row in self.rows:
            cells = []
            for c in self.columns:
                v = row[c]
                if v is None:
                    cells.append(UNSUPPORTED)
                else:
                    mark = "*" if row["model_id"] in self.best.get(c, ()) else ""
                    cells.append(f"{v:.6g}{mark}")
            w.writerow([row["model_id"], *cells])
        return buf.getvalue()


_HIGHER_IS_BETTER = {"accuracy"}


def comparison_table(points: Sequence[TradeoffPoint], norm: NormFactors | None = None,
                     hardware: Sequence[str] | None = None) -> ComparisonTable:
    """Model comparison summary: per-hardware latency plus normalized avg/max.

    With ``norm`` the MN-Norm columns are computed from the latencies and only
    for models supported on every normalized hardware; without it, any
    ``mn_norm_avg``/``mn_norm_max`` values already on the points are shown.
    The best value in each column is flagged; unsupported cells are skipped.
    """
    if hardware is None:
        hardware = list(norm.hardware_ids) if norm is not None else [
            k for k in metric_keys(points) if k not in MN_NORM
        ]
    columns = ["accuracy", "params", "madds", *hardware, *MN_NORM]
    rows = []
    for p in points:
        row = {"model_id": p.model_id, "accuracy": p.accuracy, "params": p.params, "madds": p.madds}
        for h in hardware:
            row[h] = p.metrics.get(h)
        if norm is not None:
            if all(h in p.metrics for h in norm.hardware_ids):
                lat = {h: p.metrics[h] for h in norm.hardware_ids}
                row["mn_norm_avg"] = f_avg(lat, norm)
                row["mn_norm_max"] = f_max(lat, norm)
            else:
                row["mn_norm_avg"] = row["mn_norm_max"] = None
        else:
            for k in MN_NORM:
                row[k] = p.metrics.get(k)
        rows.append(row)
    best = {}
    for c in columns:
        vals = [(r[c], r["model_id"]) for r in rows if r[c] is not None]
        if not vals:
            continue
        target = max(v for v, _ in vals) if c in _HIGHER_IS_BETTER else min(v for v, _ in vals)
        best[c] = {m for v, m in vals if v == target}
    return ComparisonTable(columns, rows, best)


# ---------------------------------------------------------------- tradeoff


TRADEOFF_HEADER = ("model_id", "series", "x", "y")


def tradeoff_rows(points: Sequence[TradeoffPoint], x_key: str, y_key: str = "accuracy") -> list[tuple]:
    """One series per model family, each ordered by x; points lacking ``x_key`` are dropped."""
    def value(p, k):
        if k == "accuracy":
            return p.accuracy
        if k in ("madds", "params"):
            return getattr(p, k)
        return p.metrics.get(k)

    series: dict[str, list[tuple]] = {}
    for p in points:
        x, y = value(p, x_key), value(p, y_key)
        if x is None or y is None:
            continue
        series.setdefault(p.family, []).append((p.model_id, p.family, float(x), float(y)))
    rows = []
    for fam in series:
        rows.extend(sorted(series[fam], key=lambda r: (r[2], r[0])))
    return rows


def emit_tradeoff_csv(path, points: Sequence[TradeoffPoint], x_key: str, y_key: str = "accuracy") -> int:
    rows = tradeoff_rows(points, x_key, y_key)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRADEOFF_HEADER)
        for m, s, x, y in rows:
            w.writerow([m, s, repr(x), repr(y)])
    return len(rows)


def read_tradeoff_csv(path) -> list[tuple]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != TRADEOFF_HEADER:
            raise ValueError(f"unexpected tradeoff header {header}")
        return [(m, s, float(x), float(y)) for m, s, x, y in reader]


# ---------------------------------------------------------------- search runs


def run_point(run: Mapping, model_id: str | None = None) -> TradeoffPoint:
    """Tradeoff point for the best architecture of a saved search run."""
    best = run["best"]
    model_id = model_id or f"{run['space_id']}:{run['objective']}:seed{run['config']['seed']}"
    return TradeoffPoint(model_id, best["accuracy"], dict(best["latency_ms"]))


def search_cost_table(runs: Sequence[Mapping], norm: NormFactors) -> ComparisonTable:
    """Single-hardware vs multi-hardware search comparison.

    Every run costs one search unit. The single-hardware group is charged for
    all of its runs and represented by its best model on the normalized average
    metric (the group's winner is only known after all runs finish).
    """
    singles = [r for r in runs if r["config"]["reward"]["mode"] == "single"]
    multis = [r for r in runs if r["config"]["reward"]["mode"] != "single"]
    rows: list[dict] = []
    hardware = list(norm.hardware_ids)

    def row(label, run, cost):
        p = run_point(run, label)
        lat = {h: p.metrics[h] for h in hardware}
        return {
            "model_id": label, "search_cost": float(cost), "objective": run["objective"],
            "accuracy": p.accuracy, **lat,
            "mn_norm_avg": f_avg(lat, norm), "mn_norm_max": f_max(lat, norm),
        }

    if singles:
        cand = [row("single-hardware", r, len(singles)) for r in singles]
        rows.append(min(cand, key=lambda r: (r["mn_norm_avg"], -r["accuracy"])))
    for r in multis:
        label = "multi-hardware" if len(multis) == 1 else f"multi-hardware:{r['objective']}"
        rows.append(row(label, r, 1))
    columns = ["search_cost", "accuracy", *hardware, *MN_NORM]
    best = {}
    for c in columns:
        vals = [(r[c], r["model_id"]) for r in rows]
        if vals:
            target = max(v for v, _ in vals) if c in _HIGHER_IS_BETTER else min(v for v, _ in vals)
            best[c] = {m for v, m in vals if v == target}
    table = ComparisonTable(columns, rows, best)
    return table


def per_run_table(runs: Sequence[Mapping], norm: NormFactors) -> ComparisonTable:
    """One row per run (Table-2 style): best model's latencies and MN-Norm metrics."""
    points = [run_point(r, r["objective"]) for r in runs]
    return comparison_table(points, norm)
