"""Normalized multi-hardware latency metrics and search rewards."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .latency import CostModel, predict
from .layers import LayerGraph

DEFAULT_BETA = -0.07
ACCURACY_TOL = 1e-4

LatencyVector = Mapping[str, float]


class HardwareMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class NormFactors:
    """Per-hardware normalization latencies ``C_i`` (ms), in a fixed order."""

    factors: tuple[tuple[str, float], ...]
    reference: str = "explicit"

    def __post_init__(self):
        items = tuple((str(h), float(c)) for h, c in
                      (self.factors.items() if isinstance(self.factors, Mapping) else self.factors))
        ids = [h for h, _ in items]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate hardware ids in norm factors: {ids}")
        for h, c in items:
            if not (c > 0 and math.isfinite(c)):
                raise ValueError(f"norm factor for {h} must be positive and finite, got {c}")
        object.__setattr__(self, "factors", items)

    @property
    def hardware_ids(self) -> tuple[str, ...]:
        return tuple(h for h, _ in self.factors)

    def as_dict(self) -> dict[str, float]:
        return dict(self.factors)

    def __getitem__(self, hw: str) -> float:
        return self.as_dict()[hw]

    def __len__(self) -> int:
        return len(self.factors)

    def subset(self, hardware: Sequence[str]) -> "NormFactors":
        d = self.as_dict()
        missing = [h for h in hardware if h not in d]
        if missing:
            raise HardwareMismatchError(f"no norm factor for {missing}")
        return NormFactors(tuple((h, d[h]) for h in hardware), self.reference)

    def reweighted(self, weights: Mapping[str, float]) -> "NormFactors":
        """Fold per-hardware importance into C: a weight of 2 doubles that hardware's ratio."""
        out = []
        for h, c in self.factors:
            w = float(weights.get(h, 1.0))
            if not w > 0:
                raise ValueError(f"weight for {h} must be positive")
            out.append((h, c / w))
        return NormFactors(tuple(out), f"{self.reference} (reweighted)")

    def to_dict(self) -> dict:
        return {"reference": self.reference, "factors": self.as_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "NormFactors":
        return cls(tuple(doc["factors"].items()), doc.get("reference", "explicit"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "NormFactors":
        return cls.from_dict(json.loads(Path(path).read_text()))


def norm_factors_from_reference(ref: LayerGraph, models: Mapping[str, CostModel] | Sequence[CostModel],
                                hardware: Sequence[str] | None = None,
                                label: str = "reference") -> NormFactors:
    """C_i = predicted latency of the reference graph on each hardware."""
    if not isinstance(models, Mapping):
        models = {m.hardware_id: m for m in models}
    hardware = list(models) if hardware is None else list(hardware)
    missing = [h for h in hardware if h not in models]
    if missing:
        raise HardwareMismatchError(f"no cost model for {missing}")
    return NormFactors(tuple((h, predict(models[h], ref)) for h in hardware), label)


def _ratios(L: LatencyVector, C: NormFactors) -> list[float]:
    if set(L) != set(C.hardware_ids):
        raise HardwareMismatchError(
            f"latency hardware {sorted(L)} != norm hardware {sorted(C.hardware_ids)}"
        )
    out = []
    for h, c in C.factors:
        l = float(L[h])
        if not l > 0:
            raise ValueError(f"latency for {h} must be positive, got {l}")
        out.append(l / c)
    return out


def f_avg(L: LatencyVector, C: NormFactors) -> float:
    r = _ratios(L, C)
    return math.fsum(r) / len(r)


def f_max(L: LatencyVector, C: NormFactors) -> float:
    return max(_ratios(L, C))


class Mode(str, enum.Enum):
    SINGLE = "single"
    AVG = "avg"
    MAX = "max"


@dataclass(frozen=True)
class RewardSpec:
    mode: Mode = Mode.AVG
    beta: float = DEFAULT_BETA
    target: float = 1.0  # L_0 in ms for single mode; unused otherwise
    hardware: tuple[str, ...] | None = None  # single mode: exactly one id

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.hardware is not None:
            object.__setattr__(self, "hardware", tuple(self.hardware))
        if not self.beta < 0:
            raise ValueError("beta must be negative")
        if self.mode is Mode.SINGLE:
            if not self.hardware or len(self.hardware) != 1:
                raise ValueError("single mode needs exactly one hardware id")
            if not self.target > 0:
                raise ValueError("single mode needs a positive latency target")

    @classmethod
    def parse(cls, objective: str, beta: float = DEFAULT_BETA) -> "RewardSpec":
        """``avg``, ``max``, ``avg:hw1,hw2`` or ``single:<hw>:<L0>``."""
        head, _, rest = objective.partition(":")
        if head == "single":
            hw, _, target = rest.rpartition(":")
            if not hw:
                raise ValueError("single objective must look like single:<hw>:<L0>")
            return cls(Mode.SINGLE, beta, float(target), (hw,))
        if head in ("avg", "max"):
            hw = tuple(h for h in rest.split(",") if h) or None
            return cls(Mode(head), beta, 1.0, hw)
        raise ValueError(f"unknown objective {objective!r}")

    def describe(self) -> str:
        if self.mode is Mode.SINGLE:
            return f"single:{self.hardware[0]}:{self.target!r}"
        if self.hardware:
            return f"{self.mode.value}:{','.join(self.hardware)}"
        return self.mode.value

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "beta": self.beta,
            "target": self.target,
            "hardware": list(self.hardware) if self.hardware else None,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RewardSpec":
        hw = doc.get("hardware")
        return cls(doc["mode"], doc["beta"], doc.get("target", 1.0), tuple(hw) if hw else None)


def reward_single(accuracy: float, latency: float, spec: RewardSpec) -> float:
    if spec.mode is not Mode.SINGLE:
        raise ValueError(f"reward_single called with {spec.mode.value} spec")
    if not latency > 0:
        raise ValueError("latency must be positive")
    return accuracy + spec.beta * abs(latency / spec.target - 1.0)


def multi_metric(L: LatencyVector, C: NormFactors, spec: RewardSpec) -> float:
    """f_avg or f_max over the spec's hardware subset (all of C when unset)."""
    if spec.hardware:
        C = C.subset(spec.hardware)
        L = {h: L[h] for h in spec.hardware}
    if spec.mode is Mode.AVG:
        return f_avg(L, C)
    if spec.mode is Mode.MAX:
        return f_max(L, C)
    raise ValueError("multi metric needs avg or max mode")


def reward_multi(accuracy: float, L: LatencyVector, C: NormFactors, spec: RewardSpec) -> float:
    return accuracy + spec.beta * abs(multi_metric(L, C, spec) - 1.0)


def reward_from_metric(accuracy: float, f: float, beta: float) -> float:
    return accuracy + beta * abs(f - 1.0)


class Ordering(str, enum.Enum):
    BETTER = "better"
    WORSE = "worse"
    EQUAL = "equal"
    INCOMPARABLE = "incomparable"


def compare(a: tuple[float, LatencyVector], b: tuple[float, LatencyVector], C: NormFactors,
            metric: str = "avg", accuracy_tol: float | None = ACCURACY_TOL) -> Ordering:
    """Order model ``a`` against ``b`` by normalized latency at equal accuracy.

    Accuracies further apart than ``accuracy_tol`` are incomparable here (that
    case belongs to Pareto analysis). ``accuracy_tol=None`` skips the accuracy
    check and compares on latency alone.
    """
    fn = {"avg": f_avg, "max": f_max}[metric]
    acc_a, lat_a = a
    acc_b, lat_b = b
    if accuracy_tol is not None and abs(acc_a - acc_b) > accuracy_tol:
        return Ordering.INCOMPARABLE
    fa, fb = fn(lat_a, C), fn(lat_b, C)
    if fa < fb:
        return Ordering.BETTER
    if fa > fb:
        return Ordering.WORSE
    return Ordering.EQUAL
