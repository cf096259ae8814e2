"""Reward-driven architecture search over a :class:`~mhnas.space.SearchSpace`.

Accuracy comes from a pluggable oracle and latency from linear cost models, so
every candidate evaluation is a pure function of the genome. Runs are fully
determined by the config seed; evaluation parallelism never changes results.
"""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .kernels import batch_features
from .latency import MIN_LATENCY_MS, CostModel
from .layers import LayerGraph, compute_madds, stack_tables
from .metrics import Mode, NormFactors, RewardSpec, multi_metric, reward_from_metric
from .space import (
    Genome, SearchSpace, cardinality, compile_genome, enumerate_genomes, genome_key,
    mutate,
)

ALGORITHMS = ("random", "evolution", "reinforce", "exhaustive")


class LookupMissError(KeyError):
    pass


# ---------------------------------------------------------------- oracles


@dataclass(frozen=True)
class SyntheticOracle:
    """Accuracy rising with MAdds, with diminishing returns."""

    a_base: float = 0.70
    a_span: float = 0.08
    m_ref: float = 3e8

    kind = "synthetic"

    def accuracy(self, genome: Genome, graph: LayerGraph) -> float:
        return self.a_base + self.a_span * (1.0 - math.exp(-compute_madds(graph) / self.m_ref))

    def describe(self) -> dict:
        return {"kind": "synthetic", "a_base": self.a_base, "a_span": self.a_span, "m_ref": self.m_ref}


@dataclass(frozen=True)
class TabularOracle:
    """Accuracy looked up by genome key (``0-3-1-...``)."""

    table: Mapping[str, float]
    source: str = ""

    kind = "tabular"

    def accuracy(self, genome: Genome, graph: LayerGraph) -> float:
        key = genome_key(genome)
        if key not in self.table:
            raise LookupMissError(f"genome {key} not in accuracy table")
        return self.table[key]

    def describe(self) -> dict:
        return {"kind": "tabular", "source": self.source, "entries": len(self.table)}

    @classmethod
    def from_csv(cls, path) -> "TabularOracle":
        table = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                acc = float(row["accuracy"])
                if not 0.0 < acc < 1.0:
                    raise ValueError(f"accuracy {acc} for {row['genome_key']} outside (0, 1)")
                table[row["genome_key"]] = acc
        return cls(table, str(path))


def write_accuracy_table(path, table: Mapping[str, float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["genome_key", "accuracy"])
        for k, v in table.items():
            w.writerow([k, repr(float(v))])


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class Evaluation:
    genome: Genome
    accuracy: float
    latencies: tuple[tuple[str, float], ...]
    f_value: float
    reward: float

    def latency_dict(self) -> dict[str, float]:
        return dict(self.latencies)

    def to_dict(self) -> dict:
        return {
            "genome": list(self.genome),
            "accuracy": self.accuracy,
            "latency_ms": dict(self.latencies),
            "f_value": self.f_value,
            "reward": self.reward,
        }


class Evaluator:
    """Scores genomes; results are memoized per distinct architecture."""

    def __init__(self, space: SearchSpace, oracle, models: Mapping[str, CostModel],
                 norm: NormFactors | None, spec: RewardSpec, workers: int = 1):
        self.space = space
        self.oracle = oracle
        self.spec = spec
        self.workers = max(1, int(workers))
        order = [h for h in space.hardware_ids if h in models] + sorted(set(models) - set(space.hardware_ids))
        self.hardware = tuple(order)
        self.models = {h: models[h] for h in self.hardware}
        self.weights = np.stack([self.models[h].weights for h in self.hardware], axis=1)
        if spec.mode is Mode.SINGLE:
            if spec.hardware[0] not in self.models:
                raise KeyError(f"no cost model for {spec.hardware[0]}")
        else:
            if norm is None:
                raise ValueError("avg/max rewards need norm factors")
            used = spec.hardware or norm.hardware_ids
            missing = [h for h in used if h not in self.models]
            if missing:
                raise KeyError(f"no cost model for {missing}")
            norm = norm.subset(spec.hardware or norm.hardware_ids)
        self.norm = norm
        self._cache: dict[Genome, tuple] = {}
        self.calls = 0

    def with_spec(self, spec: RewardSpec) -> "Evaluator":
        return Evaluator(self.space, self.oracle, self.models, self.norm, spec, self.workers)

    def _score(self, genomes: Sequence[Genome]) -> list[tuple]:
        if self.workers > 1 and len(genomes) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                graphs = list(pool.map(lambda g: compile_genome(g, self.space), genomes))
        else:
            graphs = [compile_genome(g, self.space) for g in genomes]
        table, offsets = stack_tables(graphs)
        lat = np.maximum(batch_features(table, offsets) @ self.weights, MIN_LATENCY_MS)
        out = []
        for genome, graph, row in zip(genomes, graphs, lat):
            acc = float(self.oracle.accuracy(genome, graph))
            latencies = tuple(zip(self.hardware, (float(x) for x in row)))
            if self.spec.mode is Mode.SINGLE:
                f = dict(latencies)[self.spec.hardware[0]] / self.spec.target
            else:
                f = multi_metric(dict(latencies), self.norm, self.spec)
            out.append((acc, latencies, f, reward_from_metric(acc, f, self.spec.beta)))
        return out

    def evaluate_many(self, genomes: Sequence[Sequence[int]]) -> list[Evaluation]:
        genomes = [self.space.decisions.check(g) for g in genomes]
        keys = [self.space.decisions.canonical(g) for g in genomes]
        todo = list(dict.fromkeys(k for k in keys if k not in self._cache))
        for k, scored in zip(todo, self._score(todo)):
            self._cache[k] = scored
        self.calls += len(genomes)
        return [Evaluation(g, *self._cache[k]) for g, k in zip(genomes, keys)]

    def evaluate(self, genome: Sequence[int]) -> Evaluation:
        genome = self.space.decisions.check(genome)
        key = self.space.decisions.canonical(genome)
        hit = self._cache.get(key)
        if hit is None:
            hit = self._cache[key] = self._score([key])[0]
        self.calls += 1
        return Evaluation(genome, *hit)

    @property
    def unique_evaluations(self) -> int:
        return len(self._cache)


def evaluate(genome, space, oracle, models, norm, spec) -> Evaluation:
    return Evaluator(space, oracle, models, norm, spec).evaluate(genome)


# ---------------------------------------------------------------- runs


@dataclass(frozen=True)
class SearchConfig:
    algorithm: str = "evolution"
    reward: RewardSpec = field(default_factory=RewardSpec)
    budget: int = 1000
    seed: int = 0
    population: int = 64
    sample: int = 16
    learning_rate: float = 0.05
    baseline_momentum: float = 0.9
    limit: int = 50_000

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.population < 1 or self.sample < 1:
            raise ValueError("population and sample must be >= 1")
        if self.algorithm == "evolution" and self.budget < self.population:
            raise ValueError("evolution budget must be at least the population size")
        if self.learning_rate < 0 or not 0 <= self.baseline_momentum < 1:
            raise ValueError("learning_rate must be >= 0 and momentum in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "reward": self.reward.to_dict(),
            "budget": self.budget,
            "seed": self.seed,
            "population": self.population,
            "sample": self.sample,
            "learning_rate": self.learning_rate,
            "baseline_momentum": self.baseline_momentum,
            "limit": self.limit,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SearchConfig":
        doc = dict(doc)
        doc["reward"] = RewardSpec.from_dict(doc["reward"])
        return cls(**doc)


def _better(a: Evaluation, b: Evaluation) -> bool:
    """True if ``a`` beats ``b``: higher reward, ties to the lexicographically smaller genome."""
    if a.reward != b.reward:
        return a.reward > b.reward
    return a.genome < b.genome


@dataclass
class SearchRun:
    config: SearchConfig
    history: list[Evaluation]
    space_id: str = ""
    hardware: tuple[str, ...] = ()
    norm: NormFactors | None = None
    oracle: dict = field(default_factory=dict)
    final_logits: list[list[float]] | None = None
    stats: dict = field(default_factory=dict)

    @property
    def best_index(self) -> int:
        best = 0
        for i, e in enumerate(self.history):
            if _better(e, self.history[best]):
                best = i
        return best

    @property
    def best(self) -> Evaluation:
        return self.history[self.best_index]

    def to_dict(self) -> dict:
        best = self.best_index
        doc = {
            "space_id": self.space_id,
            "config": self.config.to_dict(),
            "objective": self.config.reward.describe(),
            "oracle": self.oracle,
            "hardware": list(self.hardware),
            "norm": self.norm.to_dict() if self.norm is not None else None,
            "search_cost_units": 1,
            "stats": self.stats,
            "best": {"step": best, **self.history[best].to_dict()},
            "history": [{"step": i, **e.to_dict()} for i, e in enumerate(self.history)],
        }
        if self.final_logits is not None:
            doc["final_logits"] = self.final_logits
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def load_run(path) -> dict:
    return json.loads(Path(path).read_text())


def _finish(run_history, evaluator: Evaluator, config: SearchConfig, **extra) -> SearchRun:
    return SearchRun(
        config=config,
        history=run_history,
        space_id=evaluator.space.space_id,
        hardware=evaluator.hardware,
        norm=evaluator.norm,
        oracle=evaluator.oracle.describe() if hasattr(evaluator.oracle, "describe") else {},
        stats={
            "evaluations": len(run_history),
            "unique_architectures": len({evaluator.space.decisions.canonical(e.genome) for e in run_history}),
        },
        **extra,
    )


def _draw(rng: np.random.Generator, arities: np.ndarray) -> Genome:
    return tuple(int(x) for x in rng.integers(0, arities))


def search_random(space: SearchSpace, evaluator: Evaluator, config: SearchConfig,
                  enumerate_space: bool = False) -> SearchRun:
    """Uniform random sampling; ``enumerate_space`` walks the space in order instead."""
    if enumerate_space:
        genomes = list(enumerate_genomes(space.decisions, config.budget))
    else:
        rng = np.random.default_rng(config.seed)
        genomes = [_draw(rng, space.decisions.arities) for _ in range(config.budget)]
    return _finish(evaluator.evaluate_many(genomes), evaluator, config)


def search_exhaustive(space: SearchSpace, evaluator: Evaluator, config: SearchConfig,
                      effective: bool = True) -> SearchRun:
    genomes = list(enumerate_genomes(space.decisions, config.limit, effective=effective))
    return _finish(evaluator.evaluate_many(genomes), evaluator, config)


def search_evolution(space: SearchSpace, evaluator: Evaluator, config: SearchConfig) -> SearchRun:
    """Regularized (aging) evolution with tournament selection."""
    rng = np.random.default_rng(config.seed)
    spec = space.decisions
    init = [_draw(rng, spec.arities) for _ in range(config.population)]
    history = evaluator.evaluate_many(init)
    population = deque(history)
    can_mutate = cardinality(spec).raw > 1
    while len(history) < config.budget:
        k = min(config.sample, len(population))
        picks = rng.choice(len(population), size=k, replace=False)
        parent = population[int(picks[0])]
        for i in picks[1:]:
            if _better(population[int(i)], parent):
                parent = population[int(i)]
        child_genome = mutate(spec, parent.genome, rng) if can_mutate else parent.genome
        child = evaluator.evaluate(child_genome)
        history.append(child)
        population.append(child)
        population.popleft()
    return _finish(history, evaluator, config)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class Controller:
    """Independent categorical distributions, one per decision site."""

    arities: np.ndarray
    logits: np.ndarray = None

    def __post_init__(self):
        if self.logits is None:
            width = int(self.arities.max())
            self.logits = np.where(np.arange(width)[None, :] < self.arities[:, None], 0.0, -np.inf)

    def probs(self) -> np.ndarray:
        return _softmax_rows(self.logits)

    def sample(self, rng: np.random.Generator) -> Genome:
        cdf = np.cumsum(self.probs(), axis=1)
        u = rng.random(len(self.arities))
        idx = (cdf < u[:, None]).sum(axis=1)
        return tuple(int(x) for x in np.minimum(idx, self.arities - 1))

    def update(self, genome: Genome, active: np.ndarray, advantage: float, lr: float) -> None:
        """Ascend ``advantage * grad log p(genome)`` on the active sites."""
        p = self.probs()
        grad = -p
        rows = np.arange(len(genome))
        grad[rows, np.asarray(genome)] += 1.0
        grad[~active] = 0.0
        finite = np.isfinite(self.logits)
        self.logits[finite] += lr * advantage * grad[finite]

    def as_lists(self) -> list[list[float]]:
        return [[float(x) for x in row[: int(a)]] for row, a in zip(self.logits, self.arities)]


def search_reinforce(space: SearchSpace, evaluator: Evaluator, config: SearchConfig) -> SearchRun:
    """REINFORCE over per-site softmax policies with an EMA reward baseline.

    The baseline starts at the first observed reward. Only unmasked sites with
    more than one choice receive gradient.
    """
    rng = np.random.default_rng(config.seed)
    spec = space.decisions
    ctl = Controller(spec.arities)
    baseline = None
    history = []
    for _ in range(config.budget):
        genome = ctl.sample(rng)
        ev = evaluator.evaluate(genome)
        history.append(ev)
        if baseline is None:
            baseline = ev.reward
        advantage = ev.reward - baseline
        active = ~spec.mask(genome) & (spec.arities > 1)
        ctl.update(genome, active, advantage, config.learning_rate)
        baseline = config.baseline_momentum * baseline + (1.0 - config.baseline_momentum) * ev.reward
    return _finish(history, evaluator, config, final_logits=ctl.as_lists())


_DISPATCH = {
    "random": search_random,
    "evolution": search_evolution,
    "reinforce": search_reinforce,
    "exhaustive": search_exhaustive,
}


def run_search(space: SearchSpace, oracle, models: Mapping[str, CostModel], norm: NormFactors | None,
               config: SearchConfig, workers: int = 1) -> SearchRun:
    evaluator = Evaluator(space, oracle, models, norm, config.reward, workers=workers)
    return _DISPATCH[config.algorithm](space, evaluator, config)
