import json
import math

import numpy as np
import pytest

from mhnas.kernels import FEATURE_NAMES
from mhnas.latency import extract_features, predict
from mhnas.metrics import Mode, RewardSpec, f_avg
from mhnas.search import (
    Controller, Evaluation, Evaluator, LookupMissError, SearchConfig, SyntheticOracle,
    TabularOracle, evaluate, run_search, search_evolution, search_exhaustive, search_random,
    search_reinforce, write_accuracy_table,
)
from mhnas.space import (
    IBN, DecisionSpec, SearchSpace, cardinality, compile_genome, enumerate_genomes, genome_key,
    sample_uniform,
)

FIXED = {"repeats": [1], "filter_ratio": [1.0], "block_type": [IBN], "kernel": [3], "expansion": [1]}


def toy_space(**slot0):
    """Six-stage skeleton, everything fixed except the given sites of stage 0 slot 0."""
    stages = [{"slots": [slot0]}] + [{}] * 5
    spec = DecisionSpec.from_dict({"defaults": FIXED, "stages": stages}, 6)
    return SearchSpace(decisions=spec, space_id="toy")


@pytest.fixture(scope="module")
def toy():
    return toy_space(kernel=[3, 5], expansion=[1, 2, 3])


@pytest.fixture(scope="module")
def evaluator_for(synthetic_models, v1_norm):
    def make(space, mode="avg", oracle=None, workers=1):
        return Evaluator(space, oracle or SyntheticOracle(), synthetic_models, v1_norm,
                         RewardSpec(Mode(mode)), workers)
    return make


# ---------------------------------------------------------------- evaluation


def test_synthetic_oracle_formula(default_space, synthetic_models, v1_norm):
    rng = np.random.default_rng(0)
    spec = RewardSpec()
    for _ in range(20):
        g = sample_uniform(default_space.decisions, rng)
        graph = compile_genome(g, default_space)
        f = extract_features(graph)
        # MAdds from the feature buckets, excluding the pool entry (pooling costs no MAdds)
        madds = sum(f[i] for i, n in enumerate(FEATURE_NAMES) if n.endswith("_madds") and n != "pool_madds")
        ev = evaluate(g, default_space, SyntheticOracle(), synthetic_models, v1_norm, spec)
        assert ev.accuracy == pytest.approx(0.70 + 0.08 * (1 - math.exp(-madds / 3e8)), abs=1e-15)
        lat = {h: predict(synthetic_models[h], graph) for h in default_space.hardware_ids}
        # batched matmul vs single dot product: summation order differs by an ulp
        assert ev.latency_dict() == pytest.approx(lat, rel=1e-13)
        assert ev.f_value == pytest.approx(f_avg(lat, v1_norm), rel=1e-12)
        assert ev.reward == pytest.approx(ev.accuracy - 0.07 * abs(ev.f_value - 1), abs=1e-12)
        assert 0 < ev.accuracy < 1


def test_evaluate_deterministic(default_space, synthetic_models, v1_norm):
    g = sample_uniform(default_space.decisions, 3)
    args = (default_space, SyntheticOracle(), synthetic_models, v1_norm, RewardSpec(Mode.MAX))
    assert evaluate(g, *args) == evaluate(g, *args)


def test_tabular_oracle(toy, synthetic_models, v1_norm, tmp_path):
    genomes = list(enumerate_genomes(toy.decisions, 100, effective=True))
    table = {genome_key(g): 0.6 + 0.01 * i for i, g in enumerate(genomes[:-1])}
    path = tmp_path / "acc.csv"
    write_accuracy_table(path, table)
    oracle = TabularOracle.from_csv(path)
    ev = Evaluator(toy, oracle, synthetic_models, v1_norm, RewardSpec())
    assert ev.evaluate(genomes[0]).accuracy == 0.6
    with pytest.raises(LookupMissError):
        ev.evaluate(genomes[-1])


def test_evaluator_needs_models_and_norm(toy, synthetic_models, v1_norm):
    with pytest.raises(ValueError):
        Evaluator(toy, SyntheticOracle(), synthetic_models, None, RewardSpec())
    with pytest.raises(KeyError):
        Evaluator(toy, SyntheticOracle(), {"gpu": synthetic_models["gpu"]}, v1_norm, RewardSpec())
    single = RewardSpec(Mode.SINGLE, target=5.0, hardware=("npu",))
    with pytest.raises(KeyError):
        Evaluator(toy, SyntheticOracle(), synthetic_models, None, single)


def test_single_mode_reward(toy, synthetic_models):
    spec = RewardSpec(Mode.SINGLE, target=5.0, hardware=("gpu",))
    ev = Evaluator(toy, SyntheticOracle(), synthetic_models, None, spec).evaluate([0] * len(toy.decisions))
    lat = ev.latency_dict()["gpu"]
    assert ev.reward == pytest.approx(ev.accuracy - 0.07 * abs(lat / 5.0 - 1), abs=1e-15)


# ---------------------------------------------------------------- configs and runs


def test_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(algorithm="annealing")
    with pytest.raises(ValueError):
        SearchConfig(budget=0)
    with pytest.raises(ValueError):
        SearchConfig(algorithm="evolution", budget=10, population=64)
    with pytest.raises(ValueError):
        SearchConfig(learning_rate=-1)
    cfg = SearchConfig("reinforce", RewardSpec(Mode.MAX), 50, 3)
    assert SearchConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_random_budget_one(toy, evaluator_for):
    run = search_random(toy, evaluator_for(toy), SearchConfig("random", budget=1, seed=9))
    assert len(run.history) == 1 and run.best == run.history[0]


def test_random_enumeration_finds_optimum(toy, evaluator_for):
    n = cardinality(toy.decisions).raw
    full = search_random(toy, evaluator_for(toy), SearchConfig("random", budget=n), enumerate_space=True)
    ex = search_exhaustive(toy, evaluator_for(toy), SearchConfig("exhaustive"))
    assert full.best.reward == ex.best.reward
    assert toy.decisions.canonical(full.best.genome) == ex.best.genome


def test_exhaustive_toy_by_hand(toy, synthetic_models, v1_norm):
    ev = Evaluator(toy, SyntheticOracle(), synthetic_models, v1_norm, RewardSpec())
    run = search_exhaustive(toy, ev, SearchConfig("exhaustive"))
    assert len(run.history) == 6
    # recompute every reward from first principles
    rewards = {}
    for g in enumerate_genomes(toy.decisions, 100, effective=True):
        graph = compile_genome(g, toy)
        acc = SyntheticOracle().accuracy(g, graph)
        lat = {h: predict(synthetic_models[h], graph) for h in v1_norm.hardware_ids}
        rewards[g] = acc - 0.07 * abs(f_avg(lat, v1_norm) - 1)
    best = max(rewards, key=lambda g: (rewards[g], [-x for x in g]))
    assert run.best.genome == best
    assert run.best.reward == pytest.approx(rewards[best], abs=1e-15)


def test_exhaustive_tie_goes_to_smaller_genome(synthetic_models, v1_norm):
    # slot 1 is masked (repeats fixed at 1), so both of its kernel values give
    # the same architecture and therefore the same reward
    stages = [{"slots": [{}, {"kernel": [3, 5]}]}] + [{}] * 5
    spec = DecisionSpec.from_dict({"defaults": FIXED, "stages": stages}, 6)
    space = SearchSpace(decisions=spec, space_id="tie")
    ev = Evaluator(space, SyntheticOracle(), synthetic_models, v1_norm, RewardSpec())
    run = search_exhaustive(space, ev, SearchConfig("exhaustive"), effective=False)
    assert len(run.history) == 2
    assert run.history[0].reward == run.history[1].reward
    assert run.history[0].genome < run.history[1].genome
    assert run.best_index == 0


def test_avg_vs_max_same_genomes(default_space, evaluator_for):
    a = search_random(default_space, evaluator_for(default_space, "avg"), SearchConfig("random", budget=40, seed=5))
    b = search_random(default_space, evaluator_for(default_space, "max"), SearchConfig("random", budget=40, seed=5))
    assert [e.genome for e in a.history] == [e.genome for e in b.history]
    assert [e.reward for e in a.history] != [e.reward for e in b.history]


def test_random_best_monotone_in_budget(default_space, evaluator_for):
    bests = [
        search_random(default_space, evaluator_for(default_space), SearchConfig("random", budget=b, seed=2)).best.reward
        for b in (1, 5, 20, 80)
    ]
    assert bests == sorted(bests)


def test_evolution_two_site_space(toy, synthetic_models, v1_norm):
    opt = search_exhaustive(toy, Evaluator(toy, SyntheticOracle(), synthetic_models, v1_norm, RewardSpec()),
                            SearchConfig("exhaustive")).best.reward
    hits = 0
    for seed in range(100):
        ev = Evaluator(toy, SyntheticOracle(), synthetic_models, v1_norm, RewardSpec())
        run = search_evolution(toy, ev, SearchConfig("evolution", budget=200, seed=seed))
        assert len(run.history) == 200
        hits += abs(run.best.reward - opt) <= 1e-6
    assert hits >= 95


def test_evolution_population_one_is_random_walk(toy, evaluator_for):
    run = search_evolution(toy, evaluator_for(toy), SearchConfig("evolution", budget=30, population=1, sample=1))
    for a, b in zip(run.history, run.history[1:]):
        assert sum(x != y for x, y in zip(a.genome, b.genome)) == 1


class _BanditEvaluator:
    """Arity-2 single site: value 0 pays 1, value 1 pays 0."""

    def __init__(self, space):
        self.space = space
        self.hardware = ()
        self.norm = None
        self.oracle = None

    def evaluate(self, genome):
        r = 1.0 if genome[3] == 0 else 0.0
        return Evaluation(tuple(genome), r, (), 1.0, r)


def test_reinforce_two_armed_bandit():
    space = toy_space(kernel=[3, 5])
    site = 3
    assert cardinality(space.decisions).raw == 2
    wins = 0
    for seed in range(100):
        run = search_reinforce(space, _BanditEvaluator(space), SearchConfig("reinforce", budget=2000, seed=seed))
        p = np.exp(run.final_logits[site]) / np.exp(run.final_logits[site]).sum()
        wins += p[0] > 0.99
    assert wins >= 95


def test_reinforce_zero_lr_keeps_uniform(toy, evaluator_for):
    run = search_reinforce(toy, evaluator_for(toy), SearchConfig("reinforce", budget=50, learning_rate=0.0))
    assert all(x == 0.0 for row in run.final_logits for x in row)


def test_reinforce_constant_reward_fixed_point():
    space = toy_space(kernel=[3, 5])

    class Const(_BanditEvaluator):
        def evaluate(self, genome):
            return Evaluation(tuple(genome), 0.5, (), 1.0, 0.5)

    run = search_reinforce(space, Const(space), SearchConfig("reinforce", budget=100, learning_rate=1.0))
    assert all(x == 0.0 for row in run.final_logits for x in row)


def test_controller_masks_padding():
    ctl = Controller(np.array([2, 3, 1]))
    p = ctl.probs()
    assert np.allclose(p[0], [0.5, 0.5, 0]) and np.allclose(p[2], [1, 0, 0])
    rng = np.random.default_rng(0)
    for _ in range(200):
        g = ctl.sample(rng)
        assert g[0] < 2 and g[1] < 3 and g[2] == 0


def test_runs_deterministic_and_parallel_invariant(default_space, synthetic_models, v1_norm):
    for algo, budget in (("random", 60), ("evolution", 80), ("reinforce", 60)):
        cfg = SearchConfig(algo, RewardSpec(Mode.MAX), budget, seed=7, population=16, sample=4)
        outs = {
            run_search(default_space, SyntheticOracle(), synthetic_models, v1_norm, cfg, workers=w).to_json()
            for w in (1, 1, 4)
        }
        assert len(outs) == 1


def test_run_json_contents(toy, synthetic_models, v1_norm, tmp_path):
    cfg = SearchConfig("evolution", RewardSpec(), 100, seed=1, population=8, sample=3)
    run = run_search(toy, SyntheticOracle(), synthetic_models, v1_norm, cfg)
    run.save(tmp_path / "run.json")
    doc = json.loads((tmp_path / "run.json").read_text())
    assert len(doc["history"]) == 100 == doc["stats"]["evaluations"]
    assert doc["best"]["reward"] == max(h["reward"] for h in doc["history"])
    assert doc["config"]["algorithm"] == "evolution" and doc["objective"] == "avg"
    assert doc["norm"] == v1_norm.to_dict() and doc["search_cost_units"] == 1
    assert doc["oracle"]["kind"] == "synthetic"
    assert doc["stats"]["unique_architectures"] <= 6
