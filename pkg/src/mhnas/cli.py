"""Command-line entry point: ``mhnas <command> ...``.

Failures print ``{"error": ..., "message": ...}`` on stderr and exit 1.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import hardware
from .latency import (
    CostModel, calibration_report, fit, graphs_from_dir, predict, read_samples, write_samples,
)
from .layers import LayerGraph, build_baseline, model_stats, parse_baseline_ref
from .metrics import DEFAULT_BETA, NormFactors, RewardSpec, f_avg, f_max, norm_factors_from_reference
from .reporting import (
    comparison_table, emit_tradeoff_csv, pareto_front, per_run_table, read_points,
    search_cost_table, write_points,
)
from .search import SearchConfig, SyntheticOracle, TabularOracle, load_run, run_search
from .space import (
    HardwareProfile, SearchSpace, cardinality, genome_from_dict, genome_key, genome_to_dict, sample_uniform,
    validate_graph_on,
)

BUILTIN_SPACES = ("default_space", "multi_hw_pixel4", "fixture_blocks", "fixture_depth", "fixture_mixed")
DEFAULT_MODELS = [f"synthetic:{h}" for h in hardware.SYNTHETIC_HARDWARE]


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def load_space(ref: str) -> SearchSpace:
    name = ref.removesuffix(".json")
    if name in BUILTIN_SPACES or name == "default":
        name = "default_space" if name in ("default", "multi_hw_pixel4") else name
        text = resources.files("mhnas").joinpath(f"data/{name}.json").read_text()
        return SearchSpace.from_dict(json.loads(text))
    return SearchSpace.load(ref)


def load_models(refs, space: SearchSpace | None = None, base_dir=None) -> dict[str, CostModel]:
    """Cost models from paths or ``synthetic:<hw>`` refs; defaults to the space's profiles."""
    if not refs:
        if space is not None and all(p.cost_model_ref for p in space.profiles):
            refs = [p.cost_model_ref for p in space.profiles]
        else:
            refs = DEFAULT_MODELS
    models = {}
    for ref in refs:
        m = hardware.resolve_cost_model(ref, base_dir)
        models[m.hardware_id] = m
    return models


def load_arch(path, space_ref=None) -> LayerGraph:
    """A LayerGraph JSON, or a genome JSON compiled in ``space_ref``."""
    doc = json.loads(Path(path).read_text())
    if "choices" in doc:
        if space_ref is None:
            sid = doc.get("space_id")
            space_ref = sid if sid in BUILTIN_SPACES else "default"
        space = load_space(space_ref)
        return space.compile(genome_from_dict(space, doc))
    return LayerGraph.from_dict(doc)


def _norm(args, models) -> NormFactors:
    if getattr(args, "norm", None):
        return NormFactors.load(args.norm)
    name, wm = parse_baseline_ref(args.reference)
    return norm_factors_from_reference(build_baseline(name, wm), models, label=args.reference)


# ---------------------------------------------------------------- commands


def cmd_baseline(args):
    g = build_baseline(args.name, args.wm, args.resolution)
    if args.out:
        g.save(args.out)
    s = model_stats(g)
    out = {"name": args.name, "wm": args.wm, "resolution": args.resolution, "layers": len(g)}
    if args.stats or not args.out:
        out.update(madds=s.madds, params=s.params, madds_m=s.madds / 1e6, params_m=s.params / 1e6)
    _emit(out)


def cmd_validate(args):
    g = load_arch(args.arch, args.space)
    if args.profiles:
        doc = json.loads(Path(args.profiles).read_text())
        doc = doc.get("profiles", doc) if isinstance(doc, dict) else doc
        profiles = [HardwareProfile.from_dict(p) for p in doc]
    else:
        profiles = list(load_space(args.space or "default").profiles)
    v = validate_graph_on(g, profiles)
    _emit({"ok": v.ok, "violations": [v_._asdict() for v_ in v.violations]})
    if args.strict and not v.ok:
        sys.exit(1)


def cmd_make_samples(args):
    space = load_space(args.space)
    out_dir = Path(args.graphs_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    graphs = {}
    rng_seed = args.seed
    rng = np.random.default_rng(rng_seed)
    for i in range(args.n):
        g = space.compile(sample_uniform(space.decisions, rng))
        arch_id = f"arch{i:05d}"
        g.save(out_dir / f"{arch_id}.json")
        graphs[arch_id] = g
    samples = []
    for k, hw in enumerate(args.hardware or hardware.SYNTHETIC_HARDWARE):
        samples += hardware.make_samples(hw, graphs, args.noise, seed=rng_seed + 1 + k)
    write_samples(args.out, samples)
    _emit({"architectures": len(graphs), "samples": len(samples), "out": args.out})


def cmd_fit(args):
    samples = [s for s in read_samples(args.samples) if s.hardware_id == args.hardware]
    if not samples:
        raise ValueError(f"no samples for hardware {args.hardware!r} in {args.samples}")
    m = fit(samples, graphs_from_dir(args.graphs), holdout=args.holdout, seed=args.seed)
    m.save(args.out)
    c = m.calibration
    _emit({"hardware_id": m.hardware_id, "pearson_r": c.pearson_r, "rmse": c.rmse,
           "n_train": c.n_train, "n_test": c.n_test, "out": args.out})


def cmd_calibration(args):
    m = hardware.resolve_cost_model(args.model)
    samples = [s for s in read_samples(args.samples) if s.hardware_id == m.hardware_id]
    rep = calibration_report(m, samples, graphs_from_dir(args.graphs))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("true_ms,predicted_ms\n")
            for t, p in rep.rows():
                fh.write(f"{t!r},{p!r}\n")
    _emit({"hardware_id": rep.hardware_id, "pearson_r": rep.pearson_r, "rmse": rep.rmse,
           "degenerate": rep.degenerate, "n": len(rep.true_ms)})


def cmd_predict(args):
    g = load_arch(args.arch, args.space)
    models = load_models(args.model)
    _emit({"latency_ms": {h: predict(m, g) for h, m in models.items()}})


def cmd_norm_factors(args):
    models = load_models(args.models)
    nf = _norm(args, models)
    if args.out:
        nf.save(args.out)
    _emit(nf.to_dict())


def cmd_metrics(args):
    g = load_arch(args.arch, args.space)
    models = load_models(args.models)
    nf = _norm(args, models)
    lat = {h: predict(models[h], g) for h in nf.hardware_ids}
    s = model_stats(g)
    _emit({"latency_ms": lat, "f_avg": f_avg(lat, nf), "f_max": f_max(lat, nf),
           "madds": s.madds, "params": s.params, "reference": nf.reference})


def _oracle(spec: str):
    if spec == "synthetic":
        return SyntheticOracle()
    if spec.startswith("tabular:"):
        return TabularOracle.from_csv(spec.split(":", 1)[1])
    raise ValueError(f"unknown oracle {spec!r}; use synthetic or tabular:<csv>")


def cmd_search(args):
    space = load_space(args.space)
    models = load_models(args.models, space)
    reward = RewardSpec.parse(args.objective, args.beta)
    norm = None if reward.mode.value == "single" else _norm(args, models)
    cfg = SearchConfig(
        algorithm=args.algo, reward=reward, budget=args.budget, seed=args.seed,
        population=args.population, sample=args.sample, learning_rate=args.learning_rate,
        baseline_momentum=args.baseline_momentum, limit=args.limit,
    )
    t0 = time.perf_counter()
    run = run_search(space, _oracle(args.oracle), models, norm, cfg, workers=args.workers)
    elapsed = time.perf_counter() - t0
    run.save(args.out)
    best = run.best
    print(f"{args.algo} {reward.describe()}: {len(run.history)} evaluations in {elapsed:.2f}s",
          file=sys.stderr)
    _emit({"out": args.out, "best_reward": best.reward, "best_accuracy": best.accuracy,
           "best_f": best.f_value, "best_genome": genome_key(best.genome)})
    if args.best_arch:
        Path(args.best_arch).write_text(json.dumps(genome_to_dict(space, best.genome)) + "\n")


def cmd_pareto(args):
    points = read_points(args.points)
    front = pareto_front(points, args.latency_key)
    if args.out:
        write_points(args.out, list(front.points))
    _emit({"latency_key": args.latency_key, "front": front.model_ids})


def cmd_report(args):
    points = read_points(args.points)
    norm = NormFactors.load(args.norm) if args.norm else None
    table = comparison_table(points, norm)
    text = table.render_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_tradeoff(args):
    n = emit_tradeoff_csv(args.out, read_points(args.points), args.x_key, args.y_key)
    _emit({"rows": n, "out": args.out})


def cmd_report_runs(args):
    runs = [load_run(p) for p in args.runs]
    models = load_models(args.models)
    norm = _norm(args, models)
    cost = search_cost_table(runs, norm)
    text = cost.render_csv()
    if args.per_run:
        Path(args.per_run).write_text(per_run_table(runs, norm).render_csv())
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_space(args):
    space = load_space(args.name)
    if args.out:
        space.save(args.out)
    c = cardinality(space.decisions)
    _emit({"space_id": space.space_id, "sites": len(space.decisions),
           "cardinality_raw": str(c.raw), "cardinality_effective": str(c.effective)})


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mhnas", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("baseline", help="MobileNet baseline stats / graph")
    s.add_argument("--name", required=True)
    s.add_argument("--wm", type=float, default=1.0)
    s.add_argument("--resolution", type=int, default=224)
    s.add_argument("--stats", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("validate", help="check an architecture against hardware profiles")
    s.add_argument("--arch", required=True)
    s.add_argument("--profiles")
    s.add_argument("--space")
    s.add_argument("--strict", action="store_true", help="exit 1 on violations")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("make-samples", help="synthetic (architecture, latency) samples")
    s.add_argument("--space", default="default")
    s.add_argument("--hardware", nargs="*")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--graphs-dir", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_samples)

    s = sub.add_parser("fit-cost-model", help="fit a linear latency model")
    s.add_argument("--samples", required=True)
    s.add_argument("--graphs", required=True)
    s.add_argument("--hardware", required=True)
    s.add_argument("--holdout", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("calibration", help="true vs predicted latency pairs")
    s.add_argument("--model", required=True)
    s.add_argument("--samples", required=True)
    s.add_argument("--graphs", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_calibration)

    s = sub.add_parser("predict", help="predict latency of an architecture")
    s.add_argument("--arch", required=True)
    s.add_argument("--model", nargs="*")
    s.add_argument("--space")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("norm-factors", help="normalization factors from a reference model")
    s.add_argument("--reference", default="mobilenet_v1@1.0")
    s.add_argument("--models", nargs="*")
    s.add_argument("--out")
    s.set_defaults(func=cmd_norm_factors)

    s = sub.add_parser("metrics", help="normalized avg/max latency of an architecture")
    s.add_argument("--arch", required=True)
    s.add_argument("--models", nargs="*")
    s.add_argument("--norm")
    s.add_argument("--reference", default="mobilenet_v1@1.0")
    s.add_argument("--space")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("search", help="run an architecture search")
    s.add_argument("--space", default="default")
    s.add_argument("--oracle", default="synthetic")
    s.add_argument("--algo", default="evolution", choices=("random", "evolution", "reinforce", "exhaustive"))
    s.add_argument("--objective", default="avg", help="avg | max | single:<hw>:<L0>")
    s.add_argument("--beta", type=float, default=DEFAULT_BETA)
    s.add_argument("--budget", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--population", type=int, default=64)
    s.add_argument("--sample", type=int, default=16)
    s.add_argument("--learning-rate", type=float, default=0.05)
    s.add_argument("--baseline-momentum", type=float, default=0.9)
    s.add_argument("--limit", type=int, default=50_000)
    s.add_argument("--models", nargs="*")
    s.add_argument("--norm")
    s.add_argument("--reference", default="mobilenet_v1@1.0")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--best-arch", help="also write the best genome JSON here")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("pareto", help="accuracy/latency Pareto front of a points CSV")
    s.add_argument("--points", required=True)
    s.add_argument("--latency-key", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_pareto)

    s = sub.add_parser("report", help="model comparison CSV with best values starred")
    s.add_argument("--points", required=True)
    s.add_argument("--norm")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("tradeoff", help="model_id,series,x,y CSV for plotting")
    s.add_argument("--points", required=True)
    s.add_argument("--x-key", required=True)
    s.add_argument("--y-key", default="accuracy")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_tradeoff)

    s = sub.add_parser("report-runs", help="single- vs multi-hardware search cost table")
    s.add_argument("--runs", nargs="+", required=True)
    s.add_argument("--models", nargs="*")
    s.add_argument("--norm")
    s.add_argument("--reference", default="mobilenet_v1@1.0")
    s.add_argument("--per-run", help="also write one row per run here")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report_runs)

    s = sub.add_parser("space", help="describe or export a search space")
    s.add_argument("--name", default="default")
    s.add_argument("--out")
    s.set_defaults(func=cmd_space)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001 - every failure becomes a structured error
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
