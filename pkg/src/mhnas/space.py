"""Multi-hardware search space: skeleton, decision sites, genomes, constraints.

A genome is a tuple of ints, one per decision site, each an index into that
site's choice list. Sites are laid out stage by stage as
``repeats, filter_ratio`` followed by ``block_type, kernel, expansion`` for
each of the four block slots. Slots past the chosen repeat count are masked:
they stay in the genome but do not reach the compiled graph.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .layers import (
    CONV2D, DEPTHWISE, FC, GraphBuilder, LayerGraph, round_channels,
)

IBN = "ibn"
FUSED_IBN = "fused_ibn"

REPEATS = (1, 2, 3, 4)
FILTER_RATIOS = (0.5, 0.625, 0.75, 1.0, 1.25, 1.5, 2.0)
BLOCK_TYPES = (IBN, FUSED_IBN)
KERNELS = (3, 5)
EXPANSIONS = (1, 2, 3, 4, 5, 6)
SLOTS_PER_STAGE = 4

UNIVERSE = {
    "repeats": REPEATS,
    "filter_ratio": FILTER_RATIOS,
    "block_type": BLOCK_TYPES,
    "kernel": KERNELS,
    "expansion": EXPANSIONS,
}
STAGE_FIELDS = ("repeats", "filter_ratio")
SLOT_FIELDS = ("block_type", "kernel", "expansion")

Genome = tuple[int, ...]


class SpaceTooLargeError(ValueError):
    pass


# ---------------------------------------------------------------- skeleton


@dataclass(frozen=True)
class Stage:
    base_filters: int
    stride: int


# MobileNetV3-Large stage widths 16/24/40/80/112/160 lifted to multiples of 32
DEFAULT_STAGES = (
    Stage(32, 1), Stage(32, 2), Stage(64, 2), Stage(96, 2), Stage(128, 1), Stage(192, 2),
)


@dataclass(frozen=True)
class Skeleton:
    stages: tuple[Stage, ...] = DEFAULT_STAGES
    stem_filters: int = 32
    stem_kernel: int = 3
    stem_stride: int = 2
    head_filters: tuple[int, int] = (960, 1280)
    input_resolution: int = 224
    num_classes: int = 1001

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "head_filters", tuple(self.head_filters))
        for s in self.stages:
            if s.base_filters <= 0 or s.base_filters % 32:
                raise ValueError(f"stage base_filters {s.base_filters} is not a positive multiple of 32")
            if s.stride not in (1, 2):
                raise ValueError(f"stage stride {s.stride} not in {{1, 2}}")
        total = self.stem_stride * math.prod(s.stride for s in self.stages)
        if self.input_resolution % total:
            raise ValueError(
                f"total stride {total} does not divide input resolution {self.input_resolution}"
            )

    def to_dict(self) -> dict:
        return {
            "input_resolution": self.input_resolution,
            "num_classes": self.num_classes,
            "stem": {"filters": self.stem_filters, "kernel": self.stem_kernel,
                     "stride": self.stem_stride},
            "stages": [{"base_filters": s.base_filters, "stride": s.stride} for s in self.stages],
            "head": list(self.head_filters),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Skeleton":
        stem = doc.get("stem", {})
        kw = {}
        if "stages" in doc:
            kw["stages"] = tuple(Stage(int(s["base_filters"]), int(s["stride"])) for s in doc["stages"])
        if "head" in doc:
            kw["head_filters"] = tuple(int(h) for h in doc["head"])
        return cls(
            stem_filters=int(stem.get("filters", 32)),
            stem_kernel=int(stem.get("kernel", 3)),
            stem_stride=int(stem.get("stride", 2)),
            input_resolution=int(doc.get("input_resolution", 224)),
            num_classes=int(doc.get("num_classes", 1001)),
            **kw,
        )


# ---------------------------------------------------------------- decisions


@dataclass(frozen=True)
class SlotChoices:
    block_type: tuple = BLOCK_TYPES
    kernel: tuple = KERNELS
    expansion: tuple = EXPANSIONS


@dataclass(frozen=True)
class StageChoices:
    repeats: tuple = REPEATS
    filter_ratio: tuple = FILTER_RATIOS
    slots: tuple = (SlotChoices(),) * SLOTS_PER_STAGE


class Site(NamedTuple):
    index: int
    stage: int
    slot: int  # -1 for stage-level sites
    name: str
    choices: tuple

    @property
    def arity(self) -> int:
        return len(self.choices)


def _check_choices(name, values):
    values = tuple(values)
    if not values:
        raise ValueError(f"empty choice set for {name}")
    bad = [v for v in values if v not in UNIVERSE[name]]
    if bad:
        raise ValueError(f"{name} choices {bad} outside {UNIVERSE[name]}")
    if len(set(values)) != len(values):
        raise ValueError(f"duplicate {name} choices")
    return values


class DecodedBlock(NamedTuple):
    block_type: str
    kernel: int
    expansion: int


class DecodedStage(NamedTuple):
    repeats: int
    filter_ratio: float
    blocks: tuple  # DecodedBlock for active slots only


class DecisionSpec:
    """Per-site choice lists for every stage of a skeleton."""

    def __init__(self, stages: Sequence[StageChoices]):
        self.stages = tuple(stages)
        sites = []
        for s, st in enumerate(self.stages):
            if len(st.slots) != SLOTS_PER_STAGE:
                raise ValueError(f"stage {s} needs {SLOTS_PER_STAGE} slots")
            for name in STAGE_FIELDS:
                sites.append(Site(len(sites), s, -1, name, _check_choices(name, getattr(st, name))))
            for j, slot in enumerate(st.slots):
                for name in SLOT_FIELDS:
                    sites.append(Site(len(sites), s, j, name, _check_choices(name, getattr(slot, name))))
        self.sites = tuple(sites)
        self.arities = np.array([site.arity for site in sites], dtype=np.int64)
        self.arities.setflags(write=False)
        self.sites_per_stage = len(STAGE_FIELDS) + SLOTS_PER_STAGE * len(SLOT_FIELDS)
        # (offset of the stage's repeats site, its choice values) per stage
        self._repeat_sites = tuple(
            (s * self.sites_per_stage, self.sites[s * self.sites_per_stage].choices)
            for s in range(len(self.stages))
        )

    @classmethod
    def default(cls, n_stages: int = len(DEFAULT_STAGES)) -> "DecisionSpec":
        return cls([StageChoices()] * n_stages)

    def __len__(self) -> int:
        return len(self.sites)

    def __eq__(self, other):
        return isinstance(other, DecisionSpec) and self.stages == other.stages

    def __hash__(self):
        return hash(self.stages)

    def check(self, genome: Sequence[int]) -> Genome:
        arr = np.asarray(genome)
        if arr.shape != self.arities.shape:
            raise ValueError(f"genome has {arr.size} entries, space has {len(self.sites)} sites")
        bad = np.flatnonzero((arr < 0) | (arr >= self.arities))
        if bad.size:
            site = self.sites[int(bad[0])]
            raise ValueError(f"site {site.index} ({site.name}) index {arr[bad[0]]} out of range {site.arity}")
        if isinstance(genome, tuple) and all(type(g) is int for g in genome):
            return genome
        return tuple(int(x) for x in arr)

    def _stage_offset(self, s: int) -> int:
        return s * self.sites_per_stage

    def decode(self, genome: Sequence[int]) -> list[DecodedStage]:
        out = []
        for s in range(len(self.stages)):
            o = self._stage_offset(s)
            reps = self.sites[o].choices[genome[o]]
            ratio = self.sites[o + 1].choices[genome[o + 1]]
            blocks = []
            for j in range(reps):
                p = o + 2 + 3 * j
                blocks.append(DecodedBlock(*(self.sites[p + q].choices[genome[p + q]] for q in range(3))))
            out.append(DecodedStage(reps, ratio, tuple(blocks)))
        return out

    def mask(self, genome: Sequence[int]) -> np.ndarray:
        """True where a site is masked (slot beyond the stage's repeat count)."""
        m = np.zeros(len(self.sites), dtype=bool)
        for o, reps in self._repeat_sites:
            m[o + 2 + 3 * reps[genome[o]]: o + self.sites_per_stage] = True
        return m

    def canonical(self, genome: Sequence[int]) -> Genome:
        """Genome with masked sites reset to 0; equal canonical forms compile identically."""
        out = list(genome)
        for o, reps in self._repeat_sites:
            lo = o + 2 + 3 * reps[out[o]]
            hi = o + self.sites_per_stage
            if lo < hi:
                out[lo:hi] = [0] * (hi - lo)
        return tuple(out)

    def to_dict(self) -> dict:
        return {"stages": [_stage_choices_to_dict(st) for st in self.stages]}

    @classmethod
    def from_dict(cls, doc: dict, n_stages: int) -> "DecisionSpec":
        defaults = {k: tuple(doc.get("defaults", {}).get(k, UNIVERSE[k])) for k in UNIVERSE}
        overrides = doc.get("stages", [{}] * n_stages)
        if len(overrides) != n_stages:
            raise ValueError(f"decisions list {len(overrides)} stages, skeleton has {n_stages}")
        stages = []
        for ov in overrides:
            stage_level = {k: tuple(ov.get(k, defaults[k])) for k in UNIVERSE}
            slots = []
            slot_ov = list(ov.get("slots", ()))
            if len(slot_ov) > SLOTS_PER_STAGE:
                raise ValueError(f"at most {SLOTS_PER_STAGE} slot overrides per stage")
            slot_ov += [{}] * (SLOTS_PER_STAGE - len(slot_ov))
            for so in slot_ov:
                slots.append(SlotChoices(**{k: tuple(so.get(k, stage_level[k])) for k in SLOT_FIELDS}))
            stages.append(StageChoices(stage_level["repeats"], stage_level["filter_ratio"], tuple(slots)))
        return cls(stages)


def _stage_choices_to_dict(st: StageChoices) -> dict:
    return {
        "repeats": list(st.repeats),
        "filter_ratio": list(st.filter_ratio),
        "slots": [
            {k: list(getattr(sl, k)) for k in SLOT_FIELDS} for sl in st.slots
        ],
    }


# ---------------------------------------------------------------- hardware


@dataclass(frozen=True)
class HardwareProfile:
    id: str
    max_kernel: int = 7
    requires_filter_multiple: int = 0
    forbidden_ops: frozenset = frozenset()
    cost_model_ref: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "forbidden_ops", frozenset(self.forbidden_ops))
        if self.max_kernel < 1:
            raise ValueError("max_kernel must be >= 1")
        if self.requires_filter_multiple not in (0, 8, 16, 32):
            raise ValueError("requires_filter_multiple must be one of 0, 8, 16, 32")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "max_kernel": self.max_kernel,
            "requires_filter_multiple": self.requires_filter_multiple,
            "forbidden_ops": sorted(self.forbidden_ops),
            "cost_model_ref": self.cost_model_ref,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "HardwareProfile":
        return cls(
            doc["id"],
            int(doc.get("max_kernel", 7)),
            int(doc.get("requires_filter_multiple", 0)),
            frozenset(doc.get("forbidden_ops", ())),
            doc.get("cost_model_ref"),
        )


# The five Pixel4 targets. Squeeze-excite and hard-swish are EdgeTPU blockers;
# the DSP wants kernels <= 5 and channel counts in multiples of 32.
PIXEL4_PROFILES = (
    HardwareProfile("cpu_float", cost_model_ref="synthetic:cpu_float"),
    HardwareProfile("cpu_uint8", cost_model_ref="synthetic:cpu_uint8"),
    HardwareProfile("gpu", cost_model_ref="synthetic:gpu"),
    HardwareProfile("dsp", max_kernel=5, requires_filter_multiple=32,
                    cost_model_ref="synthetic:dsp"),
    HardwareProfile("edgetpu", forbidden_ops=frozenset({"squeeze_excite", "hard_swish"}),
                    cost_model_ref="synthetic:edgetpu"),
)


class Violation(NamedTuple):
    profile: str
    constraint: str
    layer: int
    detail: str


@dataclass(frozen=True)
class Verdict:
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_graph_on(g: LayerGraph, profiles: Sequence[HardwareProfile]) -> Verdict:
    """Check a graph against every profile; violations are returned, never raised."""
    found = []
    last = len(g.layers) - 1
    for p in profiles:
        for i, l in enumerate(g.layers):
            if l.kind in p.forbidden_ops:
                found.append(Violation(p.id, "forbidden_op", i, l.kind))
            if l.kind in (CONV2D, DEPTHWISE) and l.kernel > p.max_kernel:
                found.append(Violation(p.id, "max_kernel", i,
                                       f"{l.kernel}x{l.kernel} > {p.max_kernel}x{p.max_kernel}"))
            classifier = i == last and l.kind == FC
            searched = l.kind in (CONV2D, DEPTHWISE) or (l.kind == FC and not classifier)
            m = p.requires_filter_multiple
            if m and searched and l.out_ch % m:
                found.append(Violation(p.id, "filter_multiple", i, f"{l.out_ch} channels not a multiple of {m}"))
    return Verdict(tuple(found))


# ---------------------------------------------------------------- space


@dataclass(frozen=True)
class SearchSpace:
    skeleton: Skeleton = field(default_factory=Skeleton)
    decisions: DecisionSpec = field(default_factory=DecisionSpec.default)
    profiles: tuple = PIXEL4_PROFILES
    space_id: str = "multi_hw_pixel4"

    def __post_init__(self):
        object.__setattr__(self, "profiles", tuple(self.profiles))
        if len(self.decisions.stages) != len(self.skeleton.stages):
            raise ValueError("decision spec and skeleton disagree on stage count")

    @property
    def hardware_ids(self) -> tuple[str, ...]:
        return tuple(p.id for p in self.profiles)

    def compile(self, genome: Sequence[int]) -> LayerGraph:
        return compile_genome(genome, self)

    def to_dict(self) -> dict:
        return {
            "space_id": self.space_id,
            "skeleton": self.skeleton.to_dict(),
            "decisions": self.decisions.to_dict(),
            "profiles": [p.to_dict() for p in self.profiles],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SearchSpace":
        skeleton = Skeleton.from_dict(doc.get("skeleton", {}))
        decisions = DecisionSpec.from_dict(doc.get("decisions", {}), len(skeleton.stages))
        profiles = doc.get("profiles", "pixel4")
        if profiles == "pixel4":
            profiles = PIXEL4_PROFILES
        else:
            profiles = tuple(HardwareProfile.from_dict(p) for p in profiles)
        return cls(skeleton, decisions, profiles, doc.get("space_id", "space"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SearchSpace":
        return cls.from_dict(json.loads(Path(path).read_text()))


def stage_filters(ratio: float, base: int) -> int:
    return round_channels(ratio * base, 32, 32)


def compile_genome(genome: Sequence[int], space: SearchSpace) -> LayerGraph:
    sk = space.skeleton
    genome = space.decisions.check(genome)
    b = GraphBuilder(sk.input_resolution, sk.num_classes)
    b.conv(3, sk.stem_filters, sk.stem_kernel, sk.stem_stride)
    c = sk.stem_filters
    for stage, dec in zip(sk.stages, space.decisions.decode(genome)):
        out = stage_filters(dec.filter_ratio, stage.base_filters)
        for j, blk in enumerate(dec.blocks):
            stride = stage.stride if j == 0 else 1
            start = len(b.layers)
            hidden = c * blk.expansion
            if blk.block_type == IBN:
                if blk.expansion != 1:
                    b.conv(c, hidden)
                b.dwconv(hidden, blk.kernel, stride)
            else:
                b.conv(c, hidden, blk.kernel, stride)
            b.conv(hidden, out)
            if stride == 1 and c == out:
                b.residual(out, len(b.layers) - start)
            c = out
    h1, h2 = sk.head_filters
    b.conv(c, h1)
    b.pool(h1)
    b.fc(h1, h2)
    b.fc(h2, sk.num_classes)
    return b.build()


def validate(genome: Sequence[int], space: SearchSpace,
             profiles: Sequence[HardwareProfile] | None = None) -> Verdict:
    profiles = space.profiles if profiles is None else profiles
    return validate_graph_on(compile_genome(genome, space), profiles)


# ---------------------------------------------------------------- sampling


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_uniform(spec: DecisionSpec, seed) -> Genome:
    rng = _rng(seed)
    return tuple(int(x) for x in rng.integers(0, spec.arities))


def mutable_sites(spec: DecisionSpec, genome: Sequence[int]) -> np.ndarray:
    return np.flatnonzero(~spec.mask(genome) & (spec.arities > 1))


def mutate(spec: DecisionSpec, genome: Sequence[int], seed) -> Genome:
    """Resample exactly one unmasked site to a different value."""
    rng = _rng(seed)
    sites = mutable_sites(spec, genome)
    if sites.size == 0:
        raise ValueError("genome has no mutable site")
    i = int(sites[rng.integers(sites.size)])
    new = int(rng.integers(spec.arities[i] - 1))
    if new >= genome[i]:
        new += 1
    out = list(genome)
    out[i] = new
    return tuple(out)


class Cardinality(NamedTuple):
    raw: int
    effective: int


def cardinality(spec: DecisionSpec) -> Cardinality:
    raw = math.prod(int(a) for a in spec.arities)
    eff = 1
    for s, st in enumerate(spec.stages):
        o = s * spec.sites_per_stage
        slot_ar = [
            math.prod(spec.sites[o + 2 + 3 * j + q].arity for q in range(3))
            for j in range(SLOTS_PER_STAGE)
        ]
        eff *= spec.sites[o + 1].arity * sum(math.prod(slot_ar[:r]) for r in st.repeats)
    return Cardinality(raw, eff)


def _stage_options(spec: DecisionSpec, s: int, effective: bool) -> list[tuple]:
    o = s * spec.sites_per_stage
    ranges = [range(spec.sites[o + k].arity) for k in range(spec.sites_per_stage)]
    opts = []
    for combo in itertools.product(*ranges):
        if effective:
            reps = spec.sites[o].choices[combo[0]]
            if any(combo[2 + 3 * reps:]):
                continue
        opts.append(combo)
    return opts


def enumerate_genomes(spec: DecisionSpec, limit: int, effective: bool = False) -> Iterator[Genome]:
    """Every genome once, in lexicographic order.

    With ``effective=True`` only canonical genomes (masked sites at 0) are
    produced, one per distinct compiled architecture.
    """
    card = cardinality(spec)
    n = card.effective if effective else card.raw
    if n > limit:
        raise SpaceTooLargeError(f"space has {n} genomes, limit is {limit}")
    per_stage = [_stage_options(spec, s, effective) for s in range(len(spec.stages))]
    for parts in itertools.product(*per_stage):
        yield tuple(itertools.chain.from_iterable(parts))


def genome_key(genome: Sequence[int]) -> str:
    return "-".join(str(int(g)) for g in genome)


def parse_genome_key(key: str) -> Genome:
    return tuple(int(x) for x in key.split("-")) if key else ()


def genome_to_dict(space: SearchSpace, genome: Sequence[int]) -> dict:
    return {"space_id": space.space_id, "choices": [int(g) for g in genome]}


def genome_from_dict(space: SearchSpace, doc: dict) -> Genome:
    if doc.get("space_id") not in (None, space.space_id):
        raise ValueError(f"genome belongs to space {doc['space_id']!r}, not {space.space_id!r}")
    return space.decisions.check(doc["choices"])
