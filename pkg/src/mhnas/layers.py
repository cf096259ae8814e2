"""Layer-level network description, MAdds/params accounting and baselines.

A :class:`LayerGraph` is a flat chain of layers. Spatial sizes use SAME
padding, so a layer with stride ``s`` maps ``H`` to ``ceil(H / s)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

CONV2D = "conv2d"
DEPTHWISE = "depthwise_conv2d"
POOL = "global_avg_pool"
FC = "fully_connected"
RESIDUAL = "residual_add"

KINDS = (CONV2D, DEPTHWISE, POOL, FC, RESIDUAL)
KIND_CODES = {k: i for i, k in enumerate(KINDS)}

# columns of the integer table handed to the numeric kernels
TABLE_COLUMNS = ("kind", "kernel", "stride", "in_ch", "out_ch", "in_res")


class StructuralError(ValueError):
    """A graph violates a structural invariant; ``index`` is the layer at fault."""

    def __init__(self, index: int, message: str):
        super().__init__(f"layer {index}: {message}")
        self.index = index


@dataclass(frozen=True)
class Layer:
    kind: str
    in_ch: int
    out_ch: int
    in_res: int
    kernel: int = 1
    stride: int = 1
    # residual_add only: number of preceding layers bypassed by the skip
    span: int = 0

    @property
    def out_res(self) -> int:
        if self.kind in (POOL, FC):
            return 1
        return -(-self.in_res // self.stride)

    def madds(self) -> int:
        out = self.out_res
        if self.kind == CONV2D:
            return out * out * self.kernel * self.kernel * self.in_ch * self.out_ch
        if self.kind == DEPTHWISE:
            return out * out * self.kernel * self.kernel * self.in_ch
        if self.kind == FC:
            return self.in_ch * self.out_ch
        return 0

    def params(self) -> int:
        if self.kind == CONV2D:
            return self.kernel * self.kernel * self.in_ch * self.out_ch
        if self.kind == DEPTHWISE:
            return self.kernel * self.kernel * self.in_ch
        if self.kind == FC:
            return self.in_ch * self.out_ch + self.out_ch
        return 0


@dataclass(frozen=True)
class ModelStats:
    madds: int
    params: int


@dataclass(frozen=True)
class LayerGraph:
    layers: tuple[Layer, ...]
    input_resolution: int = 224
    num_classes: int = 1001

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        validate_graph(self)

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def out_res(self) -> int:
        return self.layers[-1].out_res if self.layers else self.input_resolution

    @property
    def out_ch(self) -> int:
        return self.layers[-1].out_ch

    def to_table(self) -> np.ndarray:
        """Integer array with one row per layer, columns as in ``TABLE_COLUMNS``."""
        rows = [
            (KIND_CODES[l.kind], l.kernel, l.stride, l.in_ch, l.out_ch, l.in_res)
            for l in self.layers
        ]
        return np.array(rows, dtype=np.int64).reshape(len(rows), len(TABLE_COLUMNS))

    def to_dict(self) -> dict:
        return {
            "input_resolution": self.input_resolution,
            "num_classes": self.num_classes,
            "layers": [_layer_to_dict(l) for l in self.layers],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LayerGraph":
        b = GraphBuilder(doc.get("input_resolution", 224), doc.get("num_classes", 1001))
        for i, item in enumerate(doc["layers"]):
            kind = item.get("kind")
            if kind not in KIND_CODES:
                raise StructuralError(i, f"unknown layer kind {kind!r}")
            b.add(
                kind,
                in_ch=int(item["in_ch"]),
                out_ch=int(item["out_ch"]),
                kernel=int(item.get("kernel", 1)),
                stride=int(item.get("stride", 1)),
                span=int(item.get("span", 0)),
            )
        return b.build()

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "LayerGraph":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "LayerGraph":
        return cls.from_json(Path(path).read_text())


def _layer_to_dict(l: Layer) -> dict:
    d = {"kind": l.kind}
    if l.kind in (CONV2D, DEPTHWISE):
        d["kernel"] = l.kernel
        d["stride"] = l.stride
    d["in_ch"] = l.in_ch
    d["out_ch"] = l.out_ch
    if l.kind == RESIDUAL:
        d["span"] = l.span
    return d


class GraphBuilder:
    """Appends layers while tracking the running resolution."""

    def __init__(self, input_resolution: int = 224, num_classes: int = 1001):
        self.input_resolution = input_resolution
        self.num_classes = num_classes
        self.layers: list[Layer] = []
        self.res = input_resolution

    def add(self, kind, in_ch, out_ch, kernel=1, stride=1, span=0) -> Layer:
        layer = Layer(kind, in_ch, out_ch, self.res, kernel, stride, span)
        self.layers.append(layer)
        self.res = layer.out_res
        return layer

    def conv(self, in_ch, out_ch, kernel=1, stride=1):
        return self.add(CONV2D, in_ch, out_ch, kernel, stride)

    def dwconv(self, ch, kernel=3, stride=1):
        return self.add(DEPTHWISE, ch, ch, kernel, stride)

    def pool(self, ch):
        return self.add(POOL, ch, ch)

    def fc(self, in_ch, out_ch):
        return self.add(FC, in_ch, out_ch)

    def residual(self, ch, span):
        return self.add(RESIDUAL, ch, ch, span=span)

    def build(self) -> LayerGraph:
        return LayerGraph(tuple(self.layers), self.input_resolution, self.num_classes)


def validate_graph(g: LayerGraph) -> None:
    if g.input_resolution < 1:
        raise StructuralError(0, "input_resolution must be positive")
    res = g.input_resolution
    prev_ch = None
    for i, l in enumerate(g.layers):
        if l.kind not in KIND_CODES:
            raise StructuralError(i, f"unknown layer kind {l.kind!r}")
        if l.in_ch < 1 or l.out_ch < 1:
            raise StructuralError(i, "channel counts must be positive")
        if l.stride not in (1, 2):
            raise StructuralError(i, f"stride {l.stride} not in {{1, 2}}")
        if l.kernel < 1:
            raise StructuralError(i, "kernel must be positive")
        if l.in_res != res:
            raise StructuralError(i, f"input resolution {l.in_res} != {res}")
        if prev_ch is not None and l.in_ch != prev_ch:
            raise StructuralError(i, f"in_ch {l.in_ch} != previous out_ch {prev_ch}")
        if l.kind in (DEPTHWISE, POOL) and l.out_ch != l.in_ch:
            raise StructuralError(i, f"{l.kind} must keep channel count")
        if l.kind == RESIDUAL:
            _check_residual(g, i, l)
        res = l.out_res
        prev_ch = l.out_ch


def _check_residual(g: LayerGraph, i: int, l: Layer) -> None:
    if l.stride != 1 or l.out_ch != l.in_ch:
        raise StructuralError(i, "residual add needs stride 1 and matching channels")
    if not 1 <= l.span <= i:
        raise StructuralError(i, f"residual span {l.span} out of range")
    start = g.layers[i - l.span]
    if start.in_ch != l.in_ch or start.in_res != l.in_res:
        raise StructuralError(i, "residual add joins tensors of different shapes")


def concat(a: LayerGraph, b: LayerGraph) -> LayerGraph:
    """Chain ``b`` after ``a``; ``b`` must start where ``a`` ends."""
    return LayerGraph(a.layers + b.layers, a.input_resolution, a.num_classes)


def compute_madds(g: LayerGraph) -> int:
    return sum(l.madds() for l in g.layers)


def compute_params(g: LayerGraph) -> int:
    return sum(l.params() for l in g.layers)


def model_stats(g: LayerGraph) -> ModelStats:
    return ModelStats(compute_madds(g), compute_params(g))


def round_channels(c: float, divisor: int = 8, minimum: int | None = None) -> int:
    """Nearest multiple of ``divisor`` (ties round up), floored at ``minimum``."""
    minimum = divisor if minimum is None else minimum
    return max(minimum, int(math.floor(c / divisor + 0.5)) * divisor)


def apply_width_multiplier(g: LayerGraph, wm: float) -> LayerGraph:
    """Scale every channel count by ``wm`` (rounded to a multiple of 8).

    Image channels feeding the first layer and the classifier output are kept.
    """
    if wm <= 0:
        raise ValueError("wm must be positive")
    if wm == 1.0:
        return g
    b = GraphBuilder(g.input_resolution, g.num_classes)
    cur = g.layers[0].in_ch if g.layers else 0
    last = len(g.layers) - 1
    for i, l in enumerate(g.layers):
        if l.kind in (DEPTHWISE, POOL, RESIDUAL):
            out = cur
        elif i == last and l.kind == FC and l.out_ch == g.num_classes:
            out = l.out_ch
        else:
            out = round_channels(l.out_ch * wm)
        b.add(l.kind, cur, out, l.kernel, l.stride, l.span)
        cur = out
    return b.build()


_V1_BLOCKS = (
    (64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2),
    (512, 1), (512, 1), (512, 1), (512, 1), (512, 1),
    (1024, 2), (1024, 1),
)

# (expansion, out channels, repeats, first stride)
_V2_STAGES = (
    (1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
    (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1),
)


def _mobilenet_v1(wm, resolution, num_classes):
    b = GraphBuilder(resolution, num_classes)
    c = round_channels(32 * wm)
    b.conv(3, c, 3, 2)
    for out, stride in _V1_BLOCKS:
        out = round_channels(out * wm)
        b.dwconv(c, 3, stride)
        b.conv(c, out)
        c = out
    b.pool(c)
    b.fc(c, num_classes)
    return b.build()


def _mobilenet_v2(wm, resolution, num_classes):
    b = GraphBuilder(resolution, num_classes)
    c = round_channels(32 * wm)
    b.conv(3, c, 3, 2)
    for t, out, n, s in _V2_STAGES:
        out = round_channels(out * wm)
        for i in range(n):
            stride = s if i == 0 else 1
            start = len(b.layers)
            hidden = c * t
            if t != 1:
                b.conv(c, hidden)
            b.dwconv(hidden, 3, stride)
            b.conv(hidden, out)
            if stride == 1 and c == out:
                b.residual(out, len(b.layers) - start)
            c = out
    # the last conv only widens for wm > 1
    last = round_channels(1280 * wm) if wm > 1.0 else 1280
    b.conv(c, last)
    b.pool(last)
    b.fc(last, num_classes)
    return b.build()


BASELINES = {"mobilenet_v1": _mobilenet_v1, "mobilenet_v2": _mobilenet_v2}


def build_baseline(name: str, wm: float = 1.0, resolution: int = 224,
                   num_classes: int = 1001) -> LayerGraph:
    if name not in BASELINES:
        raise KeyError(f"unknown baseline {name!r}; choose from {sorted(BASELINES)}")
    if not wm > 0:
        raise ValueError("wm must be positive")
    return BASELINES[name](wm, resolution, num_classes)


def parse_baseline_ref(ref: str) -> tuple[str, float]:
    """``"mobilenet_v1@1.25"`` -> ``("mobilenet_v1", 1.25)``."""
    name, _, wm = ref.partition("@")
    return name, float(wm) if wm else 1.0


def stack_tables(graphs: Sequence[LayerGraph]) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate layer tables; returns ``(table, offsets)`` with ``len(graphs)+1`` offsets."""
    tables = [g.to_table() for g in graphs]
    offsets = np.zeros(len(tables) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(t) for t in tables])
    if tables:
        table = np.concatenate(tables, axis=0)
    else:
        table = np.zeros((0, len(TABLE_COLUMNS)), dtype=np.int64)
    return table, offsets
