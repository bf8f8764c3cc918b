"""Network description format, parsing, validation and residual fusion.

A network document is JSON::

    {"name": "mnist",
     "layers": [{"id": "in", "kind": "Input", "in_shape": [28, 28, 1]},
                {"id": "c1", "kind": "Conv", "filters": 8, "kernel": 3,
                 "stride": 1, "padding": 1}, ...],
     "connections": [["in", "c1"], ...]}

Only hyperparameters are described; weights never enter the cost models.
"""

from __future__ import annotations

import heapq
import json
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

from .exceptions import (
    CyclicGraph,
    DanglingConnection,
    DegenerateShape,
    MalformedDocument,
    ShapeMismatch,
    UnsupportedTopology,
)

Shape = tuple[int, int, int]


class LayerKind(str, Enum):
    CONV = "Conv"
    MAX_POOL = "MaxPool"
    AVG_POOL = "AvgPool"
    FULLY_CONNECTED = "FullyConnected"
    RESIDUAL_ADD = "ResidualAdd"
    INPUT = "Input"
    OUTPUT = "Output"

    @property
    def is_pool(self) -> bool:
        return self in (LayerKind.MAX_POOL, LayerKind.AVG_POOL)

    @property
    def is_windowed(self) -> bool:
        return self is LayerKind.CONV or self.is_pool

    @property
    def is_costable(self) -> bool:
        return self not in (LayerKind.INPUT, LayerKind.OUTPUT)


LAYER_FIELDS = ("id", "kind", "filters", "kernel", "stride", "padding",
                "in_shape", "fc_in", "fc_out")
_WINDOW_FIELDS = ("kernel", "stride", "padding")
_FC_FIELDS = ("fc_in", "fc_out")


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: LayerKind
    filters: int | None = None
    kernel: int | None = None
    stride: int | None = None
    padding: int | None = None
    in_shape: Shape | None = None
    fc_in: int | None = None
    fc_out: int | None = None

    @property
    def in_height(self) -> int:
        return self._shape()[0]

    @property
    def in_width(self) -> int:
        return self._shape()[1]

    @property
    def in_channels(self) -> int:
        return self._shape()[2]

    def _shape(self) -> Shape:
        if self.in_shape is None:
            raise ShapeMismatch(f"layer {self.id!r} has no input shape")
        return self.in_shape

    def output_shape(self) -> Shape:
        """Shape of the tensor this layer emits."""
        kind = self.kind
        if kind.is_windowed:
            return layer_output_shape(self)
        if kind is LayerKind.FULLY_CONNECTED:
            return (1, 1, int(self.fc_out))
        return self._shape()


def layer_output_shape(layer: LayerSpec) -> Shape:
    """Output (height, width, channels) of a Conv or pooling layer."""
    if not layer.kind.is_windowed:
        raise ValueError(f"layer {layer.id!r} ({layer.kind.value}) has no window")
    h, w, c = layer._shape()
    k, s, p = layer.kernel, layer.stride, layer.padding
    if k is None or s is None or p is None:
        raise MalformedDocument(f"layer {layer.id!r} is missing kernel/stride/padding")
    out_h = (h + 2 * p - k) // s + 1
    out_w = (w + 2 * p - k) // s + 1
    if out_h < 1 or out_w < 1:
        raise DegenerateShape(
            f"layer {layer.id!r}: {h}x{w} input with K={k}, S={s}, P={p} "
            f"gives {out_h}x{out_w} output")
    channels = layer.filters if layer.kind is LayerKind.CONV else c
    return (out_h, out_w, int(channels))


@dataclass(frozen=True)
class NetworkGraph:
    """A validated CNN description with layers in topological order.

    ``residual_blocks`` maps each ResidualAdd id to the layers that lie on
    its two branches (the add itself included, the fork point excluded).
    """

    name: str
    layers: tuple[LayerSpec, ...]
    connections: tuple[tuple[str, str], ...]
    residual_blocks: tuple[tuple[str, tuple[str, ...]], ...] = ()
    _index: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {l.id: i for i, l in enumerate(self.layers)})

    def layer(self, layer_id: str) -> LayerSpec:
        return self.layers[self._index[layer_id]]

    def position(self, layer_id: str) -> int:
        return self._index[layer_id]

    def __contains__(self, layer_id) -> bool:
        return layer_id in self._index

    def predecessors(self, layer_id: str) -> list[str]:
        return [s for s, d in self.connections if d == layer_id]

    def successors(self, layer_id: str) -> list[str]:
        return [d for s, d in self.connections if s == layer_id]

    @property
    def input_layer(self) -> LayerSpec:
        return next(l for l in self.layers if l.kind is LayerKind.INPUT)

    @property
    def conv_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind is LayerKind.CONV]

    @property
    def fc_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind is LayerKind.FULLY_CONNECTED]

    @property
    def costable_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind.is_costable]

    def block_of(self, layer_id: str) -> str | None:
        for add_id, members in self.residual_blocks:
            if layer_id in members:
                return add_id
        return None

    def with_filters(self, filters: Mapping[str, int]) -> "NetworkGraph":
        """Copy with some Conv filter counts replaced and shapes re-propagated."""
        layers = []
        for l in self.layers:
            if l.id in filters:
                if l.kind is not LayerKind.CONV:
                    raise ValueError(f"{l.id!r} is not a Conv layer")
                l = replace(l, filters=int(filters[l.id]))
            layers.append(l)
        layers = [replace(l, in_shape=None, fc_in=None)
                  if l.kind is not LayerKind.INPUT else l for l in layers]
        g = replace(self, layers=tuple(layers))
        return _propagate_shapes(g, strict=False)


# ---------------------------------------------------------------------------
# parsing

def _require_int(value, what: str, layer_id: str, minimum: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise MalformedDocument(f"layer {layer_id!r}: {what} must be an integer, got {value!r}")
    if value < minimum:
        raise MalformedDocument(f"layer {layer_id!r}: {what} must be >= {minimum}, got {value}")
    return value


def _layer_from_dict(raw: Any) -> LayerSpec:
    if not isinstance(raw, dict):
        raise MalformedDocument(f"layer entries must be objects, got {raw!r}")
    unknown = set(raw) - set(LAYER_FIELDS)
    if unknown:
        raise MalformedDocument(f"unknown layer field(s): {sorted(unknown)}")
    if "id" not in raw or "kind" not in raw:
        raise MalformedDocument(f"layer entry needs 'id' and 'kind': {raw!r}")
    lid = raw["id"]
    if not isinstance(lid, str) or not lid:
        raise MalformedDocument(f"layer id must be a non-empty string, got {lid!r}")
    try:
        kind = LayerKind(raw["kind"])
    except ValueError:
        raise MalformedDocument(f"layer {lid!r}: unknown kind {raw['kind']!r}") from None

    present = {k for k, v in raw.items() if v is not None}
    if kind.is_windowed:
        bad = present & set(_FC_FIELDS)
    elif kind is LayerKind.FULLY_CONNECTED:
        bad = present & (set(_WINDOW_FIELDS) | {"filters"})
    else:
        bad = present & (set(_WINDOW_FIELDS) | set(_FC_FIELDS) | {"filters"})
    if kind.is_pool:
        bad |= present & {"filters"}
    if bad:
        raise MalformedDocument(f"layer {lid!r} ({kind.value}) must not set {sorted(bad)}")

    in_shape = raw.get("in_shape")
    if in_shape is not None:
        if not isinstance(in_shape, (list, tuple)) or len(in_shape) != 3:
            raise MalformedDocument(f"layer {lid!r}: in_shape must be [h, w, c]")
        in_shape = tuple(_require_int(v, "in_shape", lid, 1) for v in in_shape)
    elif kind is LayerKind.INPUT:
        raise MalformedDocument(f"Input layer {lid!r} needs in_shape")

    kw: dict[str, Any] = {"in_shape": in_shape}
    if kind is LayerKind.CONV:
        if raw.get("filters") is None or raw.get("kernel") is None:
            raise MalformedDocument(f"Conv layer {lid!r} needs filters and kernel")
        kw["filters"] = _require_int(raw["filters"], "filters", lid, 1)
    if kind.is_windowed:
        if raw.get("kernel") is None:
            raise MalformedDocument(f"layer {lid!r} needs a kernel size")
        kw["kernel"] = _require_int(raw["kernel"], "kernel", lid, 1)
        default_stride = 1 if kind is LayerKind.CONV else kw["kernel"]
        stride = raw.get("stride")
        kw["stride"] = default_stride if stride is None else _require_int(stride, "stride", lid, 1)
        padding = raw.get("padding")
        kw["padding"] = 0 if padding is None else _require_int(padding, "padding", lid, 0)
    if kind is LayerKind.FULLY_CONNECTED:
        if raw.get("fc_out") is None:
            raise MalformedDocument(f"FullyConnected layer {lid!r} needs fc_out")
        kw["fc_out"] = _require_int(raw["fc_out"], "fc_out", lid, 1)
        if raw.get("fc_in") is not None:
            kw["fc_in"] = _require_int(raw["fc_in"], "fc_in", lid, 1)
    return LayerSpec(id=lid, kind=kind, **kw)


def _topological_order(ids: list[str], edges: list[tuple[str, str]]) -> list[str]:
    # Kahn's algorithm; ties broken by document order so output is stable
    order_of = {lid: i for i, lid in enumerate(ids)}
    indeg = {lid: 0 for lid in ids}
    succ: dict[str, list[str]] = {lid: [] for lid in ids}
    for s, d in edges:
        indeg[d] += 1
        succ[s].append(d)
    ready = [(order_of[l], l) for l in ids if indeg[l] == 0]
    heapq.heapify(ready)
    out = []
    while ready:
        _, lid = heapq.heappop(ready)
        out.append(lid)
        for d in succ[lid]:
            indeg[d] -= 1
            if indeg[d] == 0:
                heapq.heappush(ready, (order_of[d], d))
    if len(out) != len(ids):
        stuck = sorted(l for l in ids if indeg[l] > 0)
        raise CyclicGraph(f"connection table contains a cycle through {stuck}")
    return out


def parse_network(source: str | bytes | os.PathLike | Mapping) -> NetworkGraph:
    """Parse and validate a network document.

    ``source`` may be a JSON string, a path to a JSON file, or an already
    decoded mapping. Convergence points on ordinary layers are rewritten into
    explicit ResidualAdd nodes before validation.
    """
    doc = _load_document(source)
    if not isinstance(doc, dict):
        raise MalformedDocument("network document must be a JSON object")
    unknown = set(doc) - {"name", "layers", "connections"}
    if unknown:
        raise MalformedDocument(f"unknown top-level field(s): {sorted(unknown)}")
    if "layers" not in doc or "connections" not in doc:
        raise MalformedDocument("network document needs 'layers' and 'connections'")
    name = doc.get("name", "network")
    if not isinstance(name, str):
        raise MalformedDocument("'name' must be a string")
    if not isinstance(doc["layers"], list) or not isinstance(doc["connections"], list):
        raise MalformedDocument("'layers' and 'connections' must be lists")

    layers = [_layer_from_dict(raw) for raw in doc["layers"]]
    ids = [l.id for l in layers]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise MalformedDocument(f"duplicate layer id(s): {dup}")

    edges = []
    for pair in doc["connections"]:
        if (not isinstance(pair, (list, tuple)) or len(pair) != 2
                or not all(isinstance(x, str) for x in pair)):
            raise MalformedDocument(f"connections must be [src, dst] pairs, got {pair!r}")
        src, dst = pair
        for end in (src, dst):
            if end not in ids:
                raise DanglingConnection(f"connection {src!r} -> {dst!r} names unknown layer {end!r}")
        if src == dst:
            raise CyclicGraph(f"self-loop on {src!r}")
        edges.append((src, dst))
    if len(set(edges)) != len(edges):
        raise MalformedDocument("duplicate connection in connection table")

    order = _topological_order(ids, edges)
    by_id = {l.id: l for l in layers}
    g = NetworkGraph(name=name, layers=tuple(by_id[i] for i in order),
                     connections=tuple(edges))
    g = fuse_residual_blocks(g)
    _check_structure(g)
    return _propagate_shapes(g, strict=True)


def _load_document(source) -> Any:
    if isinstance(source, Mapping):
        return source
    if isinstance(source, os.PathLike):
        source = Path(source).read_text()
    elif isinstance(source, bytes):
        source = source.decode()
    elif isinstance(source, str) and not source.lstrip().startswith("{"):
        source = Path(source).read_text()
    try:
        return json.loads(source)
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"invalid JSON: {exc}") from None


def _check_structure(g: NetworkGraph) -> None:
    inputs = [l for l in g.layers if l.kind is LayerKind.INPUT]
    if len(inputs) != 1:
        raise MalformedDocument(f"expected exactly one Input layer, found {len(inputs)}")
    if not any(l.kind is LayerKind.OUTPUT for l in g.layers):
        raise MalformedDocument("network has no Output layer")
    for l in g.layers:
        n_in = len(g.predecessors(l.id))
        n_out = len(g.successors(l.id))
        if l.kind is LayerKind.INPUT:
            if n_in:
                raise DanglingConnection(f"Input layer {l.id!r} must not have inputs")
        elif l.kind is LayerKind.RESIDUAL_ADD:
            if n_in != 2:
                raise DanglingConnection(f"ResidualAdd {l.id!r} needs two inputs, has {n_in}")
        elif n_in != 1:
            raise DanglingConnection(f"layer {l.id!r} needs exactly one input, has {n_in}")
        if l.kind is LayerKind.OUTPUT:
            if n_out:
                raise DanglingConnection(f"Output layer {l.id!r} must be a sink")
        elif n_out == 0:
            raise DanglingConnection(f"layer {l.id!r} output is never consumed")


def _propagate_shapes(g: NetworkGraph, strict: bool) -> NetworkGraph:
    out_shapes: dict[str, Shape] = {}
    layers = []
    for l in g.layers:
        preds = g.predecessors(l.id)
        if l.kind is LayerKind.INPUT:
            shape = l.in_shape
        else:
            shapes = [out_shapes[p] for p in preds]
            if l.kind is LayerKind.RESIDUAL_ADD and len(set(shapes)) > 1:
                raise ShapeMismatch(f"ResidualAdd {l.id!r} joins unequal shapes {shapes}")
            shape = shapes[0]
            if strict and l.in_shape is not None and tuple(l.in_shape) != shape:
                raise ShapeMismatch(
                    f"layer {l.id!r} declares in_shape {list(l.in_shape)} but receives {list(shape)}")
        updates: dict[str, Any] = {"in_shape": tuple(shape)}
        if l.kind is LayerKind.FULLY_CONNECTED:
            flat = shape[0] * shape[1] * shape[2]
            if strict and l.fc_in is not None and l.fc_in != flat:
                raise ShapeMismatch(f"layer {l.id!r} declares fc_in={l.fc_in} but receives {flat}")
            updates["fc_in"] = flat
        l = replace(l, **updates)
        out_shapes[l.id] = l.output_shape()
        layers.append(l)
    return replace(g, layers=tuple(layers))


# ---------------------------------------------------------------------------
# residual fusion

def _ancestors(g: NetworkGraph, start: str) -> set[str]:
    seen = {start}
    stack = [start]
    while stack:
        for p in g.predecessors(stack.pop()):
            if p not in seen:
                seen.add(p)
                stack.append(p)
    return seen


def _descendants(g: NetworkGraph, start: str) -> set[str]:
    seen = {start}
    stack = [start]
    while stack:
        for s in g.successors(stack.pop()):
            if s not in seen:
                seen.add(s)
                stack.append(s)
    return seen


def fuse_residual_blocks(g: NetworkGraph) -> NetworkGraph:
    """Make every two-branch convergence an explicit ResidualAdd node.

    A non-add layer with two inputs gets a ResidualAdd named ``<id>_add``
    spliced in front of it. Each add is annotated with the layers of its
    main and shortcut paths. More than two converging branches are rejected.
    """
    layers = list(g.layers)
    edges = list(g.connections)
    existing = {l.id for l in layers}
    changed = False
    for l in g.layers:
        preds = [s for s, d in edges if d == l.id]
        if len(preds) > 2:
            raise UnsupportedTopology(
                f"{len(preds)} branches converge on {l.id!r}; only two-branch merges are supported")
        if len(preds) == 2 and l.kind not in (LayerKind.RESIDUAL_ADD,):
            add_id = f"{l.id}_add"
            while add_id in existing:
                add_id += "_"
            existing.add(add_id)
            edges = [(s, add_id) if d == l.id else (s, d) for s, d in edges]
            edges.append((add_id, l.id))
            pos = layers.index(l)
            layers.insert(pos, LayerSpec(id=add_id, kind=LayerKind.RESIDUAL_ADD))
            changed = True

    if changed:
        ids = [l.id for l in layers]
        by_id = {l.id: l for l in layers}
        order = _topological_order(ids, edges)
        g = replace(g, layers=tuple(by_id[i] for i in order), connections=tuple(edges))

    blocks = []
    for l in g.layers:
        if l.kind is not LayerKind.RESIDUAL_ADD:
            continue
        preds = g.predecessors(l.id)
        if len(preds) != 2:
            continue  # reported by structural validation
        common = _ancestors(g, preds[0]) & _ancestors(g, preds[1])
        if not common:
            raise UnsupportedTopology(f"branches into {l.id!r} share no fork point")
        fork = max(common, key=g.position)
        members = (_descendants(g, fork) & _ancestors(g, l.id)) - {fork}
        blocks.append((l.id, tuple(sorted(members, key=g.position))))
    blocks_t = tuple(blocks)
    if blocks_t == g.residual_blocks:
        return g
    return replace(g, residual_blocks=blocks_t)


# ---------------------------------------------------------------------------
# serialization

def layer_to_dict(l: LayerSpec) -> dict:
    out: dict[str, Any] = {"id": l.id, "kind": l.kind.value}
    for name in ("filters", "kernel", "stride", "padding"):
        value = getattr(l, name)
        if value is not None:
            out[name] = value
    if l.in_shape is not None:
        out["in_shape"] = list(l.in_shape)
    for name in _FC_FIELDS:
        value = getattr(l, name)
        if value is not None:
            out[name] = value
    return out


def to_document(g: NetworkGraph) -> dict:
    """Canonical document form: topological order, all shapes filled in."""
    return {
        "name": g.name,
        "layers": [layer_to_dict(l) for l in g.layers],
        "connections": [[s, d] for s, d in g.connections],
    }


def dumps_network(g: NetworkGraph) -> str:
    return json.dumps(to_document(g), indent=2)


def chain(name: str, in_shape: Shape, layers: Iterable[dict]) -> NetworkGraph:
    """Build a sequential network from layer dicts (Input/Output added)."""
    body = [dict(l) for l in layers]
    doc_layers = [{"id": "input", "kind": "Input", "in_shape": list(in_shape)}]
    doc_layers += body
    doc_layers.append({"id": "output", "kind": "Output"})
    ids = [l["id"] for l in doc_layers]
    return parse_network({
        "name": name,
        "layers": doc_layers,
        "connections": [[a, b] for a, b in zip(ids, ids[1:])],
    })
