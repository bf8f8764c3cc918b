"""Runtime morphing: depth-wise block truncation, width-wise filter gating,
and an affine power model calibrated on measured board power.

Neither transform resynthesises anything. A mode only changes which parts of
one resident design are clocked, so every mode reports two footprints:
``estimate`` (active resources, latency of the active path) and ``resident``
(everything on the fabric, identical for all modes of a design).
"""

from __future__ import annotations

import csv
import json
import math
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import lsq_linear
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import check_fraction, check_positive_int
from .costmodel import (
    CostEstimate,
    DeviceProfile,
    LatencyTerms,
    PEAllocation,
    critical_path,
    estimate,
    fc_layer_cost,
    layer_costs,
    pipeline_latency,
)
from .exceptions import DegenerateFit, EmptyBlock, InvalidCut, MalformedDocument, TooNarrow
from .netgraph import LayerKind, LayerSpec, NetworkGraph

BLOCK_NAMES = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"


# ---------------------------------------------------------------------------
# layer blocks

@dataclass(frozen=True)
class LayerBlock:
    block_id: str
    layer_ids: tuple[str, ...]
    output_head: LayerSpec   # FC head fed by the block's last layer

    @property
    def exit_layer(self) -> str:
        return self.layer_ids[-1]

    def to_dict(self) -> dict:
        h = self.output_head
        return {"block_id": self.block_id, "layer_ids": list(self.layer_ids),
                "output_head": {"in_shape": list(h.in_shape), "fc_in": h.fc_in, "fc_out": h.fc_out}}


def _backbone(g: NetworkGraph) -> list[LayerSpec]:
    return [l for l in g.layers if l.kind.is_windowed or l.kind is LayerKind.RESIDUAL_ADD]


def _check_cut(g: NetworkGraph, layer_id: str) -> None:
    if layer_id not in g:
        raise InvalidCut(f"unknown layer {layer_id!r}")
    layer = g.layer(layer_id)
    if not (layer.kind.is_windowed or layer.kind is LayerKind.RESIDUAL_ADD):
        raise InvalidCut(f"cannot cut after {layer.kind.value} layer {layer_id!r}")
    pos = g.position(layer_id)
    for s, d in g.connections:
        if g.position(s) <= pos < g.position(d) and s != layer_id:
            raise InvalidCut(f"cut after {layer_id!r} would split the branch {s!r} -> {d!r}")


def _head(block_id: str, exit_layer: LayerSpec, class_count: int) -> LayerSpec:
    shape = exit_layer.output_shape()
    return LayerSpec(id=f"head_{block_id}", kind=LayerKind.FULLY_CONNECTED, in_shape=shape,
                     fc_in=shape[0] * shape[1] * shape[2], fc_out=class_count)


def default_boundaries(g: NetworkGraph) -> list[str]:
    """One block per conv layer, each extended over the layers that follow it
    up to the next conv; cuts that would split a residual branch are skipped."""
    backbone = _backbone(g)
    cuts = []
    for i, layer in enumerate(backbone):
        nxt = backbone[i + 1] if i + 1 < len(backbone) else None
        if nxt is None or nxt.kind is LayerKind.CONV:
            try:
                _check_cut(g, layer.id)
            except InvalidCut:
                continue
            cuts.append(layer.id)
    return cuts


def partition_blocks(g: NetworkGraph, boundaries: Sequence[str] | None = None,
                     class_count: int | None = None) -> list[LayerBlock]:
    """Split the conv/pool backbone into consecutive blocks ending at ``boundaries``.

    The last backbone layer always closes the final block. Each block gets an
    FC head with ``class_count`` outputs (default: the network's own classifier
    width).
    """
    backbone = _backbone(g)
    if not backbone:
        raise EmptyBlock("network has no conv or pooling layers")
    if class_count is None:
        fcs = g.fc_layers
        if not fcs:
            raise ValueError("class_count is required for networks without an FC classifier")
        class_count = fcs[-1].fc_out
    check_positive_int(class_count, "class_count")
    cuts = list(default_boundaries(g) if boundaries is None else boundaries)
    if len(set(cuts)) != len(cuts):
        raise EmptyBlock(f"repeated boundary in {cuts}")
    for c in cuts:
        _check_cut(g, c)
    if backbone[-1].id not in cuts:
        cuts.append(backbone[-1].id)
    cuts.sort(key=g.position)
    if len(cuts) > len(BLOCK_NAMES):
        raise ValueError("too many blocks")

    blocks = []
    start = 0
    for n, cut in enumerate(cuts):
        end = next(i for i, l in enumerate(backbone) if l.id == cut) + 1
        members = tuple(l.id for l in backbone[start:end])
        if not members:
            raise EmptyBlock(f"boundary {cut!r} leaves block {BLOCK_NAMES[n]} empty")
        blocks.append(LayerBlock(BLOCK_NAMES[n], members,
                                 _head(BLOCK_NAMES[n], g.layer(cut), class_count)))
        start = end
    return blocks


# ---------------------------------------------------------------------------
# modes

@dataclass
class MorphMode:
    name: str
    kind: str                       # "depth" or "width"
    params: dict
    active_alloc: PEAllocation      # gated layers carry 0 PEs
    active_widths: tuple[int, ...]  # active filters per conv layer
    estimate: CostEstimate
    resident: CostEstimate
    switch_latency_s: float
    accuracy: float | None = None

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "kind": self.kind,
            "params": dict(self.params),
            "active_alloc": self.active_alloc.to_dict(),
            "active_widths": list(self.active_widths),
            "estimate": self.estimate.to_dict(),
            "resident": self.resident.to_dict(),
            "switch_latency_s": self.switch_latency_s,
        }
        if self.accuracy is not None:
            d["accuracy"] = self.accuracy
        return d


def _with_clock(terms, dev):
    return (terms or LatencyTerms()).with_clock(dev)


def _head_cost(block: LayerBlock, terms: LatencyTerms):
    # extra heads are fully parallel over their input channels
    head = block.output_head
    return fc_layer_cost(head, head.in_channels, terms)


def _sum_resources(parts: Iterable) -> dict:
    parts = list(parts)
    return {k: sum(getattr(p, k) for p in parts) for k in ("dsp", "lut", "bram", "registers")}


def resident_footprint(g: NetworkGraph, blocks: Sequence[LayerBlock] | None, alloc: PEAllocation,
                       dev: DeviceProfile, terms: LatencyTerms | None = None) -> CostEstimate:
    """Full design plus every intermediate head; the same for every mode."""
    terms = _with_clock(terms, dev)
    full = estimate(g, alloc, dev, terms)
    extra = _sum_resources(_head_cost(b, terms) for b in (blocks or [])[:-1])
    return CostEstimate(latency_s=full.latency_s, dsp=full.dsp + extra["dsp"],
                        lut=full.lut + extra["lut"], bram=full.bram + extra["bram"],
                        registers=full.registers + extra["registers"])


def _prefix_path(g: NetworkGraph, costs, members: set[str], sink: str) -> list[str]:
    finish: dict[str, float] = {}
    prev: dict[str, str | None] = {}
    for layer in g.layers:
        if layer.id not in members:
            continue
        preds = [p for p in g.predecessors(layer.id) if p in members]
        best = max(preds, key=lambda p: finish[p]) if preds else None
        prev[layer.id] = best
        finish[layer.id] = (finish[best] if best else 0.0) + costs[layer.id].latency_s
    path = []
    node = sink
    while node is not None:
        path.append(node)
        node = prev[node]
    return path[::-1]


def depth_mode(g: NetworkGraph, blocks: Sequence[LayerBlock], k: int, alloc: PEAllocation,
               dev: DeviceProfile, terms: LatencyTerms | None = None) -> MorphMode:
    """Run only the first ``k`` blocks and classify with head ``k``.

    With ``k`` equal to the block count the network's own classifier is used.
    Active resources are the prefix plus every resident intermediate head.
    """
    n_blocks = len(blocks)
    check_positive_int(k, "k")
    if k > n_blocks:
        raise ValueError(f"depth k={k} outside [1, {n_blocks}]")
    terms = _with_clock(terms, dev)
    clk = terms.period()
    costs = layer_costs(g, alloc, dev, terms)
    extra_heads = [_head_cost(b, terms) for b in blocks[:-1]]
    resident = resident_footprint(g, blocks, alloc, dev, terms)

    if k == n_blocks:
        path = critical_path(g, costs)
        active_ids = {l.id for l in g.layers}
        stage_latencies = [costs[i].latency_s for i in path]
        head_fc = alloc.fc_pe
        parts = [costs[i] for i in active_ids] + extra_heads
    else:
        active_ids = {g.input_layer.id}
        for b in blocks[:k]:
            active_ids.update(b.layer_ids)
        path = _prefix_path(g, costs, active_ids, blocks[k - 1].exit_layer)
        stage_latencies = [costs[i].latency_s for i in path] + [extra_heads[k - 1].latency_s]
        head_fc = blocks[k - 1].output_head.in_channels
        parts = [costs[i] for i in active_ids] + extra_heads
    latency = pipeline_latency(stage_latencies, 1, clk, t_memory=terms.t_memory)
    res = _sum_resources(parts)
    active = CostEstimate(latency_s=latency, **res)

    conv_ids = [l.id for l in g.conv_layers]
    gated = PEAllocation(tuple(p if cid in active_ids else 0 for p, cid in zip(alloc.conv_pe, conv_ids)),
                         head_fc)
    widths = tuple(l.filters if l.id in active_ids else 0 for l in g.conv_layers)
    return MorphMode(name=f"depth:{k}", kind="depth", params={"k": k}, active_alloc=gated,
                     active_widths=widths, estimate=active, resident=resident,
                     switch_latency_s=latency)


def width_assignment(filters: int, pes: int, fraction: float) -> tuple[int, int, int]:
    """(active filters, active PEs, filters per active PE) for one conv layer.

    PEs keep their filter-to-PE wiring: each of the ``ceil(N/P)`` filter slots
    per PE is kept or gated, and whole PEs switch off once all of their slots
    are gated.
    """
    if fraction == 1.0:
        return filters, pes, math.ceil(filters / pes)
    active = math.floor(fraction * filters)
    if active < 1:
        raise TooNarrow(f"fraction {fraction} leaves no active filter out of {filters}")
    per_pe = math.ceil(filters / pes)
    active_pes = min(pes, math.ceil(active / per_pe))
    return active, active_pes, min(per_pe, active)


def width_mode(g: NetworkGraph, f: float, alloc: PEAllocation, dev: DeviceProfile,
               terms: LatencyTerms | None = None,
               blocks: Sequence[LayerBlock] | None = None) -> MorphMode:
    """Gate all but a fraction ``f`` of the filters of every conv layer."""
    f = check_fraction(f, "f", open_low=True)
    terms = _with_clock(terms, dev)
    convs = g.conv_layers
    plan = [width_assignment(l.filters, p, f) for l, p in zip(convs, alloc.conv_pe)]
    narrow = g.with_filters({l.id: n for l, (n, _, _) in zip(convs, plan)})
    fc_cap = max((l.in_channels for l in narrow.fc_layers), default=1)
    active_alloc = PEAllocation(tuple(p for _, p, _ in plan), min(alloc.fc_pe, fc_cap))
    est = estimate(narrow, active_alloc, dev, terms, filter_load=[c for _, _, c in plan])
    resident = resident_footprint(g, blocks, alloc, dev, terms)
    if blocks:
        extra = _sum_resources(_head_cost(b, terms) for b in blocks[:-1])
        est = CostEstimate(latency_s=est.latency_s, dsp=est.dsp + extra["dsp"],
                           lut=est.lut + extra["lut"], bram=est.bram + extra["bram"],
                           registers=est.registers + extra["registers"])
    return MorphMode(name=f"width:{f!r}", kind="width", params={"f": f},
                     active_alloc=active_alloc, active_widths=tuple(n for n, _, _ in plan),
                     estimate=est, resident=resident, switch_latency_s=est.latency_s)


def interior_pe_demand(g: NetworkGraph, alloc: PEAllocation) -> tuple[int, ...]:
    """Per conv layer, active PEs times the parallel streams feeding them."""
    costs_streams = {g.input_layer.id: g.input_layer.in_channels}
    out = []
    conv_i = 0
    for layer in g.layers[1:]:
        s_in = max(costs_streams[p] for p in g.predecessors(layer.id))
        if layer.kind is LayerKind.CONV:
            p = alloc.conv_pe[conv_i]
            conv_i += 1
            out.append(p * s_in)
            costs_streams[layer.id] = p
        elif layer.kind is LayerKind.FULLY_CONNECTED:
            costs_streams[layer.id] = 1
        else:
            costs_streams[layer.id] = s_in
    return tuple(out)


def parse_mode(text: str) -> tuple[str, float | int]:
    """``"depth:k"`` or ``"width:f"`` into (kind, value)."""
    kind, sep, value = text.partition(":")
    if not sep:
        raise ValueError(f"mode must look like depth:K or width:F, got {text!r}")
    if kind == "depth":
        try:
            return kind, int(value)
        except ValueError:
            raise ValueError(f"depth mode needs an integer block count, got {value!r}") from None
    if kind == "width":
        try:
            return kind, float(value)
        except ValueError:
            raise ValueError(f"width mode needs a fraction, got {value!r}") from None
    raise ValueError(f"unknown mode kind {kind!r}")


# ---------------------------------------------------------------------------
# power

@dataclass(frozen=True)
class PowerModel:
    """power_mw = base_mw + coef_dsp*dsp + coef_lut*lut + coef_bram*bram, clamped at 0."""

    base_mw: float
    coef_dsp: float
    coef_lut: float
    coef_bram: float
    fit_residual: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in asdict(self).values()):
            raise ValueError("power model coefficients must be finite")

    def predict(self, dsp, lut, bram) -> float:
        raw = self.base_mw + self.coef_dsp * dsp + self.coef_lut * lut + self.coef_bram * bram
        return max(0.0, float(raw))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PowerModel":
        try:
            return cls(**d)
        except TypeError as exc:
            raise MalformedDocument(f"bad power model: {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "PowerModel":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise MalformedDocument(f"{path}: invalid JSON: {exc}") from None


class AffinePowerModel(RegressorMixin, BaseEstimator):
    """Affine regression of board power on (DSP, LUT, BRAM).

    With ``nonnegative=True`` (default) the resource coefficients are
    constrained to be >= 0 so more hardware never predicts less power; the
    intercept stays free. Features are scaled by their column maxima before
    solving, which keeps the bounded least-squares problem well conditioned.
    """

    def __init__(self, nonnegative: bool = True):
        self.nonnegative = nonnegative

    def fit(self, X, y):
        X = check_array(X, dtype=float)
        y = np.asarray(y, dtype=float).ravel()
        if X.shape[1] != 3:
            raise ValueError("expected columns dsp, lut, bram")
        if len(y) != len(X):
            raise ValueError("X and y lengths differ")
        if len(y) < 4:
            raise DegenerateFit(f"need at least 4 samples, got {len(y)}")
        design = np.column_stack([np.ones(len(X)), X])
        if np.linalg.matrix_rank(design) < design.shape[1]:
            raise DegenerateFit("resource vectors do not span an affine model")
        scale = np.abs(X).max(axis=0)
        scale[scale == 0] = 1.0
        scaled = np.column_stack([np.ones(len(X)), X / scale])
        if self.nonnegative:
            lower = np.array([-np.inf, 0.0, 0.0, 0.0])
            sol = lsq_linear(scaled, y, bounds=(lower, np.full(4, np.inf)), method="bvls",
                             tol=1e-12).x
        else:
            sol = np.linalg.lstsq(scaled, y, rcond=None)[0]
        self.intercept_ = float(sol[0])
        self.coef_ = sol[1:] / scale
        resid = y - (self.intercept_ + X @ self.coef_)
        self.fit_residual_ = float(np.sqrt(np.mean(resid ** 2)))
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        return np.maximum(0.0, self.intercept_ + X @ self.coef_)

    def to_power_model(self) -> PowerModel:
        check_is_fitted(self, "coef_")
        return PowerModel(self.intercept_, *map(float, self.coef_), self.fit_residual_)


def _resource_row(sample) -> tuple[float, float, float]:
    if isinstance(sample, CostEstimate):
        return (sample.dsp, sample.lut, sample.bram)
    dsp, lut, bram = sample
    return (dsp, lut, bram)


def fit_power_model(samples: Sequence[tuple], nonnegative: bool = True) -> PowerModel:
    """Fit from ``(resources, measured_mw)`` pairs; resources may be a
    CostEstimate or a (dsp, lut, bram) triple."""
    X = np.array([_resource_row(r) for r, _ in samples], dtype=float).reshape(-1, 3)
    y = np.array([mw for _, mw in samples], dtype=float)
    return AffinePowerModel(nonnegative=nonnegative).fit(X, y).to_power_model()


def predict_power(model: PowerModel, est: CostEstimate) -> float:
    """Predicted mW for ``est``'s active resources; also stored on ``est``."""
    mw = model.predict(est.dsp, est.lut, est.bram)
    est.power_mw = mw
    return mw


def gating_savings(model: PowerModel, mode: MorphMode) -> float:
    """Power saved (mW) by clock-gating down to ``mode`` from the resident design."""
    return model.predict(mode.resident.dsp, mode.resident.lut, mode.resident.bram) - \
        model.predict(mode.estimate.dsp, mode.estimate.lut, mode.estimate.bram)


def read_calibration_csv(path) -> list[tuple[tuple[int, int, int], float]]:
    """Rows of a ``dsp,lut,bram,measured_mw`` calibration file."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"dsp", "lut", "bram", "measured_mw"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise MalformedDocument(f"{path}: calibration CSV needs columns {sorted(need)}")
        try:
            return [((int(r["dsp"]), int(r["lut"]), int(r["bram"])), float(r["measured_mw"]))
                    for r in reader]
        except ValueError as exc:
            raise MalformedDocument(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# manifest and registry

def morph_manifest(base: PEAllocation, modes: Iterable[MorphMode]) -> dict:
    return {"base_config": base.to_dict(), "modes": [m.to_dict() for m in modes]}


def merge_manifest(existing: dict | None, base: PEAllocation, mode: MorphMode) -> dict:
    """Add or replace ``mode`` in a manifest built for ``base``."""
    doc = existing or morph_manifest(base, [])
    if doc.get("base_config") != base.to_dict():
        raise MalformedDocument("existing morph manifest belongs to a different allocation")
    entry = mode.to_dict()
    old = {m["name"]: m for m in doc.get("modes", [])}
    if "accuracy" in old.get(mode.name, {}) and "accuracy" not in entry:
        entry["accuracy"] = old[mode.name]["accuracy"]
    old[mode.name] = entry
    doc["modes"] = sorted(old.values(), key=lambda m: (m["kind"], m["name"]))
    return doc


class ModeRegistry:
    """Mode name to manifest entry; many concurrent readers, one writer."""

    def __init__(self):
        self._modes: dict[str, dict] = {}
        self._cond = threading.Condition()
        self._readers = 0
        self._writing = False

    def _acquire_read(self):
        with self._cond:
            while self._writing:
                self._cond.wait()
            self._readers += 1

    def _release_read(self):
        with self._cond:
            self._readers -= 1
            if self._readers == 0:
                self._cond.notify_all()

    def _acquire_write(self):
        with self._cond:
            while self._writing or self._readers:
                self._cond.wait()
            self._writing = True

    def _release_write(self):
        with self._cond:
            self._writing = False
            self._cond.notify_all()

    def get(self, name: str) -> dict:
        self._acquire_read()
        try:
            return dict(self._modes[name])
        finally:
            self._release_read()

    def names(self) -> list[str]:
        self._acquire_read()
        try:
            return sorted(self._modes)
        finally:
            self._release_read()

    def register(self, mode: MorphMode | dict) -> None:
        entry = mode.to_dict() if isinstance(mode, MorphMode) else dict(mode)
        self._acquire_write()
        try:
            self._modes[entry["name"]] = entry
        finally:
            self._release_write()

    def remove(self, name: str) -> None:
        self._acquire_write()
        try:
            del self._modes[name]
        finally:
            self._release_write()
