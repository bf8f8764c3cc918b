"""Analytical resource and latency models for the streaming PE architecture.

All functions are pure. Latency helpers return seconds; cycle counts are
available through the ``*_cycles`` variants, which the stream simulator is
checked against.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_allocation, check_positive_int
from .exceptions import IncompleteTerms, MalformedDocument, UnsupportedKernel
from .netgraph import LayerKind, LayerSpec, NetworkGraph

BRAM_BLOCK_BITS = 18 * 1024

# (conv LUT, pool LUT, conv registers, pool registers) per PE, by kernel size
RESOURCE_TABLE = {
    2: (550, 300, 1250, 750),
    3: (850, 420, 2000, 1000),
    4: (1400, 700, 3500, 1400),
    5: (2000, 900, 5500, 2200),
}
FC_LUT_PER_PE = 360
FC_DSP_PER_PE = 10
# coefficient/partial-sum store next to each conv PE's line buffer
CONV_EXTRA_BRAM_PER_PE = 1
POOL_BRAM_PER_PE = 1


# ---------------------------------------------------------------------------
# configuration types

@dataclass(frozen=True)
class DeviceProfile:
    dsp_max: int
    lut_max: int
    bram_blocks_max: int
    clock_hz: float
    fp_rep: int = 16
    name: str = "device"

    def __post_init__(self):
        for name in ("dsp_max", "lut_max", "bram_blocks_max", "clock_hz"):
            if not getattr(self, name) > 0:
                raise MalformedDocument(f"device {name} must be positive")
        if self.fp_rep not in (8, 16):
            raise MalformedDocument(f"fp_rep must be 8 or 16, got {self.fp_rep}")

    @property
    def clk_period(self) -> float:
        return 1.0 / self.clock_hz

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceProfile":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise MalformedDocument(f"unknown device field(s): {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise MalformedDocument(f"bad device profile: {exc}") from None

    @classmethod
    def load(cls, path_or_name: str | Path) -> "DeviceProfile":
        """Load a profile from a JSON file or a bundled name like ``zynq7100``."""
        path = Path(path_or_name)
        if not path.exists():
            bundled = Path(__file__).with_name("data") / f"{path_or_name}.json"
            if not bundled.exists():
                raise MalformedDocument(f"no device profile at {path_or_name!r}")
            path = bundled
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise MalformedDocument(f"{path}: invalid JSON: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LatencyTerms:
    """Per-PE latency parameters, in cycles unless noted.

    Kernel-dependent terms left as ``None`` resolve to the defaults
    T_pad = K-1, T_tap = T_mul = K and T_add = ceil(log2 K^2) + 2.
    ``clk_period`` (seconds) is normally taken from the device clock.
    """

    clk_period: float | None = None
    d_in: int = 4
    d_out: int = 4
    p_b: int = 0
    p_f: int = 0
    t_pad: int | None = None
    t_tap: int | None = None
    t_mul: int | None = None
    t_add: int | None = None
    t_relu: int = 1
    t_memory: float = 0.0
    porch_rounding: str = "ceil"

    def __post_init__(self):
        if self.porch_rounding not in ("ceil", "exact"):
            raise MalformedDocument("porch_rounding must be 'ceil' or 'exact'")

    def resolve(self, kernel: int) -> dict[str, int]:
        """Concrete cycle counts for a PE with a ``kernel`` x ``kernel`` window."""
        k = kernel
        out = {
            "d_in": self.d_in,
            "d_out": self.d_out,
            "p_b": self.p_b,
            "p_f": self.p_f,
            "t_pad": k - 1 if self.t_pad is None else self.t_pad,
            "t_tap": k if self.t_tap is None else self.t_tap,
            "t_mul": k if self.t_mul is None else self.t_mul,
            "t_add": adder_tree_depth(k) + 2 if self.t_add is None else self.t_add,
            "t_relu": self.t_relu,
        }
        for name, value in out.items():
            if value is None or value < 0:
                raise IncompleteTerms(f"latency term {name} must be a non-negative integer, got {value!r}")
        return out

    def period(self) -> float:
        if self.clk_period is None or not self.clk_period > 0:
            raise IncompleteTerms("clk_period is not set")
        return self.clk_period

    def with_clock(self, dev: DeviceProfile) -> "LatencyTerms":
        if self.clk_period is not None:
            return self
        return replace(self, clk_period=dev.clk_period)

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyTerms":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise MalformedDocument(f"unknown latency term(s): {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "LatencyTerms":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise MalformedDocument(f"{path}: invalid JSON: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PEAllocation:
    """Dedicated PE count per conv layer (topological order) plus FC PEs."""

    conv_pe: tuple[int, ...]
    fc_pe: int = 1

    def __post_init__(self):
        object.__setattr__(self, "conv_pe", tuple(int(p) for p in self.conv_pe))
        object.__setattr__(self, "fc_pe", int(self.fc_pe))

    def as_vector(self) -> tuple[int, ...]:
        return self.conv_pe + (self.fc_pe,)

    def to_dict(self) -> dict:
        return {"conv_pe": list(self.conv_pe), "fc_pe": self.fc_pe}

    @classmethod
    def from_dict(cls, d: dict) -> "PEAllocation":
        return cls(conv_pe=tuple(d["conv_pe"]), fc_pe=d.get("fc_pe", 1))


@dataclass
class CostEstimate:
    latency_s: float
    dsp: int
    lut: int
    bram: int
    registers: int
    power_mw: float | None = None

    def objectives(self) -> tuple[float, int, int, int]:
        return (self.latency_s, self.dsp, self.lut, self.bram)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CostEstimate":
        return cls(**d)


# ---------------------------------------------------------------------------
# PE-level formulas

def adder_tree_depth(kernel: int) -> int:
    """Pairwise reduction levels needed to sum ``kernel**2`` products."""
    return math.ceil(math.log2(kernel * kernel)) if kernel > 1 else 0


def mac_core_counts(kernel: int) -> tuple[int, int, int]:
    """(multipliers, adders, adder pipeline stages) of a KxK MAC core."""
    check_positive_int(kernel, "kernel")
    n_mult = kernel * kernel
    stages = adder_tree_depth(kernel) + 1
    # stage ratio is 1 once every stage is populated
    n_add = n_mult - 1
    return n_mult, n_add, stages


def _porch_lead(p_b: int, rounding: str) -> float:
    lead = (p_b + 1) / 2
    return math.ceil(lead) if rounding == "ceil" else lead


def frame_cycles(width: int, height: int, terms: LatencyTerms, is_first: bool) -> float:
    """Core streaming cycles: input delay, porch lead-in and all frame rows."""
    return ((terms.d_in if is_first else 0)
            + _porch_lead(terms.p_b, terms.porch_rounding)
            + (width + terms.p_b + terms.p_f) * height)


def conv_pe_cycles(layer: LayerSpec, terms: LatencyTerms, is_first: bool) -> float:
    t = terms.resolve(layer.kernel)
    pad = layer.padding or 0
    width = layer.in_width + 2 * pad
    height = layer.in_height + 2 * pad
    overhead = t["t_pad"] + t["t_tap"] + t["t_mul"] + t["t_add"] + t["d_out"] + t["t_relu"]
    return frame_cycles(width, height, terms, is_first) + overhead


def conv_pe_latency(layer: LayerSpec, terms: LatencyTerms, is_first: bool) -> float:
    """Latency (s) of one convolution PE streaming one padded frame."""
    if layer.kind is not LayerKind.CONV:
        raise ValueError(f"{layer.id!r} is not a Conv layer")
    return terms.period() * conv_pe_cycles(layer, terms, is_first)


def pool_compute_cycles(kind: LayerKind, kernel: int, t: dict[str, int]) -> int:
    if kind is LayerKind.MAX_POOL:
        return adder_tree_depth(kernel)  # comparator tree
    return t["t_mul"] + t["t_add"]       # fixed-coefficient MAC


def pool_pe_cycles(layer: LayerSpec, terms: LatencyTerms, is_first: bool) -> float:
    t = terms.resolve(layer.kernel)
    pad = layer.padding or 0
    width = layer.in_width + 2 * pad
    height = layer.in_height + 2 * pad
    overhead = (t["t_pad"] + t["t_tap"] + pool_compute_cycles(layer.kind, layer.kernel, t)
                + t["d_out"])
    return frame_cycles(width, height, terms, is_first) + overhead


def pool_pe_latency(layer: LayerSpec, terms: LatencyTerms, is_first: bool) -> float:
    if not layer.kind.is_pool:
        raise ValueError(f"{layer.id!r} is not a pooling layer")
    return terms.period() * pool_pe_cycles(layer, terms, is_first)


def fc_parallelism(channels: int, fc_pe: int) -> int:
    return math.ceil(channels / fc_pe)


def fc_latency(layer: LayerSpec | None, terms: LatencyTerms, fc_pe: int,
               in_map: tuple[int, int, int]) -> float:
    """Latency (s) of an FC layer streaming an (H, W, C) map over ``fc_pe`` PEs."""
    check_positive_int(fc_pe, "fc_pe")
    h, w, c = in_map
    for v in in_map:
        check_positive_int(v, "in_map dimension")
    stream = (w + terms.p_b + terms.p_f) * (h - 1) + h
    return terms.period() * stream * fc_parallelism(c, fc_pe)


def fc_resources(fc_out: int, n: int, l: int) -> tuple[int, int, int]:
    """(multipliers, adders, registers) for ``n`` FC PEs per head, ``l`` tree adders."""
    return fc_out * n, fc_out * n + fc_out * l, fc_out * n


def bram_linebuffer(fm_width: int, kernel: int, fp_rep: int) -> int:
    """18 Kb blocks holding ``kernel`` rows of ``fm_width`` pixels."""
    return math.ceil(fm_width * kernel * fp_rep / BRAM_BLOCK_BITS)


def lut_lookup(kind: LayerKind | str, kernel: int) -> tuple[int, int]:
    """(LUTs, slice registers) of one conv or pooling PE; table sizes only."""
    if kernel not in RESOURCE_TABLE:
        raise UnsupportedKernel(f"no resource data for {kernel}x{kernel} kernels "
                                f"(supported: {sorted(RESOURCE_TABLE)})")
    kind = LayerKind(kind) if not isinstance(kind, LayerKind) else kind
    conv_lut, pool_lut, conv_reg, pool_reg = RESOURCE_TABLE[kernel]
    if kind is LayerKind.CONV:
        return conv_lut, conv_reg
    if kind.is_pool:
        return pool_lut, pool_reg
    raise ValueError(f"no PE table entry for {kind.value}")


def layer_pe_demand(conv_pe: Sequence[int], i: int, input_channels: int) -> int:
    """PEs needed to fully parallelise conv layer ``i`` (0-based)."""
    prev = input_channels if i == 0 else conv_pe[i - 1]
    return conv_pe[i] * prev


def pe_demands(conv_pe: Sequence[int], input_channels: int) -> tuple[int, ...]:
    return tuple(layer_pe_demand(conv_pe, i, input_channels) for i in range(len(conv_pe)))


def pipeline_latency(stage_latencies: Iterable[float], n_elements: int, clk_period: float,
                     initiation_interval: float | None = None, t_memory: float = 0.0) -> float:
    """Pipelined schedule latency: fill time plus one interval per extra element.

    The fill time is the sum of the stage latencies, i.e. ``m`` clock periods
    for ``m`` single-cycle stages.
    """
    check_positive_int(n_elements, "n_elements")
    interval = clk_period if initiation_interval is None else initiation_interval
    if interval < clk_period:
        raise ValueError("initiation interval cannot be shorter than the clock period")
    t_pipe = sum(stage_latencies) + (n_elements - 1) * interval
    return t_pipe + t_memory


# ---------------------------------------------------------------------------
# network-level assembly

@dataclass
class LayerCost:
    layer_id: str
    latency_s: float
    dsp: int = 0
    lut: int = 0
    bram: int = 0
    registers: int = 0
    pes: int = 0
    streams: int = 1   # parallel output streams
    load: int = 1      # channels carried serially per stream


def _input_streams(g: NetworkGraph, layer: LayerSpec, costs: dict[str, LayerCost]) -> tuple[int, int]:
    preds = g.predecessors(layer.id)
    return (max(costs[p].streams for p in preds), max(costs[p].load for p in preds))


def layer_costs(g: NetworkGraph, alloc: PEAllocation, dev: DeviceProfile,
                terms: LatencyTerms | None = None,
                filter_load: Sequence[int] | None = None) -> dict[str, LayerCost]:
    """Per-layer cost breakdown keyed by layer id.

    ``filter_load`` overrides the number of filters each conv PE computes
    serially (default ``ceil(N/P)``); the morph transforms use it to describe
    partially gated PEs.
    """
    terms = (terms or LatencyTerms()).with_clock(dev)
    clk = terms.period()
    check_allocation(g, alloc)
    conv_index = {l.id: i for i, l in enumerate(g.conv_layers)}
    fp = dev.fp_rep
    costs: dict[str, LayerCost] = {}
    for layer in g.layers:
        kind = layer.kind
        if kind is LayerKind.INPUT:
            costs[layer.id] = LayerCost(layer.id, 0.0, streams=layer.in_channels, load=1)
            continue
        preds = g.predecessors(layer.id)
        is_first = any(g.layer(p).kind is LayerKind.INPUT for p in preds)
        streams_in, load_in = _input_streams(g, layer, costs)
        if kind is LayerKind.CONV:
            i = conv_index[layer.id]
            p = alloc.conv_pe[i]
            load = filter_load[i] if filter_load is not None else math.ceil(layer.filters / p)
            pes = p * streams_in
            k = layer.kernel
            lut_pe, reg_pe = lut_lookup(kind, k)
            # address generation uses K adders of fp_rep bits per PE
            control = k * fp
            costs[layer.id] = LayerCost(
                layer.id,
                latency_s=conv_pe_latency(layer, terms, is_first) * load * load_in,
                dsp=pes * k * k,
                lut=pes * (lut_pe + control),
                bram=pes * (bram_linebuffer(layer.in_width, k, fp) + CONV_EXTRA_BRAM_PER_PE),
                registers=pes * reg_pe,
                pes=pes, streams=p, load=load)
        elif kind.is_pool:
            lut_pe, reg_pe = lut_lookup(kind, layer.kernel)
            pes = streams_in
            costs[layer.id] = LayerCost(
                layer.id,
                latency_s=pool_pe_latency(layer, terms, is_first) * load_in,
                lut=pes * lut_pe, bram=pes * POOL_BRAM_PER_PE, registers=pes * reg_pe,
                pes=pes, streams=streams_in, load=load_in)
        elif kind is LayerKind.FULLY_CONNECTED:
            costs[layer.id] = fc_layer_cost(layer, min(alloc.fc_pe, layer.in_channels), terms)
        elif kind is LayerKind.RESIDUAL_ADD:
            channels = layer.in_channels
            costs[layer.id] = LayerCost(
                layer.id, latency_s=clk, lut=channels * fp, registers=channels * fp,
                pes=0, streams=streams_in, load=load_in)
        else:  # Output
            costs[layer.id] = LayerCost(layer.id, 0.0, streams=streams_in, load=load_in)
    return costs


def fc_layer_cost(layer: LayerSpec, fc_pe: int, terms: LatencyTerms) -> LayerCost:
    _, _, n_reg = fc_resources(layer.fc_out, fc_pe, fc_pe - 1)
    return LayerCost(
        layer.id,
        latency_s=fc_latency(layer, terms, fc_pe, layer.in_shape),
        dsp=fc_pe * FC_DSP_PER_PE,
        lut=fc_pe * FC_LUT_PER_PE,
        registers=n_reg,
        pes=fc_pe, streams=1, load=1)


def critical_path(g: NetworkGraph, costs: dict[str, LayerCost]) -> list[str]:
    """Layer ids on the slowest Input-to-Output path."""
    finish: dict[str, float] = {}
    best_pred: dict[str, str | None] = {}
    for layer in g.layers:
        preds = g.predecessors(layer.id)
        if preds:
            p = max(preds, key=lambda x: finish[x])
            start = finish[p]
        else:
            p, start = None, 0.0
        best_pred[layer.id] = p
        finish[layer.id] = start + costs[layer.id].latency_s
    node = max((l.id for l in g.layers if not g.successors(l.id)), key=lambda x: finish[x])
    path = []
    while node is not None:
        path.append(node)
        node = best_pred[node]
    return path[::-1]


def dsp_total(g: NetworkGraph, alloc: PEAllocation) -> int:
    """DSP objective: sum of L(j) * k(j)^2 plus 10 per FC PE."""
    check_allocation(g, alloc)
    streams: dict[str, int] = {}
    total = 0
    conv_i = 0
    for layer in g.layers:
        preds = g.predecessors(layer.id)
        s_in = max((streams[p] for p in preds), default=0)
        if layer.kind is LayerKind.INPUT:
            streams[layer.id] = layer.in_channels
        elif layer.kind is LayerKind.CONV:
            p = alloc.conv_pe[conv_i]
            conv_i += 1
            total += p * s_in * layer.kernel ** 2
            streams[layer.id] = p
        elif layer.kind is LayerKind.FULLY_CONNECTED:
            total += min(alloc.fc_pe, layer.in_channels) * FC_DSP_PER_PE
            streams[layer.id] = 1
        else:
            streams[layer.id] = s_in
    return total


def estimate(g: NetworkGraph, alloc: PEAllocation, dev: DeviceProfile,
             terms: LatencyTerms | None = None,
             filter_load: Sequence[int] | None = None) -> CostEstimate:
    """Objective vector (latency, DSP, LUT, BRAM) plus registers for one allocation."""
    terms = (terms or LatencyTerms()).with_clock(dev)
    costs = layer_costs(g, alloc, dev, terms, filter_load)
    path = critical_path(g, costs)
    latency = pipeline_latency([costs[i].latency_s for i in path], 1, terms.period(),
                               t_memory=terms.t_memory)
    return CostEstimate(
        latency_s=latency,
        dsp=sum(c.dsp for c in costs.values()),
        lut=sum(c.lut for c in costs.values()),
        bram=sum(c.bram for c in costs.values()),
        registers=sum(c.registers for c in costs.values()),
    )


def allocation_bounds(g: NetworkGraph) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive (lower, upper) gene bounds: conv PEs then the FC PE gene."""
    ub = [l.filters for l in g.conv_layers]
    fcs = g.fc_layers
    ub.append(max((l.in_channels for l in fcs), default=1))
    ub_a = np.asarray(ub, dtype=int)
    return np.ones_like(ub_a), ub_a


class CostModel(TransformerMixin, BaseEstimator):
    """Estimator wrapper: fit on a network, transform allocations to objectives.

    ``transform`` accepts an (n, n_conv + 1) integer array of genomes (conv PE
    counts followed by the FC PE count) and returns an (n, 4) array of
    latency (s), DSP, LUT and BRAM.
    """

    def __init__(self, device: DeviceProfile | None = None, terms: LatencyTerms | None = None):
        self.device = device
        self.terms = terms

    def fit(self, X: NetworkGraph, y=None):
        if not isinstance(X, NetworkGraph):
            raise TypeError("CostModel.fit expects a NetworkGraph")
        self.graph_ = X
        self.device_ = self.device or DeviceProfile.load("zynq7100")
        self.terms_ = (self.terms or LatencyTerms()).with_clock(self.device_)
        self.lower_, self.upper_ = allocation_bounds(X)
        self.n_genes_ = len(self.upper_)
        return self

    def estimate(self, alloc: PEAllocation | Sequence[int]) -> CostEstimate:
        check_is_fitted(self, "graph_")
        if not isinstance(alloc, PEAllocation):
            alloc = PEAllocation(tuple(alloc[:-1]), alloc[-1])
        return estimate(self.graph_, alloc, self.device_, self.terms_)

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "graph_")
        genomes = np.atleast_2d(np.asarray(X, dtype=int))
        if genomes.shape[1] != self.n_genes_:
            raise ValueError(f"expected {self.n_genes_} genes per row, got {genomes.shape[1]}")
        return np.array([self.estimate(row.tolist()).objectives() for row in genomes], dtype=float)
