"""Constrained multi-objective genetic search over PE allocations.

Genomes are integer vectors: one PE count per conv layer (topological order)
followed by the FC PE count. Objectives are (latency, DSP), both minimised.
Constraints use feasibility-first domination: any feasible individual beats
any infeasible one, and infeasible individuals compare by total violation.
The returned front is the archive of every feasible non-dominated genome
evaluated during the run.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_fraction, check_positive_int
from .costmodel import (
    CostEstimate,
    DeviceProfile,
    LatencyTerms,
    PEAllocation,
    allocation_bounds,
    estimate,
)
from .exceptions import LengthMismatch, MalformedDocument, NoFeasibleDesign
from .netgraph import NetworkGraph

log = logging.getLogger(__name__)

HV_TOLERANCE = 1e-6


@dataclass(frozen=True)
class MogaConfig:
    """Search settings. ``population_size=None`` picks 50 for networks with at
    most three conv layers and 200 otherwise. ``mutation_rate`` is the
    per-gene mutation probability."""

    population_size: int | None = None
    max_generations: int = 100
    crossover_rate: float = 0.9
    mutation_rate: float = 0.3
    seed: int = 0
    stagnation_window: int = 25
    mutation_exponent: float = 4.0
    fixed_fc_pe: int | None = None
    n_jobs: int = 1

    def __post_init__(self):
        if self.population_size is not None:
            check_positive_int(self.population_size, "population_size", minimum=2)
        check_positive_int(self.max_generations, "max_generations", minimum=0)
        check_fraction(self.crossover_rate, "crossover_rate")
        check_fraction(self.mutation_rate, "mutation_rate")
        check_positive_int(self.stagnation_window, "stagnation_window")
        check_positive_int(self.n_jobs, "n_jobs")
        if not self.mutation_exponent > 0:
            raise ValueError("mutation_exponent must be positive")
        if self.fixed_fc_pe is not None:
            check_positive_int(self.fixed_fc_pe, "fixed_fc_pe")

    def population_for(self, g: NetworkGraph) -> int:
        if self.population_size is not None:
            return self.population_size
        return 50 if len(g.conv_layers) <= 3 else 200


@dataclass(frozen=True)
class ConstraintSet:
    """Upper bounds; ``None`` means inactive. See :meth:`resolve`."""

    max_latency_s: float | None = None
    max_dsp: int | None = None
    max_lut: int | None = None
    max_bram: int | None = None

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value is not None and not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")

    def resolve(self, dev: DeviceProfile) -> "ConstraintSet":
        """Fill missing resource bounds with the device capacity."""
        return ConstraintSet(
            max_latency_s=self.max_latency_s,
            max_dsp=dev.dsp_max if self.max_dsp is None else self.max_dsp,
            max_lut=dev.lut_max if self.max_lut is None else self.max_lut,
            max_bram=dev.bram_blocks_max if self.max_bram is None else self.max_bram,
        )

    def _pairs(self, est: CostEstimate):
        return ((est.latency_s, self.max_latency_s), (est.dsp, self.max_dsp),
                (est.lut, self.max_lut), (est.bram, self.max_bram))

    def violation(self, est: CostEstimate) -> float:
        """Sum of relative excesses over active bounds; 0 means feasible."""
        return sum(max(0.0, (v - b) / b) for v, b in self._pairs(est) if b is not None)

    def resource_violation(self, est: CostEstimate) -> float:
        return sum(max(0.0, (v - b) / b) for v, b in self._pairs(est)[1:] if b is not None)

    def satisfied(self, est: CostEstimate) -> bool:
        return all(b is None or v <= b for v, b in self._pairs(est))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ConstraintSet":
        return cls(**d)


@dataclass
class ParetoFront:
    entries: list[tuple[PEAllocation, CostEstimate]]
    generations_run: int = 0
    evaluations: int = 0
    seed: int = 0
    hypervolume_history: list[float] = field(default_factory=list)
    # infeasible but close to the budget; reported, never used as results
    near_feasible: list[tuple[PEAllocation, CostEstimate]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def genomes(self) -> list[tuple[int, ...]]:
        return [a.as_vector() for a, _ in self.entries]

    def to_dict(self) -> dict:
        return {
            "generations_run": self.generations_run,
            "evaluations": self.evaluations,
            "seed": self.seed,
            "hypervolume_history": list(self.hypervolume_history),
            "entries": [_entry_dict(a, e, True) for a, e in self.entries],
            "near_feasible": [_entry_dict(a, e, False) for a, e in self.near_feasible],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParetoFront":
        def load(items):
            return [(PEAllocation.from_dict(x["allocation"]), CostEstimate.from_dict(x["estimate"]))
                    for x in items]
        try:
            return cls(entries=load(d["entries"]),
                       generations_run=d.get("generations_run", 0),
                       evaluations=d.get("evaluations", 0),
                       seed=d.get("seed", 0),
                       hypervolume_history=list(d.get("hypervolume_history", [])),
                       near_feasible=load(d.get("near_feasible", [])))
        except (KeyError, TypeError) as exc:
            raise MalformedDocument(f"bad Pareto front document: {exc}") from None

    def to_csv(self) -> str:
        n_conv = len(self.entries[0][0].conv_pe) if self.entries else (
            len(self.near_feasible[0][0].conv_pe) if self.near_feasible else 0)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"P{i + 1}" for i in range(n_conv)]
                   + ["fc_pe", "latency_s", "dsp", "lut", "bram", "feasible_flag"])
        for flag, items in ((1, self.entries), (0, self.near_feasible)):
            for a, e in items:
                w.writerow([*a.conv_pe, a.fc_pe, repr(float(e.latency_s)), e.dsp, e.lut, e.bram, flag])
        return buf.getvalue()


def _entry_dict(a: PEAllocation, e: CostEstimate, feasible: bool) -> dict:
    return {"allocation": a.to_dict(), "estimate": e.to_dict(), "feasible": feasible}


def read_front_csv(text: str) -> list[dict]:
    """Rows of a front CSV as dicts with numeric values."""
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        try:
            rows.append({k: (float(v) if k == "latency_s" else int(v)) for k, v in row.items()})
        except (TypeError, ValueError) as exc:
            raise MalformedDocument(f"bad front CSV row {row!r}: {exc}") from None
    return rows


# ---------------------------------------------------------------------------
# genetic operators

def _bounds(g: NetworkGraph, fixed_fc_pe: int | None) -> tuple[np.ndarray, np.ndarray]:
    lb, ub = allocation_bounds(g)
    if fixed_fc_pe is not None:
        if not lb[-1] <= fixed_fc_pe <= ub[-1]:
            raise ValueError(f"fixed_fc_pe {fixed_fc_pe} outside [{lb[-1]}, {ub[-1]}]")
        lb[-1] = ub[-1] = fixed_fc_pe
    return lb, ub


def initialize_population(g: NetworkGraph, cfg: MogaConfig,
                          rng: np.random.Generator | None = None) -> np.ndarray:
    """(population, genes) integer array drawn uniformly within the gene bounds."""
    if not g.conv_layers:
        raise ValueError("network has no conv layers to allocate")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    lb, ub = _bounds(g, cfg.fixed_fc_pe)
    n = cfg.population_for(g)
    return rng.integers(lb, ub + 1, size=(n, len(ub)))


def mutate(genome: Sequence[int], bounds: tuple[Sequence[int], Sequence[int]],
           rng: np.random.Generator, exponent: float = 4.0,
           rate: float = 1.0) -> np.ndarray:
    """Power-distribution mutation.

    With ``t`` the gene's scaled distance from its lower bound, a selected
    gene steps toward the lower bound with probability ``1 - t`` and toward
    the upper bound otherwise. The step is the fraction ``s = u**exponent``
    of the remaining distance, so small moves dominate. A gene sitting on a
    bound therefore stays there; only crossover moves it.
    """
    x = np.asarray(genome, dtype=float).copy()
    lb = np.asarray(bounds[0], dtype=float)
    ub = np.asarray(bounds[1], dtype=float)
    for i in range(len(x)):
        # draw all three variates so the stream position does not depend on outcomes
        pick, u, r = rng.random(3)
        if pick >= rate or ub[i] == lb[i]:
            continue
        s = u ** exponent
        t = (x[i] - lb[i]) / (ub[i] - lb[i])
        if t < r:
            x[i] = x[i] - s * (x[i] - lb[i])
        else:
            x[i] = x[i] + s * (ub[i] - x[i])
    return np.clip(np.rint(x), lb, ub).astype(int)


def crossover(a: Sequence[int], b: Sequence[int], rng: np.random.Generator
              ) -> tuple[np.ndarray, np.ndarray]:
    """Uniform crossover: each position swaps between the children with p = 1/2."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise LengthMismatch(f"parents have {a.size} and {b.size} genes")
    swap = rng.random(a.shape) < 0.5
    return np.where(swap, b, a), np.where(swap, a, b)


# ---------------------------------------------------------------------------
# ranking

def _dominates(fa, fb, va: float, vb: float) -> bool:
    if va == 0 and vb > 0:
        return True
    if va > 0 or vb > 0:
        return va < vb if va > 0 and vb > 0 else False
    return all(x <= y for x, y in zip(fa, fb)) and any(x < y for x, y in zip(fa, fb))


def non_dominated_sort(pop: Sequence[CostEstimate],
                       violations: Sequence[float] | None = None) -> list[list[int]]:
    """Fronts of indices under feasibility-first domination on (latency, DSP)."""
    n = len(pop)
    objs = [(e.latency_s, e.dsp) for e in pop]
    viol = list(violations) if violations is not None else [0.0] * n
    dominated_by = [[] for _ in range(n)]
    counts = [0] * n
    for i in range(n):
        for j in range(i + 1, n):
            if _dominates(objs[i], objs[j], viol[i], viol[j]):
                dominated_by[i].append(j)
                counts[j] += 1
            elif _dominates(objs[j], objs[i], viol[j], viol[i]):
                dominated_by[j].append(i)
                counts[i] += 1
    fronts = []
    current = [i for i in range(n) if counts[i] == 0]
    while current:
        fronts.append(current)
        nxt = []
        for i in current:
            for j in dominated_by[i]:
                counts[j] -= 1
                if counts[j] == 0:
                    nxt.append(j)
        current = sorted(nxt)
    return fronts


def crowding_distance(points: np.ndarray) -> np.ndarray:
    """Crowding distance of each row of an (n, m) objective array."""
    n, m = points.shape
    dist = np.zeros(n)
    if n <= 2:
        dist[:] = np.inf
        return dist
    for k in range(m):
        order = np.argsort(points[:, k], kind="stable")
        col = points[order, k]
        dist[order[0]] = dist[order[-1]] = np.inf
        span = col[-1] - col[0]
        if span > 0:
            dist[order[1:-1]] += (col[2:] - col[:-2]) / span
    return dist


def pareto_filter(points: Sequence[tuple[float, float]]) -> list[int]:
    """Indices of mutually non-dominated 2-D points (exact duplicates all kept)."""
    order = sorted(range(len(points)), key=lambda i: (points[i][0], points[i][1], i))
    keep = []
    best = math.inf
    prev = None
    for i in order:
        p = tuple(points[i])
        if p == prev and keep and tuple(points[keep[-1]]) == p:
            keep.append(i)
            continue
        if p[1] < best:
            keep.append(i)
            best = p[1]
        prev = p
    return sorted(keep)


def hypervolume(points: Sequence[tuple[float, float]], reference: tuple[float, float]) -> float:
    """Area dominated by ``points`` inside the box bounded by ``reference``,
    normalised so the whole box has area 1."""
    rx, ry = reference
    inside = [(x / rx, y / ry) for x, y in points if x < rx and y < ry]
    if not inside:
        return 0.0
    front = [inside[i] for i in pareto_filter(inside)]
    front.sort()
    area = 0.0
    prev_y = 1.0
    for x, y in front:
        if y < prev_y:
            area += (1.0 - x) * (prev_y - y)
            prev_y = y
    return area


# ---------------------------------------------------------------------------
# search loop

def _evaluate_one(args):
    g, genome, dev, terms = args
    return estimate(g, PEAllocation(tuple(genome[:-1]), genome[-1]), dev, terms)


class _Evaluator:
    def __init__(self, g, dev, terms, cons: ConstraintSet, n_jobs: int):
        self.g, self.dev, self.terms, self.cons = g, dev, terms, cons
        self.cache: dict[tuple[int, ...], tuple[CostEstimate, float]] = {}
        self.n_jobs = n_jobs
        self.pool = ProcessPoolExecutor(n_jobs) if n_jobs > 1 else None

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def __call__(self, genomes) -> list[tuple[CostEstimate, float]]:
        keys = [tuple(int(v) for v in row) for row in genomes]
        todo = list(dict.fromkeys(k for k in keys if k not in self.cache))
        args = [(self.g, k, self.dev, self.terms) for k in todo]
        if self.pool is not None and len(todo) > 1:
            results = list(self.pool.map(_evaluate_one, args, chunksize=8))
        else:
            results = [_evaluate_one(a) for a in args]
        for k, est in zip(todo, results):
            self.cache[k] = (est, self.cons.violation(est))
        return [self.cache[k] for k in keys]


def _rank_and_crowd(evals) -> tuple[np.ndarray, np.ndarray, list[list[int]]]:
    ests = [e for e, _ in evals]
    fronts = non_dominated_sort(ests, [v for _, v in evals])
    rank = np.empty(len(evals), dtype=int)
    crowd = np.empty(len(evals))
    for r, members in enumerate(fronts):
        rank[members] = r
        pts = np.array([(ests[i].latency_s, ests[i].dsp) for i in members], dtype=float)
        crowd[members] = crowding_distance(pts)
    return rank, crowd, fronts


def _tournament(rng, rank, crowd) -> int:
    i, j = rng.integers(0, len(rank), size=2)
    if rank[i] != rank[j]:
        return int(i if rank[i] < rank[j] else j)
    if crowd[i] != crowd[j]:
        return int(i if crowd[i] > crowd[j] else j)
    return int(min(i, j))


def explore(g: NetworkGraph, dev: DeviceProfile, cons: ConstraintSet | None = None,
            cfg: MogaConfig | None = None, terms: LatencyTerms | None = None) -> ParetoFront:
    """Search PE allocations; return the feasible non-dominated archive."""
    cfg = cfg or MogaConfig()
    cons = (cons or ConstraintSet()).resolve(dev)
    terms = (terms or LatencyTerms()).with_clock(dev)
    rng = np.random.default_rng(cfg.seed)
    lb, ub = _bounds(g, cfg.fixed_fc_pe)
    evaluator = _Evaluator(g, dev, terms, cons, cfg.n_jobs)
    try:
        return _search(g, cfg, cons, rng, lb, ub, evaluator)
    finally:
        evaluator.close()


def _search(g, cfg, cons, rng, lb, ub, evaluate) -> ParetoFront:
    (smallest, _), (largest, _) = evaluate([lb, ub])
    if cons.resource_violation(smallest) > 0:
        raise NoFeasibleDesign(
            f"the minimal allocation {tuple(lb)} already exceeds the resource budget "
            f"(dsp={smallest.dsp}, lut={smallest.lut}, bram={smallest.bram})")
    if cons.max_latency_s is not None and largest.latency_s > cons.max_latency_s:
        raise NoFeasibleDesign(
            f"even the fully parallel allocation takes {largest.latency_s:.6g} s "
            f"> max latency {cons.max_latency_s:.6g} s")
    reference = (smallest.latency_s * 1.1, largest.dsp * 1.1)

    pop = initialize_population(g, cfg, rng)
    pop_evals = evaluate(pop)
    archive: dict[tuple[int, ...], CostEstimate] = {}
    seen = 0

    def refresh_archive():
        nonlocal seen, archive
        fresh = list(evaluate.cache.items())[seen:]
        seen = len(evaluate.cache)
        candidates = list(archive.items()) + [(k, e) for k, (e, v) in fresh if v == 0]
        keep = pareto_filter([(e.latency_s, e.dsp) for _, e in candidates])
        archive = dict(candidates[i] for i in keep)
        return hypervolume([(e.latency_s, e.dsp) for e in archive.values()], reference)

    history = [refresh_archive()]
    n = len(pop)
    generations = 0
    stale = 0
    for generations in range(1, cfg.max_generations + 1):
        rank, crowd, _ = _rank_and_crowd(pop_evals)
        children = []
        while len(children) < n:
            a = pop[_tournament(rng, rank, crowd)]
            b = pop[_tournament(rng, rank, crowd)]
            if rng.random() < cfg.crossover_rate:
                a, b = crossover(a, b, rng)
            children.append(mutate(a, (lb, ub), rng, cfg.mutation_exponent, cfg.mutation_rate))
            children.append(mutate(b, (lb, ub), rng, cfg.mutation_exponent, cfg.mutation_rate))
        children = np.array(children[:n])
        child_evals = evaluate(children)

        merged = np.vstack([pop, children])
        merged_evals = pop_evals + child_evals
        _, crowd_all, fronts = _rank_and_crowd(merged_evals)
        survivors: list[int] = []
        for members in fronts:
            if len(survivors) + len(members) <= n:
                survivors += members
            else:
                members = sorted(members, key=lambda i: (-crowd_all[i], i))
                survivors += members[: n - len(survivors)]
                break
        pop = merged[survivors]
        pop_evals = [merged_evals[i] for i in survivors]

        history.append(refresh_archive())
        stale = stale + 1 if history[-1] - history[-2] < HV_TOLERANCE else 0
        log.debug("generation %d: archive=%d hv=%.6f", generations, len(archive), history[-1])
        if stale >= cfg.stagnation_window:
            log.info("stopping after %d generations without hypervolume gain", stale)
            break

    if not archive:
        raise NoFeasibleDesign("no evaluated allocation satisfies every constraint")

    def to_alloc(k):
        return PEAllocation(k[:-1], k[-1])

    entries = sorted(((to_alloc(k), e) for k, e in archive.items()),
                     key=lambda x: (x[1].latency_s, x[1].dsp, x[0].as_vector()))
    near = _near_feasible(evaluate.cache, archive)
    return ParetoFront(entries=entries, generations_run=generations,
                       evaluations=len(evaluate.cache), seed=cfg.seed,
                       hypervolume_history=history,
                       near_feasible=[(to_alloc(k), e) for k, e in near])


def _near_feasible(cache, archive, slack: float = 0.1, limit: int = 10):
    """Infeasible genomes within ``slack`` total violation that no archive
    entry dominates."""
    feas = [(e.latency_s, e.dsp) for e in archive.values()]
    out = []
    for k, (e, v) in cache.items():
        if 0 < v <= slack:
            p = (e.latency_s, e.dsp)
            if not any(f[0] <= p[0] and f[1] <= p[1] and f != p for f in feas):
                out.append((v, k, e))
    out.sort(key=lambda x: (x[0], x[1]))
    return [(k, e) for _, k, e in out[:limit]]


class MogaExplorer(BaseEstimator):
    """Estimator front-end to :func:`explore`; ``fit(graph)`` sets ``front_``."""

    def __init__(self, device: DeviceProfile | None = None, constraints: ConstraintSet | None = None,
                 terms: LatencyTerms | None = None, population_size: int | None = None,
                 max_generations: int = 100, crossover_rate: float = 0.9,
                 mutation_rate: float = 0.3, mutation_exponent: float = 4.0,
                 stagnation_window: int = 25, fixed_fc_pe: int | None = None,
                 n_jobs: int = 1, seed: int = 0):
        self.device = device
        self.constraints = constraints
        self.terms = terms
        self.population_size = population_size
        self.max_generations = max_generations
        self.crossover_rate = crossover_rate
        self.mutation_rate = mutation_rate
        self.mutation_exponent = mutation_exponent
        self.stagnation_window = stagnation_window
        self.fixed_fc_pe = fixed_fc_pe
        self.n_jobs = n_jobs
        self.seed = seed

    def config(self) -> MogaConfig:
        return MogaConfig(
            population_size=self.population_size, max_generations=self.max_generations,
            crossover_rate=self.crossover_rate, mutation_rate=self.mutation_rate,
            seed=self.seed, stagnation_window=self.stagnation_window,
            mutation_exponent=self.mutation_exponent, fixed_fc_pe=self.fixed_fc_pe,
            n_jobs=self.n_jobs)

    def fit(self, X: NetworkGraph, y=None):
        if not isinstance(X, NetworkGraph):
            raise TypeError("MogaExplorer.fit expects a NetworkGraph")
        self.device_ = self.device or DeviceProfile.load("zynq7100")
        self.constraints_ = (self.constraints or ConstraintSet()).resolve(self.device_)
        self.front_ = explore(X, self.device_, self.constraints_, self.config(), self.terms)
        return self


__all__ = [
    "ConstraintSet", "MogaConfig", "MogaExplorer", "ParetoFront",
    "crossover", "crowding_distance", "explore", "hypervolume", "initialize_population",
    "mutate", "non_dominated_sort", "pareto_filter", "read_front_csv",
]
