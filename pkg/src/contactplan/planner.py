"""Lattice planning with Weighted A*: collision hypothesis sets, discrepancy
penalties, occupancy-biased edge costs, and hard pruning of provably
infeasible edges only.

Hypothesis sets and recorded collisions may assign an edge validity of zero
(infinite cost); the occupancy term is bounded and only biases the search, so
no feasible edge is ever excluded while validities stay positive.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .kinematics import ArmModel, Config, angles_of, robot_cells, swept_cells
from .occupancy import OccupancyEstimate
from .workspace import Cell, GridSpec, dilate_cells

Action = tuple[int, int]  # (joint index, -1 or +1)


@dataclass(frozen=True)
class ChsSet:
    """Cells recorded at a collision, at least one of which is occupied."""

    cells: frozenset[Cell]
    origin_edge: tuple[Config, Config] | None = None
    created_iter: int = 0

    def __post_init__(self):
        if len(self.cells) < 1:
            raise ValueError("a hypothesis set needs at least one cell")


@dataclass
class DiscrepancySet:
    """State-action pairs whose execution contradicted the nominal model."""

    entries: set[tuple[tuple[int, ...], Action]] = field(default_factory=set)
    delta: float = 2.0  # hypersphere radius, lattice steps
    zeta: float = 5.0  # penalty scale

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be > 0")


@dataclass(frozen=True)
class CostModel:
    mode: str = "chs"  # chs | cmax | estimate_only
    alpha: float = 10.0
    beta: float = 1.0
    prune_threshold: float = 0.8
    heuristic_weight: float = 5.0
    expansion_budget: int = 200_000

    def __post_init__(self):
        if self.mode not in ("chs", "cmax", "estimate_only"):
            raise ValueError(f"unknown cost mode {self.mode!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.heuristic_weight < 1:
            raise ValueError("heuristic weight must be >= 1")


@dataclass
class PlanContext:
    """Immutable snapshot of everything edge costs depend on, plus caches.

    The swept-volume cache may be shared across plans (and episodes) for the
    same (arm, spec, substeps); sweeps do not depend on the scene.
    """

    arm: ArmModel
    spec: GridSpec
    estimate: OccupancyEstimate
    pred: np.ndarray
    chs: list[ChsSet] = field(default_factory=list)
    disc: DiscrepancySet = field(default_factory=DiscrepancySet)
    invalid_edges: set[tuple[tuple[int, ...], tuple[int, ...]]] = field(default_factory=set)
    substeps: int = 8
    sweep_cache: dict = field(default_factory=dict)

    def swept(self, q_from: Config, q_to: Config) -> frozenset[Cell]:
        key = edge_key(q_from, q_to)
        hit = self.sweep_cache.get(key)
        if hit is None:
            hit = frozenset(swept_cells(self.arm, q_from, q_to, self.spec, self.substeps))
            self.sweep_cache[key] = hit
        return hit


def edge_key(q_from: Config, q_to: Config) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Canonical undirected edge identity."""
    a, b = q_from.steps, q_to.steps
    return (a, b) if a <= b else (b, a)


def edge_action(q_from: Config, q_to: Config) -> Action:
    for j, (a, b) in enumerate(zip(q_from.steps, q_to.steps)):
        if a != b:
            return (j, 1 if b > a else -1)
    return (0, 0)  # degenerate self-edge


def chs_from_collision(
    arm: ArmModel,
    q_col,
    est: OccupancyEstimate,
    spec: GridSpec,
    origin_edge: tuple[Config, Config] | None = None,
    created_iter: int = 0,
) -> ChsSet:
    """Hypothesis set at a collision configuration: the one-cell dilation ring
    of the robot footprint, minus the footprint, minus known-free cells. Falls
    back to the unfiltered ring when the filter empties it."""
    footprint = robot_cells(arm, q_col, spec)
    if not footprint:
        raise ValueError("collision configuration has no footprint inside the grid")
    ring = dilate_cells(footprint, spec, 1) - footprint
    filtered = {c for c in ring if not est.is_known_free(c)}
    cells = filtered or ring
    if not cells:
        raise ValueError("footprint covers the whole grid; no hypothesis ring exists")
    return ChsSet(cells=frozenset(cells), origin_edge=origin_edge, created_iter=created_iter)


def edge_validity(swept, chs: list[ChsSet]) -> float:
    """Probability the edge is valid given all hypothesis sets: the product of
    (1 - swept fraction) per set; zero when some set is fully swept."""
    swept = set(swept)
    p = 1.0
    for k in chs:
        p *= 1.0 - len(swept & k.cells) / len(k.cells)
        if p == 0.0:
            return 0.0
    return p


def context_validity(ctx: PlanContext, q_from: Config, q_to: Config) -> float:
    """Edge validity under the full record: attempted-and-collided edges have
    zero validity and are never re-executed."""
    if edge_key(q_from, q_to) in ctx.invalid_edges:
        return 0.0
    return edge_validity(ctx.swept(q_from, q_to), ctx.chs)


def cmax_penalty(s: Config, a: Action, disc: DiscrepancySet) -> float:
    """Infinite for a recorded (state, action); otherwise the scaled inverse
    distance to the nearest same-action discrepancy within the radius."""
    if (s.steps, a) in disc.entries:
        return math.inf
    best = 0.0
    sv = np.asarray(s.steps, dtype=float)
    for steps, action in disc.entries:
        if action != a:
            continue
        d = float(np.linalg.norm(sv - np.asarray(steps, dtype=float)))
        if 0.0 < d < disc.delta:
            best = max(best, disc.zeta / d)
    return best


def occupancy_edge_cost(ctx: PlanContext, swept) -> float:
    """Mean predicted occupancy over the sweep, skipping certified-free cells;
    bounded in [0, 1]."""
    if not swept:
        return 0.0
    total = 0.0
    for cell in swept:
        if not ctx.estimate.is_known_free(cell):
            total += float(ctx.pred[cell])
    return total / len(swept)


def edge_cost(q_from: Config, q_to: Config, model: CostModel, ctx: PlanContext) -> float:
    """Unit lattice cost plus the mode's penalty terms; infinite only for
    provably infeasible edges (or above-threshold estimate cells in
    estimate-only mode)."""
    swept = ctx.swept(q_from, q_to)
    c_w = occupancy_edge_cost(ctx, swept)
    if model.mode == "chs":
        p = context_validity(ctx, q_from, q_to)
        if p <= 0.0:
            return math.inf
        return 1.0 + model.alpha * (1.0 / p - 1.0) + model.beta * c_w
    if model.mode == "cmax":
        pen = cmax_penalty(q_from, edge_action(q_from, q_to), ctx.disc)
        if math.isinf(pen):
            return math.inf
        return 1.0 + pen + model.beta * c_w
    # estimate_only
    if edge_key(q_from, q_to) in ctx.invalid_edges:
        return math.inf
    for cell in swept:
        if float(ctx.pred[cell]) > model.prune_threshold:
            return math.inf
    return 1.0 + model.beta * c_w


@dataclass(frozen=True)
class PlanResult:
    status: str  # success | infeasible | budget
    path: list[Config]
    cost: float
    expansions: int


def _lattice_distance(a: tuple[int, ...], b: tuple[int, ...]) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))


def plan(start: Config, goal: Config, model: CostModel, ctx: PlanContext) -> PlanResult:
    """Weighted A* (f = g + w h, Euclidean lattice heuristic) over unit motion
    primitives. Ties break on lower g, then lexicographic config order; the
    search is deterministic and returns infeasible only when the open list
    empties."""
    start.validate_for(ctx.arm)
    goal.validate_for(ctx.arm)
    if start == goal:
        return PlanResult("success", [start], 0.0, 0)
    w = model.heuristic_weight
    L = ctx.arm.num_links
    n = ctx.arm.steps_per_joint
    g_best: dict[tuple[int, ...], float] = {start.steps: 0.0}
    parent: dict[tuple[int, ...], tuple[int, ...]] = {}
    open_heap: list[tuple[float, float, tuple[int, ...]]] = []
    heapq.heappush(open_heap, (w * _lattice_distance(start.steps, goal.steps), 0.0, start.steps))
    closed: set[tuple[int, ...]] = set()
    expansions = 0
    while open_heap:
        _, g, steps = heapq.heappop(open_heap)
        if steps in closed or g > g_best.get(steps, math.inf):
            continue
        if steps == goal.steps:
            path = [steps]
            while path[-1] in parent:
                path.append(parent[path[-1]])
            return PlanResult("success", [Config(s) for s in reversed(path)], g, expansions)
        closed.add(steps)
        expansions += 1
        if expansions > model.expansion_budget:
            return PlanResult("budget", [], math.inf, expansions)
        q = Config(steps)
        for joint in range(L):
            for d in (-1, 1):
                k = steps[joint] + d
                if not 0 <= k < n:
                    continue
                nxt = steps[:joint] + (k,) + steps[joint + 1 :]
                if nxt in closed:
                    continue
                c = edge_cost(q, Config(nxt), model, ctx)
                if math.isinf(c):
                    continue
                ng = g + c
                if ng < g_best.get(nxt, math.inf):
                    g_best[nxt] = ng
                    parent[nxt] = steps
                    f = ng + w * _lattice_distance(nxt, goal.steps)
                    heapq.heappush(open_heap, (f, ng, nxt))
    return PlanResult("infeasible", [], math.inf, expansions)


def prune_chs(
    chs: list[ChsSet], newly_free: set[Cell] | frozenset[Cell]
) -> tuple[list[ChsSet], list[Cell]]:
    """Drop certified-free cells from every hypothesis set. A set reduced to a
    single cell pins that cell as provably occupied; such cells are returned
    for the caller to mark in the estimate. Sets never shrink to empty (free
    certification is sound), but an empty result is left untouched
    defensively."""
    out: list[ChsSet] = []
    forced: list[Cell] = []
    for k in chs:
        remaining = k.cells - newly_free
        if not remaining:
            out.append(k)
            continue
        if len(remaining) == 1 and len(k.cells) > 1:
            forced.append(next(iter(remaining)))
        if remaining == k.cells:
            out.append(k)
        else:
            out.append(ChsSet(cells=remaining, origin_edge=k.origin_edge, created_iter=k.created_iter))
    return out, forced
