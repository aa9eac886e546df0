"""The iterative plan-execute loop: plan over the current belief snapshot,
execute edges until contact, localize, update the estimate and the collision
records, retract, and replan until the goal is reached or the run fails.

Reported component "times" are deterministic simulated quantities derived
from counters (expansions, unit steps, predictor cell visits, contacts), so
identical (scenario, seed) pairs reproduce byte-identical reports; wall-clock
never enters a report.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .contact import (
    ContactEstimate,
    CpfParams,
    cpf_localize,
    first_detection_index,
    run_observer,
)
from .dynamics import ContactInfo, DynParams, ExecutionTrace, simulate_edge
from .kinematics import (
    ArmModel,
    Config,
    InvalidPrimitive,
    angles_of,
    project_to_surface,
    robot_cells,
    validate_primitive,
)
from .occupancy import OccupancyEstimate, PredictorConfig, predict
from .planner import (
    ChsSet,
    CostModel,
    DiscrepancySet,
    PlanContext,
    chs_from_collision,
    edge_action,
    edge_key,
    plan,
    prune_chs,
)
from .rng import derive_seed, make_rng
from .workspace import GroundTruthGrid

# Simulated-time accounting (seconds per counted unit).
PLAN_S_PER_EXPANSION = 1e-5
PRED_S_PER_CELL = 1e-7
CONTACT_S_OBSERVER = 0.05
CONTACT_S_DIRECT = 0.002


class PathDiscontinuity(Exception):
    """Consecutive path configurations are not unit motion primitives."""


@dataclass(frozen=True)
class NoiseMode:
    kind: str = "direct"  # direct | observer
    sigma_cells: float = 1.0  # direct-mode localization noise, in cells

    def __post_init__(self):
        if self.kind not in ("direct", "observer"):
            raise ValueError(f"unknown noise mode {self.kind!r}")
        if self.sigma_cells < 0:
            raise ValueError("sigma_cells must be >= 0")


@dataclass(frozen=True)
class Scenario:
    arm: ArmModel
    world: GroundTruthGrid
    start: Config
    goal: Config
    dyn: DynParams = field(default_factory=DynParams)
    cpf: CpfParams = field(default_factory=CpfParams)
    predictor: PredictorConfig = field(default_factory=lambda: PredictorConfig(kind="none"))
    cost_model: CostModel = field(default_factory=CostModel)
    max_iterations: int | None = 20
    noise_mode: NoiseMode = field(default_factory=NoiseMode)
    substeps: int = 8
    spread_radius: int = 1
    edge_duration: float = 1.0
    sample_rate: float = 500.0
    dwell_substeps: int = 2

    def __post_init__(self):
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1 (or None for uncapped)")
        for name, q in (("start", self.start), ("goal", self.goal)):
            q.validate_for(self.arm)
            if robot_cells(self.arm, q, self.world.spec) & self.world.occupied:
                raise ValueError(f"{name} configuration is in collision")


@dataclass(frozen=True)
class EdgeEvent:
    q_from: Config
    q_to: Config
    outcome: str  # completed | contact
    certified: frozenset
    contact: ContactInfo | None
    cost: int = 1


@dataclass
class EpisodeReport:
    success: bool
    failure_kind: str  # none | plan_fail | iteration_cap
    num_iters: int
    plan_s: float
    exec_s: float
    pred_s: float
    contact_s: float
    total_s: float
    edges_executed: int
    contacts: int
    events: list[dict] = field(default_factory=list)

    def to_json_dict(self, include_events: bool = True) -> dict:
        out = {
            "success": self.success,
            "failure_kind": self.failure_kind,
            "num_iters": self.num_iters,
            "plan_s": self.plan_s,
            "exec_s": self.exec_s,
            "pred_s": self.pred_s,
            "contact_s": self.contact_s,
            "total_s": self.total_s,
            "edges_executed": self.edges_executed,
            "contacts": self.contacts,
        }
        if include_events:
            out["events"] = self.events
        return out

    def to_json(self, include_events: bool = True) -> str:
        return json.dumps(self.to_json_dict(include_events), sort_keys=True, separators=(",", ":"))


def execute_path(sc: Scenario, path: list[Config], seed: int) -> tuple[Config, list[EdgeEvent]]:
    """Execution operator: attempt the path edge by edge, halting and
    retracting to the edge source at first contact. A contacted edge counts
    one unit step (the attempt-and-retract motion)."""
    if len(path) <= 1:
        return (path[0] if path else sc.start, [])
    for a, b in zip(path, path[1:]):
        try:
            validate_primitive(sc.arm, a, b)
        except InvalidPrimitive as exc:
            raise PathDiscontinuity(str(exc)) from exc
    events: list[EdgeEvent] = []
    current = path[0]
    for i, (a, b) in enumerate(zip(path, path[1:])):
        trace = simulate_edge(
            sc.world,
            sc.arm,
            sc.dyn,
            a,
            b,
            derive_seed(seed, "edge", i),
            substeps=sc.substeps,
            duration=sc.edge_duration,
            sample_rate=sc.sample_rate,
            dwell_substeps=sc.dwell_substeps,
            collect_samples=False,
        )
        events.append(
            EdgeEvent(a, b, trace.outcome, trace.certified_cells, trace.contact)
        )
        if trace.outcome == "contact":
            return a, events
        current = b
    return current, events


def _localize(
    sc: Scenario, trace: ExecutionTrace, est: OccupancyEstimate, edge_seed: int
) -> tuple[ContactEstimate, bool]:
    """Contact estimate per noise mode; returns (estimate, detected)."""
    info = trace.contact
    assert info is not None
    if sc.noise_mode.kind == "direct":
        rng = make_rng(edge_seed, "directloc")
        sigma = sc.noise_mode.sigma_cells * sc.world.spec.resolution
        noisy = info.point.point + rng.normal(0.0, sigma, size=2)
        sp = project_to_surface(sc.arm, info.config_angles, noisy)
        return (
            ContactEstimate(point=sp.point.copy(), surface=sp, force=np.zeros(2), confidence=1.0),
            True,
        )
    residuals = run_observer(trace.samples, sc.arm, sc.dyn)
    detected = first_detection_index(residuals, sc.cpf.detect_threshold) is not None
    dwell_n = max(1, int(round(sc.dwell_substeps * sc.edge_duration / sc.substeps * sc.sample_rate)))
    window = residuals[-max(10, dwell_n // 2) :]
    estimate = cpf_localize(
        window,
        sc.arm,
        info.config_angles,
        info.approach_velocity,
        est,
        sc.cpf,
        derive_seed(edge_seed, "cpf"),
    )
    return estimate, detected


def run_episode(sc: Scenario, seed: int, sweep_cache: dict | None = None) -> EpisodeReport:
    """One full plan-execute run; deterministic for a given (scenario, seed)."""
    est = OccupancyEstimate(sc.world.spec)
    chs: list[ChsSet] = []
    disc = DiscrepancySet()
    invalid: set = set()
    cache: dict = {} if sweep_cache is None else sweep_cache
    current = sc.start
    iters = 0
    edges = 0
    contacts = 0
    plan_s = exec_s = pred_s = contact_s = 0.0
    events: list[dict] = []
    success = False
    failure = "none"
    collect_observer = sc.noise_mode.kind == "observer"

    while True:
        if sc.max_iterations is not None and iters >= sc.max_iterations:
            failure = "iteration_cap"
            break
        iters += 1
        pred = predict(est, sc.predictor)
        if sc.predictor.kind != "none":
            pred_s += PRED_S_PER_CELL * sc.world.spec.num_cells
        ctx = PlanContext(
            arm=sc.arm,
            spec=sc.world.spec,
            estimate=est,
            pred=pred,
            chs=chs,
            disc=disc,
            invalid_edges=invalid,
            substeps=sc.substeps,
            sweep_cache=cache,
        )
        result = plan(current, sc.goal, sc.cost_model, ctx)
        plan_s += PLAN_S_PER_EXPANSION * result.expansions
        events.append(
            {
                "iter": iters,
                "event": "plan",
                "status": result.status,
                "cost": result.cost if result.status == "success" else None,
                "expansions": result.expansions,
                "length": max(0, len(result.path) - 1),
            }
        )
        if result.status != "success":
            failure = "plan_fail"
            break

        contacted = False
        for i, (a, b) in enumerate(zip(result.path, result.path[1:])):
            edge_seed = derive_seed(seed, "edge", iters, i)
            trace = simulate_edge(
                sc.world,
                sc.arm,
                sc.dyn,
                a,
                b,
                edge_seed,
                substeps=sc.substeps,
                duration=sc.edge_duration,
                sample_rate=sc.sample_rate,
                dwell_substeps=sc.dwell_substeps,
                collect_samples=collect_observer,
            )
            edges += 1
            exec_s += sc.edge_duration
            if trace.outcome == "completed":
                est.certify_free(trace.certified_cells)
                chs, forced = prune_chs(chs, trace.certified_cells)
                for cell in forced:
                    est.set_occupied(cell)
                current = b
                continue

            # Contact: localize against the pre-update estimate, then fold in
            # everything learned from the attempt and retract to the source.
            contacts += 1
            contact_s += CONTACT_S_OBSERVER if collect_observer else CONTACT_S_DIRECT
            info = trace.contact
            estimate_c, detected = _localize(sc, trace, est, edge_seed)
            est.certify_free(trace.certified_cells)
            chs, forced = prune_chs(chs, trace.certified_cells)
            for cell in forced:
                est.set_occupied(cell)
            est.mark_contact(estimate_c, sc.spread_radius)
            a0 = angles_of(sc.arm, a)
            a1 = angles_of(sc.arm, b)
            q_col = a0 + (info.substep - 1) / sc.substeps * (a1 - a0)
            chs.append(
                chs_from_collision(
                    sc.arm, q_col, est, sc.world.spec, origin_edge=(a, b), created_iter=iters
                )
            )
            disc.entries.add((a.steps, edge_action(a, b)))
            invalid.add(edge_key(a, b))
            events.append(
                {
                    "iter": iters,
                    "event": "contact",
                    "edge": [list(a.steps), list(b.steps)],
                    "substep": info.substep,
                    "detected": detected,
                    "estimate": [float(x) for x in estimate_c.point],
                    "confidence": estimate_c.confidence,
                }
            )
            current = a
            contacted = True
            break

        if not contacted and current == sc.goal:
            success = True
            break

    total = plan_s + exec_s + pred_s + contact_s
    return EpisodeReport(
        success=success,
        failure_kind="none" if success else failure,
        num_iters=iters,
        plan_s=plan_s,
        exec_s=exec_s,
        pred_s=pred_s,
        contact_s=contact_s,
        total_s=total,
        edges_executed=edges,
        contacts=contacts,
        events=events,
    )
