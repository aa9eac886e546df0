"""Benchmark campaigns over randomized scenes: per-episode JSON lines, an
aggregate CSV in a fixed column layout, and dataset export for training
external occupancy predictors.

Everything is a pure function of (config, seeds): reruns produce
byte-identical outputs, and episodes may run in a worker pool without
changing results.
"""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .contact import ContactEstimate, CpfParams
from .dynamics import DynParams, simulate_edge
from .executive import NoiseMode, Scenario, run_episode
from .kinematics import ArmModel, Config, fk_points, project_to_surface, robot_cells, step_to_angles
from .occupancy import (
    OccupancyEstimate,
    PredictorConfig,
    encode_request,
    pack_frame,
    unpack_frame,
)
from .planner import CostModel
from .rng import derive_seed, make_rng
from .workspace import GridSpec, SceneParams, generate_scene

CSV_HEADER = "domain,variant,success_rate,num_iters,plan_s,exec_s,pred_s,contact_s,total_s"

_GOAL_TRIES = 64
_SCENE_TRIES = 5


def _dataclass_from(cls, data: dict | None, **fixed):
    """Build a config dataclass from a plain dict, tuple-ifying sequences."""
    data = dict(data or {})
    data.update(fixed)
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    coerced = {}
    for k, v in data.items():
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        coerced[k] = v
    return cls(**coerced)


@dataclass(frozen=True)
class BenchmarkConfig:
    domains: tuple[str, ...] = ("pipe",)
    variants: tuple[tuple[str, str], ...] = (("chs", "none"), ("chs", "structural"))
    episodes_per_cell: int = 200
    base_seed: int = 0
    output_dir: str = "bench_out"
    overrides: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        if self.episodes_per_cell < 1:
            raise ValueError("episodes_per_cell must be >= 1")
        if not self.variants:
            raise ValueError("variant list must be non-empty")

    @classmethod
    def from_dict(cls, data: dict) -> "BenchmarkConfig":
        return _dataclass_from(cls, data)


def variant_label(mode: str, predictor_kind: str) -> str:
    return mode if predictor_kind == "none" else f"{mode}+{predictor_kind}"


def reference_grid(overrides: dict | None = None) -> GridSpec:
    return _dataclass_from(GridSpec, (overrides or {}).get("grid"))


def reference_arm(overrides: dict | None = None) -> ArmModel:
    data = (overrides or {}).get("arm") or {}
    defaults = dict(
        base=(0.02, 0.4),
        link_lengths=(0.3, 0.26),
        link_radius=0.03,
        link_masses=(1.2, 0.9),
        steps_per_joint=9,
        joint_range=((-0.9, 0.9), (-2.4, 2.4)),
    )
    defaults.update(data)
    return _dataclass_from(ArmModel, defaults)


def _home_config(arm: ArmModel, overrides: dict | None) -> Config:
    if overrides and "start" in overrides:
        return Config(tuple(overrides["start"]))
    # joint 0 centered, joint 1 at its lowest step: a folded, compact pose
    return Config(((arm.steps_per_joint - 1) // 2, 0))


def _sample_goal(arm: ArmModel, spec: GridSpec, start: Config, seed: int, overrides) -> Config:
    if overrides and "goal" in overrides:
        return Config(tuple(overrides["goal"]))
    rng = make_rng(seed, "goal")
    width = spec.origin[0] + spec.dims[0] * spec.resolution
    best = None
    for _ in range(_GOAL_TRIES):
        steps = tuple(int(rng.integers(0, arm.steps_per_joint)) for _ in range(arm.num_links))
        if steps == start.steps:
            continue
        q = Config(steps)
        from .kinematics import fk_points, step_to_angles

        tip = fk_points(arm, step_to_angles(arm, q))[-1]
        l1 = sum(abs(a - b) for a, b in zip(steps, start.steps))
        if tip[0] >= 0.55 * width and l1 >= 6:
            return q
        if best is None or l1 > best[0]:
            best = (l1, q)
    return best[1]


def build_scenario(
    domain: str,
    seed: int,
    mode: str = "chs",
    predictor_kind: str = "none",
    overrides: dict | None = None,
) -> Scenario:
    """Reference desk-scale scenario: fixed arm and grid, per-seed scene and
    goal; start/goal footprints are carved free of the scene."""
    overrides = overrides or {}
    spec = reference_grid(overrides)
    arm = reference_arm(overrides)
    params = _dataclass_from(SceneParams, overrides.get("scene"), domain=domain)
    start = _home_config(arm, overrides)
    start.validate_for(arm)
    world = None
    goal = None
    for attempt in range(_SCENE_TRIES):
        goal = _sample_goal(arm, spec, start, derive_seed(seed, "goal", attempt), overrides)
        keepout = robot_cells(arm, start, spec) | robot_cells(arm, goal, spec)
        try:
            world = generate_scene(params, spec, seed, keepout=frozenset(keepout))
            break
        except Exception:
            if attempt == _SCENE_TRIES - 1:
                raise
    return Scenario(
        arm=arm,
        world=world,
        start=start,
        goal=goal,
        dyn=_dataclass_from(DynParams, overrides.get("dyn")),
        cpf=_dataclass_from(CpfParams, overrides.get("cpf")),
        predictor=_dataclass_from(PredictorConfig, overrides.get("predictor"), kind=predictor_kind),
        cost_model=_dataclass_from(CostModel, overrides.get("cost_model"), mode=mode),
        max_iterations=overrides.get("max_iterations", 20),
        noise_mode=_dataclass_from(NoiseMode, overrides.get("noise_mode")),
        substeps=overrides.get("substeps", 8),
    )


def _episode_row(domain, mode, predictor_kind, overrides, seed, index, sweep_cache=None):
    sc = build_scenario(domain, seed, mode, predictor_kind, overrides)
    report = run_episode(sc, seed, sweep_cache=sweep_cache)
    row = {"domain": domain, "variant": variant_label(mode, predictor_kind), "seed": seed,
           "episode": index}
    row.update(report.to_json_dict(include_events=False))
    return row


def _episode_row_star(args):
    return _episode_row(*args)


def run_cell(
    domain: str,
    mode: str,
    predictor_kind: str,
    cfg: BenchmarkConfig,
) -> list[dict]:
    """All episode rows for one (domain, variant) benchmark cell."""
    seeds = [(domain, mode, predictor_kind, cfg.overrides, cfg.base_seed + i, i)
             for i in range(cfg.episodes_per_cell)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(_episode_row_star, seeds))
    cache: dict = {}
    return [_episode_row(*args, sweep_cache=cache) for args in seeds]


def aggregate_rows(rows: list[dict]) -> dict:
    n = len(rows)
    return {
        "success_rate": sum(1.0 for r in rows if r["success"]) / n,
        "num_iters": sum(r["num_iters"] for r in rows) / n,
        "plan_s": sum(r["plan_s"] for r in rows) / n,
        "exec_s": sum(r["exec_s"] for r in rows) / n,
        "pred_s": sum(r["pred_s"] for r in rows) / n,
        "contact_s": sum(r["contact_s"] for r in rows) / n,
        "total_s": sum(r["total_s"] for r in rows) / n,
    }


def run_benchmark(cfg: BenchmarkConfig) -> dict[str, Path]:
    """Run every (domain, variant) cell; write per-episode JSON lines and the
    aggregate CSV. Identical configs produce byte-identical files."""
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_lines = [CSV_HEADER]
    outputs: dict[str, Path] = {}
    for domain in cfg.domains:
        for mode, predictor_kind in cfg.variants:
            label = variant_label(mode, predictor_kind)
            rows = run_cell(domain, mode, predictor_kind, cfg)
            jsonl = out_dir / f"episodes_{domain}_{label.replace('+', '_')}.jsonl"
            with open(jsonl, "w", encoding="utf-8") as fh:
                for row in rows:
                    fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
            outputs[f"{domain}/{label}"] = jsonl
            agg = aggregate_rows(rows)
            csv_lines.append(
                ",".join(
                    [domain, label]
                    + [format(agg[k], ".12g") for k in
                       ("success_rate", "num_iters", "plan_s", "exec_s", "pred_s",
                        "contact_s", "total_s")]
                )
            )
    csv_path = out_dir / "summary.csv"
    csv_path.write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    outputs["summary"] = csv_path
    return outputs


# --- dataset export -----------------------------------------------------------


def _random_free_config(arm: ArmModel, rng) -> Config:
    steps = tuple(int(rng.integers(0, arm.steps_per_joint)) for _ in range(arm.num_links))
    return Config(steps)


def export_dataset(
    domain: str, count: int, seed: int, out_path, overrides: dict | None = None
) -> Path:
    """Write `count` framed (partial estimate, interacted-object label)
    records produced by executing 1-7 random primitives per scene.

    Record layout: a predict-request frame holding the {0,1,2}-byte partial
    estimate, immediately followed by a dataset-label frame holding a
    {0,2}-byte grid where only objects the arm actually touched are occupied.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    overrides = overrides or {}
    spec = reference_grid(overrides)
    arm = reference_arm(overrides)
    params = _dataclass_from(SceneParams, overrides.get("scene"), domain=domain)
    dyn = _dataclass_from(DynParams, overrides.get("dyn"))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "wb") as fh:
        for i in range(count):
            rec_seed = derive_seed(seed, "dataset", i)
            rng = make_rng(rec_seed, "record")
            start = _random_free_config(arm, rng)
            world = generate_scene(
                params, spec, rec_seed, keepout=frozenset(robot_cells(arm, start, spec))
            )
            est = OccupancyEstimate(spec)
            touched: set[int] = set()
            current = start
            n_actions = int(rng.integers(1, 8))
            for k in range(n_actions):
                moves = []
                for joint in range(arm.num_links):
                    for d in (-1, 1):
                        step = current.steps[joint] + d
                        if 0 <= step < arm.steps_per_joint:
                            moves.append((joint, d))
                joint, d = moves[int(rng.integers(0, len(moves)))]
                target = Config(
                    current.steps[:joint] + (current.steps[joint] + d,) + current.steps[joint + 1 :]
                )
                trace = simulate_edge(
                    world, arm, dyn, current, target, derive_seed(rec_seed, "act", k),
                    collect_samples=False,
                )
                est.certify_free(trace.certified_cells)
                if trace.outcome == "completed":
                    current = target
                    continue
                info = trace.contact
                touched.add(world.object_ids[info.first_cell])
                sigma = spec.resolution
                noisy = info.point.point + rng.normal(0.0, sigma, size=2)
                sp = project_to_surface(arm, info.config_angles, noisy)
                try:
                    est.mark_contact(
                        ContactEstimate(point=sp.point.copy(), surface=sp,
                                        force=np.zeros(2), confidence=1.0)
                    )
                except Exception:
                    pass  # noisy point may project outside the grid
            from .occupancy import encode_request

            label = np.zeros(spec.dims, dtype=np.uint8)
            for cell, oid in world.object_ids.items():
                if oid in touched:
                    label[cell] = 2
            fh.write(encode_request(est))
            fh.write(
                pack_frame({"kind": "dataset-label", "dims": list(spec.dims)},
                           label.tobytes(order="C"))
            )
    return out_path


def read_dataset(path) -> list[tuple[np.ndarray, np.ndarray]]:
    """Parse an exported dataset back into (input, label) grid pairs."""
    buf = Path(path).read_bytes()
    records = []
    offset = 0
    while offset < len(buf):
        header, payload, offset = unpack_frame(buf, offset)
        dims = tuple(header["dims"])
        inp = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
        header2, payload2, offset = unpack_frame(buf, offset)
        label = np.frombuffer(payload2, dtype=np.uint8).reshape(tuple(header2["dims"]))
        records.append((inp, label))
    return records
