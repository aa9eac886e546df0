"""Simulator-side truth: planar rigid-body dynamics for the uniform-rod arm,
proprioceptive stream synthesis during edge execution, and contact force
injection when the arm penetrates ground-truth obstacles.

The arm tracks the commanded joint-interpolated trajectory exactly; the
applied torque is the model feedforward minus the external contact torque,
so the momentum observer's residual converges to J^T F exactly in the
noiseless limit.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kinematics import (
    ArmModel,
    Config,
    SurfacePoint,
    angles_of,
    fk_points,
    point_jacobian,
    project_to_surface,
    robot_cells,
    validate_primitive,
)
from .rng import make_rng
from .workspace import Cell, GridSpec, GroundTruthGrid


@dataclass(frozen=True)
class DynParams:
    gravity: tuple[float, float] = (0.0, -9.81)
    observer_gain: float | tuple[float, ...] = 40.0  # diagonal K, 1/s
    torque_noise_std: float = 0.0
    contact_force_range: tuple[float, float] = (5.0, 15.0)
    friction_mu: float = 0.5

    def __post_init__(self):
        gains = np.atleast_1d(np.asarray(self.observer_gain, dtype=float))
        if np.any(gains <= 0):
            raise ValueError("observer gain entries must be > 0")
        lo, hi = self.contact_force_range
        if not 0 <= lo <= hi:
            raise ValueError("contact_force_range must satisfy 0 <= lo <= hi")
        if self.friction_mu < 0:
            raise ValueError("friction_mu must be >= 0")

    def gain_vector(self, num_links: int) -> np.ndarray:
        g = np.asarray(self.observer_gain, dtype=float)
        return np.full(num_links, float(g)) if g.ndim == 0 else g


@dataclass(frozen=True)
class ProprioSample:
    t: float
    q: np.ndarray
    v: np.ndarray
    tau: np.ndarray


@dataclass(frozen=True)
class ContactInfo:
    """Simulator truth for a contact event, carried for evaluation only."""

    substep: int
    config_angles: np.ndarray
    point: SurfacePoint
    force: np.ndarray
    onset_time: float
    approach_velocity: np.ndarray
    first_cell: Cell


@dataclass(frozen=True)
class ExecutionTrace:
    samples: list[ProprioSample]
    outcome: str  # "completed" | "contact"
    certified_cells: frozenset[Cell]
    contact: ContactInfo | None = None


# --- rigid-body terms (uniform rods, batched over leading axes) -------------


def _chain_geometry(arm: ArmModel, angles: np.ndarray):
    phi = np.cumsum(angles, axis=-1)
    lengths = np.asarray(arm.link_lengths)
    steps = np.stack([np.cos(phi), np.sin(phi)], axis=-1) * lengths[:, None]
    base = np.broadcast_to(
        np.asarray(arm.base, dtype=float), angles.shape[:-1] + (1, 2)
    )
    pts = np.cumsum(np.concatenate([base, steps], axis=-2), axis=-2)
    coms = pts[..., :-1, :] + 0.5 * steps
    return pts, coms


def _rot90_batch(v: np.ndarray) -> np.ndarray:
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def _mass_terms(arm: ArmModel, angles: np.ndarray):
    """U[..., i, j, :] = com_i - joint_j (zero for j > i) and its q-derivative."""
    L = arm.num_links
    pts, coms = _chain_geometry(arm, angles)
    joints = pts[..., :L, :]
    mask = (np.arange(L)[None, :] <= np.arange(L)[:, None]).astype(float)  # j <= i
    U = (coms[..., :, None, :] - joints[..., None, :, :]) * mask[:, :, None]
    # dc[..., i, m, :] = d com_i / d q_m ; do[..., j, m, :] = d joint_j / d q_m
    dc = _rot90_batch(coms[..., :, None, :] - joints[..., None, :, :]) * mask[:, :, None]
    do_mask = (np.arange(L)[None, :] <= np.arange(L)[:, None] - 1).astype(float)  # m <= j-1
    do = _rot90_batch(joints[..., :, None, :] - joints[..., None, :, :]) * do_mask[:, :, None]
    # dU[..., i, j, m, :] for j <= i
    dU = (dc[..., :, None, :, :] - do[..., None, :, :, :]) * mask[:, :, None, None]
    return U, dU, dc


def inertia_matrix(arm: ArmModel, q) -> np.ndarray:
    """Joint-space inertia H(q); symmetric positive definite."""
    angles = angles_of(arm, q) if isinstance(q, Config) else np.asarray(q, dtype=float)
    return _inertia_from_angles(arm, angles)


def _inertia_from_angles(arm: ArmModel, angles: np.ndarray) -> np.ndarray:
    L = arm.num_links
    masses = np.asarray(arm.link_masses)
    rod_inertia = masses * np.asarray(arm.link_lengths) ** 2 / 12.0
    U, _, _ = _mass_terms(arm, angles)
    H = np.einsum("...ijd,...ikd,i->...jk", U, U, masses)
    suffix = np.concatenate([np.cumsum(rod_inertia[::-1])[::-1], [0.0]])
    H_rot = suffix[np.maximum(np.arange(L)[:, None], np.arange(L)[None, :])]
    return H + H_rot


def _dH_dq(arm: ArmModel, angles: np.ndarray) -> np.ndarray:
    masses = np.asarray(arm.link_masses)
    U, dU, _ = _mass_terms(arm, angles)
    term = np.einsum("...ijmd,...ikd,i->...jkm", dU, U, masses)
    return term + np.swapaxes(term, -3, -2)


def coriolis_matrix(arm: ArmModel, angles, v) -> np.ndarray:
    """Christoffel-consistent C(q, v): Hdot = C + C^T holds exactly."""
    angles = np.asarray(angles, dtype=float)
    v = np.asarray(v, dtype=float)
    dH = _dH_dq(arm, angles)
    c1 = np.einsum("...kjm,...m->...kj", dH, v)
    c2 = np.einsum("...kmj,...m->...kj", dH, v)
    c3 = np.einsum("...jmk,...m->...kj", dH, v)
    return 0.5 * (c1 + c2 - c3)


def gravity_torque(arm: ArmModel, angles, gravity) -> np.ndarray:
    angles = np.asarray(angles, dtype=float)
    masses = np.asarray(arm.link_masses)
    grav = np.asarray(gravity, dtype=float)
    _, _, dc = _mass_terms(arm, angles)
    return -np.einsum("...ijd,d,i->...j", dc, grav, masses)


def inverse_dynamics(arm: ArmModel, q, v, a, gravity=(0.0, -9.81)) -> np.ndarray:
    """tau = H(q) a + C(q, v) v + g(q) for joint state (angles, vel, accel)."""
    angles = np.asarray(q, dtype=float) if not isinstance(q, Config) else angles_of(arm, q)
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    H = _inertia_from_angles(arm, angles)
    C = coriolis_matrix(arm, angles, v)
    g = gravity_torque(arm, angles, gravity)
    return np.einsum("...jk,...k->...j", H, a) + np.einsum("...jk,...k->...j", C, v) + g


def momentum_terms(arm: ArmModel, angles, v, gravity):
    """Batched (p, C^T v, g) for observer replay: p = H v."""
    angles = np.asarray(angles, dtype=float)
    v = np.asarray(v, dtype=float)
    H = _inertia_from_angles(arm, angles)
    C = coriolis_matrix(arm, angles, v)
    g = gravity_torque(arm, angles, gravity)
    p = np.einsum("...jk,...k->...j", H, v)
    ctv = np.einsum("...kj,...k->...j", C, v)
    return p, ctv, g


def direct_residual(arm: ArmModel, q, sp: SurfacePoint, force) -> np.ndarray:
    """Residual the observer would settle to for a contact force at sp."""
    J = point_jacobian(arm, q, sp)
    return J.T @ np.asarray(force, dtype=float)


# --- edge execution ----------------------------------------------------------


@dataclass(frozen=True)
class EdgeScan:
    """Geometric first-contact scan of an edge at substep granularity."""

    contact_substep: int | None
    certified_cells: frozenset[Cell]
    swept_cells: frozenset[Cell]
    contact_angles: np.ndarray | None
    first_cell: Cell | None


def scan_edge(
    world: GroundTruthGrid,
    arm: ArmModel,
    q_from: Config,
    q_to: Config,
    substeps: int = 8,
) -> EdgeScan:
    validate_primitive(arm, q_from, q_to)
    a0 = angles_of(arm, q_from)
    a1 = angles_of(arm, q_to)
    certified: set[Cell] = set()
    swept: set[Cell] = set()
    for k in range(substeps + 1):
        s = k / substeps
        ang = a0 + s * (a1 - a0)
        cells = robot_cells(arm, ang, world.spec)
        swept |= cells
        hit = cells & world.occupied
        if hit:
            if k == 0:
                raise ValueError("edge starts inside an obstacle")
            first_cell = min(hit)
            return EdgeScan(k, frozenset(certified), frozenset(swept), ang, first_cell)
        certified |= cells
    return EdgeScan(None, frozenset(certified), frozenset(swept), None, None)


def _trapezoid_profile(t: np.ndarray, total: float, distance: float):
    """Path position/velocity/acceleration with accel time = total / 4."""
    ta = total / 4.0
    vp = distance / (total - ta)
    acc = vp / ta
    s = np.where(
        t < ta,
        0.5 * acc * t**2,
        np.where(
            t < total - ta,
            0.5 * acc * ta**2 + vp * (t - ta),
            distance - 0.5 * acc * np.clip(total - t, 0.0, None) ** 2,
        ),
    )
    sd = np.where(t < ta, acc * t, np.where(t < total - ta, vp, acc * np.clip(total - t, 0.0, None)))
    sdd = np.where(t < ta, acc, np.where(t < total - ta, 0.0, -acc))
    return s, sd, sdd


def sample_contact_force(rng, normal: np.ndarray, params: DynParams) -> np.ndarray:
    """Force into the surface: -n rotated within the friction cone."""
    gamma = np.arctan(params.friction_mu)
    theta = float(rng.uniform(-gamma, gamma)) if gamma > 0 else 0.0
    c, s = np.cos(theta), np.sin(theta)
    d = -normal
    direction = np.array([c * d[0] - s * d[1], s * d[0] + c * d[1]])
    magnitude = float(rng.uniform(*params.contact_force_range))
    return magnitude * direction


def simulate_edge(
    world: GroundTruthGrid,
    arm: ArmModel,
    dyn: DynParams,
    q_from: Config,
    q_to: Config,
    seed: int,
    substeps: int = 8,
    duration: float = 1.0,
    sample_rate: float = 500.0,
    dwell_substeps: int = 2,
    collect_samples: bool = True,
) -> ExecutionTrace:
    """Execute one motion primitive against ground truth.

    Completes the edge or halts at the first substep whose footprint meets an
    obstacle; on contact, a friction-cone force is applied at the surface
    point nearest the first penetrated cell's center and held for a dwell of
    `dwell_substeps` time slices so the observer sees a sustained step.
    """
    scan = scan_edge(world, arm, q_from, q_to, substeps)
    a0 = angles_of(arm, q_from)
    a1 = angles_of(arm, q_to)
    rng = make_rng(seed, "edge")
    delta = a1 - a0

    contact: ContactInfo | None = None
    if scan.contact_substep is not None:
        sp = project_to_surface(arm, scan.contact_angles, world.spec.cell_center(scan.first_cell))
        force = sample_contact_force(rng, sp.normal, dyn)
        contact = ContactInfo(
            substep=scan.contact_substep,
            config_angles=scan.contact_angles,
            point=sp,
            force=force,
            onset_time=duration,
            approach_velocity=delta.copy(),
            first_cell=scan.first_cell,
        )

    samples: list[ProprioSample] = []
    if collect_samples:
        dt = 1.0 / sample_rate
        s_end = 1.0 if contact is None else contact.substep / substeps
        dwell = 0.0 if contact is None else dwell_substeps * duration / substeps
        n = int(round((duration + dwell) / dt))
        t = np.arange(n + 1) * dt
        move = np.minimum(t, duration)
        s, sd, sdd = _trapezoid_profile(move, duration, s_end)
        in_dwell = t >= duration
        sd = np.where(in_dwell, 0.0, sd)
        sdd = np.where(in_dwell, 0.0, sdd)
        q = a0 + s[:, None] * delta
        v = sd[:, None] * delta
        a = sdd[:, None] * delta
        tau = inverse_dynamics(arm, q, v, a, dyn.gravity)
        if contact is not None:
            J = point_jacobian(arm, contact.config_angles, contact.point)
            tau[in_dwell] -= J.T @ contact.force
        if dyn.torque_noise_std > 0:
            tau = tau + rng.normal(0.0, dyn.torque_noise_std, size=tau.shape)
        samples = [ProprioSample(float(t[k]), q[k], v[k], tau[k]) for k in range(len(t))]

    return ExecutionTrace(
        samples=samples,
        outcome="completed" if contact is None else "contact",
        certified_cells=scan.certified_cells,
        contact=contact,
    )
