"""Planar N-link arm: lattice configs, forward kinematics, capsule footprint,
surface model with outward normals, point Jacobians, and swept volumes.

Links are 2D capsules (segment + radius). The robot surface is the capsule
boundary, split per link into a "left" run, a "right" run, and a distal
"cap" arc (plus a proximal "base_cap" arc on link 0), each parameterized by
an arc-length fraction in [0, 1]. Surface points carry unit outward normals.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .workspace import Cell, GridSpec, rasterize_capsule


class InvalidPrimitive(Exception):
    """Configs do not differ by a single unit step in exactly one joint."""


SIDE_LEFT = "left"
SIDE_RIGHT = "right"
SIDE_CAP = "cap"
SIDE_BASE_CAP = "base_cap"
SIDES = (SIDE_LEFT, SIDE_RIGHT, SIDE_CAP, SIDE_BASE_CAP)
_SIDE_CODE = {s: i for i, s in enumerate(SIDES)}

_CAP_SAMPLES = 3  # samples per modeled cap arc


@dataclass(frozen=True)
class ArmModel:
    base: tuple[float, float] = (0.0, 0.0)
    link_lengths: tuple[float, ...] = (0.3, 0.26)
    link_radius: float = 0.03
    link_masses: tuple[float, ...] = (1.2, 0.9)
    steps_per_joint: int = 9
    joint_range: tuple[tuple[float, float], ...] = ((-0.9, 0.9), (-2.4, 2.4))
    surface_samples_per_link: int = 16

    def __post_init__(self):
        L = len(self.link_lengths)
        if L < 1:
            raise ValueError("arm needs at least one link")
        if len(self.link_masses) != L or len(self.joint_range) != L:
            raise ValueError("link_lengths, link_masses, joint_range lengths must match")
        if any(l <= 0 for l in self.link_lengths) or self.link_radius <= 0:
            raise ValueError("lengths and radius must be > 0")
        if any(m <= 0 for m in self.link_masses):
            raise ValueError("masses must be > 0")
        if self.steps_per_joint < 2:
            raise ValueError("steps_per_joint must be >= 2")
        if any(hi <= lo for lo, hi in self.joint_range):
            raise ValueError("joint ranges must be non-empty intervals")

    @property
    def num_links(self) -> int:
        return len(self.link_lengths)

    def step_size(self, joint: int) -> float:
        lo, hi = self.joint_range[joint]
        return (hi - lo) / (self.steps_per_joint - 1)


@dataclass(frozen=True)
class Config:
    """Lattice configuration: one integer step per joint."""

    steps: tuple[int, ...]

    def validate_for(self, arm: ArmModel) -> None:
        if len(self.steps) != arm.num_links:
            raise ValueError(f"config has {len(self.steps)} joints, arm has {arm.num_links}")
        for k in self.steps:
            if not 0 <= k < arm.steps_per_joint:
                raise ValueError(f"step {k} outside [0, {arm.steps_per_joint})")


@dataclass(frozen=True)
class SurfacePoint:
    link: int
    side: str
    param: float
    point: np.ndarray
    normal: np.ndarray

    @property
    def side_code(self) -> int:
        return _SIDE_CODE[self.side]


def step_to_angles(arm: ArmModel, q: Config) -> np.ndarray:
    """Lattice-to-metric map: step k -> lo + k * (hi - lo) / (steps - 1)."""
    q.validate_for(arm)
    lo = np.array([r[0] for r in arm.joint_range])
    hi = np.array([r[1] for r in arm.joint_range])
    k = np.asarray(q.steps, dtype=float)
    return lo + k * (hi - lo) / (arm.steps_per_joint - 1)


def angles_of(arm: ArmModel, q) -> np.ndarray:
    """Coerce a Config or a raw joint-angle vector to an angle array."""
    if isinstance(q, Config):
        return step_to_angles(arm, q)
    a = np.asarray(q, dtype=float)
    if a.shape != (arm.num_links,):
        raise ValueError(f"expected {arm.num_links} joint angles, got shape {a.shape}")
    return a


def _rot90(v: np.ndarray) -> np.ndarray:
    """Counterclockwise quarter turn; also d(point)/d(angle) about a pivot."""
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def fk_points(arm: ArmModel, angles: np.ndarray) -> np.ndarray:
    """(L+1, 2) chain of joint positions: base, joints, tip."""
    phi = np.cumsum(angles)
    steps = np.stack([np.cos(phi), np.sin(phi)], axis=-1) * np.asarray(arm.link_lengths)[:, None]
    pts = np.vstack([np.asarray(arm.base, dtype=float), steps])
    return np.cumsum(pts, axis=0)


def forward_kinematics(arm: ArmModel, q) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-link segment endpoints in world coordinates."""
    pts = fk_points(arm, angles_of(arm, q))
    return [(pts[i], pts[i + 1]) for i in range(arm.num_links)]


def link_directions(arm: ArmModel, angles: np.ndarray) -> np.ndarray:
    phi = np.cumsum(angles)
    return np.stack([np.cos(phi), np.sin(phi)], axis=-1)


def robot_cells(arm: ArmModel, q, spec: GridSpec) -> set[Cell]:
    """Workspace cells occupied by the arm: union of per-link capsules."""
    pts = fk_points(arm, angles_of(arm, q))
    cells: set[Cell] = set()
    for i in range(arm.num_links):
        cells |= rasterize_capsule(pts[i], pts[i + 1], arm.link_radius, spec)
    return cells


def validate_primitive(arm: ArmModel, q_from: Config, q_to: Config) -> None:
    q_from.validate_for(arm)
    q_to.validate_for(arm)
    diffs = [(i, b - a) for i, (a, b) in enumerate(zip(q_from.steps, q_to.steps)) if a != b]
    if len(diffs) > 1 or (diffs and abs(diffs[0][1]) != 1):
        raise InvalidPrimitive(f"{q_from.steps} -> {q_to.steps} is not a unit single-joint move")


def swept_cells(
    arm: ArmModel, q_from: Config, q_to: Config, spec: GridSpec, substeps: int = 8
) -> set[Cell]:
    """Union of footprints along the joint-interpolated edge.

    Samples both endpoints (s = 0 and s = 1) so the result contains the
    footprints of q_from and q_to and is symmetric under edge reversal.
    """
    validate_primitive(arm, q_from, q_to)
    a0 = step_to_angles(arm, q_from)
    a1 = step_to_angles(arm, q_to)
    cells: set[Cell] = set()
    for s in np.linspace(0.0, 1.0, substeps + 1):
        cells |= robot_cells(arm, a0 + s * (a1 - a0), spec)
    return cells


# --- surface model ----------------------------------------------------------


def _side_geometry(arm: ArmModel, angles: np.ndarray, link: int):
    pts = fk_points(arm, angles)
    d = link_directions(arm, angles)[link]
    return pts[link], pts[link + 1], d, _rot90(d)


def side_length(arm: ArmModel, link: int, side: str) -> float:
    if side in (SIDE_LEFT, SIDE_RIGHT):
        return arm.link_lengths[link]
    return np.pi * arm.link_radius


def surface_point_at(arm: ArmModel, q, link: int, side: str, param: float) -> SurfacePoint:
    """Surface point at intrinsic coordinates (link, side, arc fraction)."""
    angles = angles_of(arm, q)
    p0, p1, d, n_left = _side_geometry(arm, angles, link)
    r = arm.link_radius
    param = float(np.clip(param, 0.0, 1.0))
    if side == SIDE_LEFT:
        point = p0 + param * (p1 - p0) + r * n_left
        normal = n_left
    elif side == SIDE_RIGHT:
        point = p0 + param * (p1 - p0) - r * n_left
        normal = -n_left
    elif side == SIDE_CAP:
        phi = param * np.pi - np.pi / 2
        normal = np.cos(phi) * d + np.sin(phi) * n_left
        point = p1 + r * normal
    elif side == SIDE_BASE_CAP:
        if link != 0:
            raise ValueError("base_cap exists on link 0 only")
        phi = param * np.pi - np.pi / 2
        normal = -np.cos(phi) * d + np.sin(phi) * n_left
        point = p0 + r * normal
    else:
        raise ValueError(f"unknown side {side!r}")
    return SurfacePoint(link=link, side=side, param=param, point=point, normal=normal)


def surface_points(arm: ArmModel, q) -> list[SurfacePoint]:
    """Candidate contact points: evenly spaced side samples plus cap samples."""
    angles = angles_of(arm, q)
    out: list[SurfacePoint] = []
    k = max(1, arm.surface_samples_per_link // 2)
    side_params = (np.arange(k) + 0.5) / k
    cap_params = (np.arange(_CAP_SAMPLES) + 0.5) / _CAP_SAMPLES
    for link in range(arm.num_links):
        for side in (SIDE_LEFT, SIDE_RIGHT):
            for s in side_params:
                out.append(surface_point_at(arm, angles, link, side, float(s)))
        for s in cap_params:
            out.append(surface_point_at(arm, angles, link, SIDE_CAP, float(s)))
    for s in cap_params:
        out.append(surface_point_at(arm, angles, 0, SIDE_BASE_CAP, float(s)))
    return out


def _project_segment(point: np.ndarray, a: np.ndarray, b: np.ndarray):
    d = b - a
    dd = float(d @ d)
    t = 0.0 if dd == 0.0 else float(np.clip((point - a) @ d / dd, 0.0, 1.0))
    foot = a + t * d
    return t, foot, float(np.linalg.norm(point - foot))


def _project_cap(point, center, axis, n_left):
    u = point - center
    nu = float(np.linalg.norm(u))
    if nu == 0.0:
        phi = 0.0
    else:
        phi = float(np.clip(np.arctan2(u @ n_left, u @ axis), -np.pi / 2, np.pi / 2))
    normal = np.cos(phi) * axis + np.sin(phi) * n_left
    return phi, normal


def project_to_surface(arm: ArmModel, q, point) -> SurfacePoint:
    """Nearest point on the capsule boundary of any link (exact, idempotent)."""
    angles = angles_of(arm, q)
    point = np.asarray(point, dtype=float)
    r = arm.link_radius
    best: SurfacePoint | None = None
    best_dist = np.inf

    def consider(sp: SurfacePoint):
        nonlocal best, best_dist
        dist = float(np.linalg.norm(point - sp.point))
        if dist < best_dist:
            best, best_dist = sp, dist

    for link in range(arm.num_links):
        p0, p1, d, n_left = _side_geometry(arm, angles, link)
        for side, n in ((SIDE_LEFT, n_left), (SIDE_RIGHT, -n_left)):
            t, foot, _ = _project_segment(point, p0 + r * n, p1 + r * n)
            consider(SurfacePoint(link=link, side=side, param=t, point=foot, normal=n))
        phi, normal = _project_cap(point, p1, d, n_left)
        consider(
            SurfacePoint(
                link=link,
                side=SIDE_CAP,
                param=(phi + np.pi / 2) / np.pi,
                point=p1 + r * normal,
                normal=normal,
            )
        )
    p0, _, d, n_left = _side_geometry(arm, angles, 0)
    phi, normal = _project_cap(point, p0, -d, n_left)
    consider(
        SurfacePoint(
            link=0,
            side=SIDE_BASE_CAP,
            param=(phi + np.pi / 2) / np.pi,
            point=p0 + r * normal,
            normal=normal,
        )
    )
    assert best is not None
    return best


def point_jacobian(arm: ArmModel, q, sp: SurfacePoint) -> np.ndarray:
    """d(point)/d(joint angles): (2, L); columns distal to sp.link are zero."""
    angles = angles_of(arm, q)
    pts = fk_points(arm, angles)
    J = np.zeros((2, arm.num_links))
    for j in range(sp.link + 1):
        J[:, j] = _rot90(sp.point - pts[j])
    return J


# --- batched helpers for the particle filter --------------------------------


def batch_surface_points(
    arm: ArmModel, q, links: np.ndarray, side_codes: np.ndarray, params: np.ndarray
):
    """Vectorized surface_point_at over particle arrays.

    Returns (points (M,2), normals (M,2)). base_cap entries must be link 0.
    """
    angles = angles_of(arm, q)
    pts = fk_points(arm, angles)
    dirs = link_directions(arm, angles)
    lefts = _rot90(dirs)
    r = arm.link_radius
    params = np.clip(params, 0.0, 1.0)
    M = len(links)
    points = np.zeros((M, 2))
    normals = np.zeros((M, 2))
    p0 = pts[links]
    p1 = pts[links + 1]
    d = dirs[links]
    nl = lefts[links]
    for code, sign in ((0, 1.0), (1, -1.0)):  # left, right
        m = side_codes == code
        if np.any(m):
            normals[m] = sign * nl[m]
            points[m] = p0[m] + params[m, None] * (p1[m] - p0[m]) + r * normals[m]
    m = side_codes == 2  # distal cap
    if np.any(m):
        phi = params[m] * np.pi - np.pi / 2
        normals[m] = np.cos(phi)[:, None] * d[m] + np.sin(phi)[:, None] * nl[m]
        points[m] = p1[m] + r * normals[m]
    m = side_codes == 3  # base cap (link 0)
    if np.any(m):
        phi = params[m] * np.pi - np.pi / 2
        normals[m] = -np.cos(phi)[:, None] * d[m] + np.sin(phi)[:, None] * nl[m]
        points[m] = p0[m] + r * normals[m]
    return points, normals


def batch_jacobian_t(arm: ArmModel, q, links: np.ndarray, points: np.ndarray) -> np.ndarray:
    """(M, L, 2) stack of transposed point Jacobians for particle arrays."""
    angles = angles_of(arm, q)
    pts = fk_points(arm, angles)
    L = arm.num_links
    rel = points[:, None, :] - pts[None, :L, :]
    cols = np.stack([-rel[..., 1], rel[..., 0]], axis=-1)
    mask = np.arange(L)[None, :] <= links[:, None]
    return cols * mask[..., None]


def side_code(side: str) -> int:
    return _SIDE_CODE[side]
