"""Estimation-side contact stack: generalized-momentum observer, threshold
detection with debounce, and the contact particle filter whose measurement
model is a friction-cone constrained least-squares fit of the residual.

In two workspace dimensions the friction cone is an angular sector, so the
per-particle program solves in closed form: take the unconstrained weighted
least-squares force if it lies inside the cone, otherwise the best of the two
cone edge rays and the apex.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .dynamics import DynParams, ProprioSample, momentum_terms
from .kinematics import (
    ArmModel,
    SurfacePoint,
    angles_of,
    batch_jacobian_t,
    batch_surface_points,
    point_jacobian,
    project_to_surface,
    surface_points,
)
from .rng import make_rng

if TYPE_CHECKING:
    from .occupancy import OccupancyEstimate


class NonMonotonicTime(Exception):
    """Observer samples must arrive in strictly increasing time order."""


class EmptyActiveSet(Exception):
    """Admissibility filtering removed every candidate surface point."""


@dataclass
class ObserverState:
    """Momentum-observer integrator state; reset() gives r = 0, integral = 0."""

    r: np.ndarray
    integral: np.ndarray
    last_integrand: np.ndarray
    last_t: float | None = None
    primed: bool = False

    @classmethod
    def fresh(cls, num_links: int) -> "ObserverState":
        z = np.zeros(num_links)
        return cls(r=z.copy(), integral=z.copy(), last_integrand=z.copy())

    def reset(self) -> None:
        self.r[:] = 0.0
        self.integral[:] = 0.0
        self.last_integrand[:] = 0.0
        self.last_t = None
        self.primed = False


def observer_step(
    state: ObserverState, sample: ProprioSample, arm: ArmModel, dyn: DynParams
) -> tuple[ObserverState, np.ndarray]:
    """One trapezoidal update of r = K (p - integral of (tau + C^T v - g + r)).

    The first sample primes the integral with the initial momentum so the
    residual starts at zero; subsequent samples solve the implicit trapezoid
    step componentwise (the gain matrix is diagonal).
    """
    p, ctv, g = momentum_terms(arm, sample.q, sample.v, dyn.gravity)
    u = sample.tau + ctv - g
    K = dyn.gain_vector(arm.num_links)
    if not state.primed:
        state.integral = p.copy()
        state.r = np.zeros_like(p)
        state.last_integrand = u + state.r
        state.last_t = sample.t
        state.primed = True
        return state, state.r.copy()
    if state.last_t is not None and sample.t <= state.last_t:
        raise NonMonotonicTime(f"sample at t={sample.t} after t={state.last_t}")
    dt = sample.t - state.last_t
    r = K * (p - state.integral - 0.5 * dt * (state.last_integrand + u)) / (1.0 + 0.5 * K * dt)
    f = u + r
    state.integral = state.integral + 0.5 * dt * (state.last_integrand + f)
    state.last_integrand = f
    state.last_t = sample.t
    state.r = r
    return state, r.copy()


def run_observer(samples: list[ProprioSample], arm: ArmModel, dyn: DynParams) -> np.ndarray:
    """Residual history (N, L) for a time-ordered sample stream."""
    if not samples:
        return np.zeros((0, arm.num_links))
    t = np.array([s.t for s in samples])
    if np.any(np.diff(t) <= 0):
        raise NonMonotonicTime("sample times must be strictly increasing")
    Q = np.stack([s.q for s in samples])
    V = np.stack([s.v for s in samples])
    TAU = np.stack([s.tau for s in samples])
    p, ctv, g = momentum_terms(arm, Q, V, dyn.gravity)
    u = TAU + ctv - g
    K = dyn.gain_vector(arm.num_links)
    out = np.zeros_like(u)
    integral = p[0].copy()
    f_prev = u[0].copy()
    for k in range(1, len(samples)):
        dt = t[k] - t[k - 1]
        r = K * (p[k] - integral - 0.5 * dt * (f_prev + u[k])) / (1.0 + 0.5 * K * dt)
        f = u[k] + r
        integral += 0.5 * dt * (f_prev + f)
        f_prev = f
        out[k] = r
    return out


def detect_contact(residuals: np.ndarray, threshold, debounce: int = 3) -> bool:
    """True when any joint's |r| exceeds its threshold for >= debounce samples."""
    return first_detection_index(residuals, threshold, debounce) is not None


def first_detection_index(residuals: np.ndarray, threshold, debounce: int = 3) -> int | None:
    r = np.atleast_2d(np.asarray(residuals, dtype=float))
    thr = np.broadcast_to(np.asarray(threshold, dtype=float), (r.shape[1],))
    exceed = np.any(np.abs(r) > thr, axis=1)
    run = 0
    for i, e in enumerate(exceed):
        run = run + 1 if e else 0
        if run >= debounce:
            return i
    return None


# --- friction-cone constrained least squares ---------------------------------


def _rotate(v: np.ndarray, theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([c * v[..., 0] - s * v[..., 1], s * v[..., 0] + c * v[..., 1]], axis=-1)


def measurement_cost(
    sp: SurfacePoint, r: np.ndarray, q, arm: ArmModel, params: "CpfParams"
) -> tuple[float, np.ndarray]:
    """min over cone forces of || r - J^T F ||^2 weighted by the inverse
    measurement covariance; returns (cost, minimizer).

    The cone opens about -sp.normal with half-angle arctan(mu): forces push
    into the robot. An all-zero Jacobian yields (||r||^2_w, 0).
    """
    r = np.asarray(r, dtype=float)
    J = point_jacobian(arm, q, sp)
    M = J.T  # (L, 2)
    w = np.full(arm.num_links, 1.0 / params.sigma_meas**2)
    base_cost = float(r @ (w * r))
    if not np.any(M):
        return base_cost, np.zeros(2)
    gamma = np.arctan(params.mu)
    axis = -sp.normal

    def cost_of(F: np.ndarray) -> float:
        res = r - M @ F
        return float(res @ (w * res))

    best_cost, best_F = base_cost, np.zeros(2)
    for d in (_rotate(axis, gamma), _rotate(axis, -gamma)):
        md = M @ d
        den = float(md @ (w * md))
        if den > 0:
            a = max(0.0, float(md @ (w * r)) / den)
            F = a * d
            c = cost_of(F)
            if c < best_cost:
                best_cost, best_F = c, F
    G = M.T @ (w[:, None] * M)
    b = M.T @ (w * r)
    det = G[0, 0] * G[1, 1] - G[0, 1] * G[1, 0]
    if det > 1e-10 * (G[0, 0] + G[1, 1]) ** 2:
        F_u = np.array([G[1, 1] * b[0] - G[0, 1] * b[1], G[0, 0] * b[1] - G[1, 0] * b[0]]) / det
        norm = float(np.linalg.norm(F_u))
        if norm > 0 and float(F_u @ axis) >= norm * np.cos(gamma) - 1e-12:
            c = cost_of(F_u)
            if c < best_cost:
                best_cost, best_F = c, F_u
    return best_cost, best_F


def _batch_measurement_costs(
    arm: ArmModel,
    q,
    links: np.ndarray,
    points: np.ndarray,
    normals: np.ndarray,
    r: np.ndarray,
    params: "CpfParams",
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized measurement_cost over particle arrays; same math, same
    candidate set (two cone edges, apex, in-cone unconstrained optimum)."""
    Mt = batch_jacobian_t(arm, q, links, points)  # (M, L, 2)
    w = np.full(arm.num_links, 1.0 / params.sigma_meas**2)
    gamma = np.arctan(params.mu)
    axis = -normals
    M = len(links)
    base = float(r @ (w * r))
    costs = np.full((M, 4), np.inf)
    forces = np.zeros((M, 4, 2))
    costs[:, 0] = base

    def residual_cost(F: np.ndarray) -> np.ndarray:
        res = r[None, :] - np.einsum("mld,md->ml", Mt, F)
        return np.einsum("ml,l,ml->m", res, w, res)

    for slot, theta in ((1, gamma), (2, -gamma)):
        d = _rotate(axis, theta)
        md = np.einsum("mld,md->ml", Mt, d)
        den = np.einsum("ml,l,ml->m", md, w, md)
        num = np.einsum("ml,l,l->m", md, w, r)
        a = np.where(den > 0, np.maximum(0.0, num / np.where(den > 0, den, 1.0)), 0.0)
        F = a[:, None] * d
        costs[:, slot] = residual_cost(F)
        forces[:, slot] = F
    G = np.einsum("mld,l,mle->mde", Mt, w, Mt)
    b = np.einsum("mld,l,l->md", Mt, w, r)
    det = G[:, 0, 0] * G[:, 1, 1] - G[:, 0, 1] * G[:, 1, 0]
    ok = det > 1e-10 * (G[:, 0, 0] + G[:, 1, 1]) ** 2
    safe = np.where(ok, det, 1.0)
    F_u = np.stack(
        [
            (G[:, 1, 1] * b[:, 0] - G[:, 0, 1] * b[:, 1]) / safe,
            (G[:, 0, 0] * b[:, 1] - G[:, 1, 0] * b[:, 0]) / safe,
        ],
        axis=-1,
    )
    norm = np.linalg.norm(F_u, axis=1)
    in_cone = ok & (norm > 0) & (np.einsum("md,md->m", F_u, axis) >= norm * np.cos(gamma) - 1e-12)
    cost_u = residual_cost(F_u)
    costs[:, 3] = np.where(in_cone, cost_u, np.inf)
    forces[:, 3] = F_u
    pick = np.argmin(costs, axis=1)
    rows = np.arange(M)
    return costs[rows, pick], forces[rows, pick]


# --- active surface ----------------------------------------------------------


def active_surface(arm: ArmModel, q, v, estimate: "OccupancyEstimate") -> list[SurfacePoint]:
    """Candidates that (i) move into the environment and (ii) sit in cells not
    known to be free. Raises EmptyActiveSet if nothing survives."""
    out = _filter_candidates(arm, q, v, estimate, use_motion=True, use_estimate=True)
    if not out:
        raise EmptyActiveSet("no kinematically and workspace-consistent candidates")
    return out


def active_surface_with_fallback(
    arm: ArmModel, q, v, estimate: "OccupancyEstimate"
) -> list[SurfacePoint]:
    """active_surface with the documented fallback cascade: both criteria,
    then motion-only, then workspace-only, then all candidates."""
    for use_motion, use_estimate in ((True, True), (True, False), (False, True), (False, False)):
        out = _filter_candidates(arm, q, v, estimate, use_motion, use_estimate)
        if out:
            return out
    raise EmptyActiveSet("robot has no surface candidates at all")


def _filter_candidates(arm, q, v, estimate, use_motion: bool, use_estimate: bool):
    sps = surface_points(arm, q)
    v = np.asarray(v, dtype=float)
    keep = []
    if use_motion:
        links = np.array([sp.link for sp in sps])
        pts = np.stack([sp.point for sp in sps])
        normals = np.stack([sp.normal for sp in sps])
        Mt = batch_jacobian_t(arm, q, links, pts)
        vel = np.einsum("mld,l->md", Mt, v)
        moving_in = np.einsum("md,md->m", normals, vel) > 0.0
    else:
        moving_in = np.ones(len(sps), dtype=bool)
    for sp, ok in zip(sps, moving_in):
        if not ok:
            continue
        if use_estimate:
            cell = estimate.spec.world_to_cell(sp.point)
            if cell is None or estimate.is_known_free(cell):
                continue
        keep.append(sp)
    return keep


# --- contact particle filter --------------------------------------------------


@dataclass(frozen=True)
class CpfParams:
    num_particles: int = 250
    iterations: int = 10
    motion_noise_std: float = 0.02  # surface arc-length, meters
    sigma_meas: float = 0.05  # sqrt of measurement covariance diagonal, N*m
    detect_threshold: float | tuple[float, ...] = 0.5  # per-joint residual, N*m
    cluster_radius: float = 0.1  # meters (2 cells at the reference 0.05 m grid)
    mu: float = 0.5

    def __post_init__(self):
        if self.num_particles < 1:
            raise ValueError("num_particles must be >= 1")
        thr = np.atleast_1d(np.asarray(self.detect_threshold, dtype=float))
        if self.motion_noise_std <= 0 or self.sigma_meas <= 0 or np.any(thr <= 0):
            raise ValueError("noise, covariance, and threshold entries must be > 0")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")


@dataclass(frozen=True)
class ContactEstimate:
    point: np.ndarray
    surface: SurfacePoint
    force: np.ndarray
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


def systematic_resample(weights: np.ndarray, rng) -> np.ndarray:
    """Low-variance systematic resampling; returns ancestor indices."""
    M = len(weights)
    cum = np.cumsum(weights)
    cum /= cum[-1]
    u = (np.arange(M) + rng.uniform()) / M
    return np.searchsorted(cum, u)


def _single_linkage_labels(points: np.ndarray, radius: float) -> np.ndarray:
    M = len(points)
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    adj = d2 <= radius * radius
    labels = np.full(M, -1, dtype=int)
    current = 0
    for i in range(M):
        if labels[i] >= 0:
            continue
        labels[i] = current
        stack = [i]
        while stack:
            j = stack.pop()
            nbrs = np.nonzero(adj[j] & (labels < 0))[0]
            labels[nbrs] = current
            stack.extend(nbrs.tolist())
        current += 1
    return labels


def cpf_localize(
    residuals: np.ndarray,
    arm: ArmModel,
    q,
    v,
    estimate: "OccupancyEstimate",
    params: CpfParams,
    seed: int,
    link_weights: np.ndarray | None = None,
) -> ContactEstimate:
    """Localize a detected contact from the settled residual window.

    Particles live in intrinsic surface coordinates (link, side, arc
    fraction); each update perturbs the arc coordinate, scores particles by
    the cone-constrained fit of the mean residual, and resamples. The largest
    single-linkage cluster wins; its centroid is projected back to the
    surface and returned with the cost-optimal force and the cluster's mass
    fraction as confidence.
    """
    r = np.atleast_2d(np.asarray(residuals, dtype=float)).mean(axis=0)
    angles = angles_of(arm, q)
    candidates = active_surface_with_fallback(arm, angles, v, estimate)
    rng = make_rng(seed, "cpf")
    M = params.num_particles
    pick = rng.integers(0, len(candidates), size=M)
    links = np.array([candidates[i].link for i in pick])
    codes = np.array([candidates[i].side_code for i in pick])
    arc = np.array([candidates[i].param for i in pick])
    lengths = np.asarray(arm.link_lengths)
    cap_len = np.pi * arm.link_radius
    side_len = np.where(codes < 2, lengths[links], cap_len)
    lw = None if link_weights is None else np.asarray(link_weights, dtype=float)

    for _ in range(params.iterations):
        arc = np.clip(arc + rng.normal(0.0, params.motion_noise_std, size=M) / side_len, 0.0, 1.0)
        points, normals = batch_surface_points(arm, angles, links, codes, arc)
        costs, _ = _batch_measurement_costs(arm, angles, links, points, normals, r, params)
        weights = np.exp(-0.5 * np.minimum(costs, 1400.0))
        if lw is not None:
            weights = weights * lw[links]
        weights = np.maximum(weights, 1e-300)
        if not np.isfinite(weights.sum()) or weights.sum() <= 0:
            weights = np.ones(M)
        idx = systematic_resample(weights, rng)
        links, codes, arc, side_len = links[idx], codes[idx], arc[idx], side_len[idx]

    points, _ = batch_surface_points(arm, angles, links, codes, arc)
    labels = _single_linkage_labels(points, params.cluster_radius)
    sizes = np.bincount(labels)
    winner = int(np.argmax(sizes))  # ties break to the lowest label
    members = labels == winner
    centroid = points[members].mean(axis=0)
    sp = project_to_surface(arm, angles, centroid)
    _, force = measurement_cost(sp, r, angles, arm, params)
    return ContactEstimate(
        point=sp.point.copy(),
        surface=sp,
        force=force,
        confidence=float(sizes[winner]) / M,
    )
