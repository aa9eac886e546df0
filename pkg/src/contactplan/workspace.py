"""Discretized workspace: grids, randomized scenes, and cell-set geometry.

Cells are integer tuples indexing a regular grid. A cell belongs to a shape
when its *center* satisfies the shape predicate, which keeps rasterization
consistent between the scene generator, the robot footprint, and the
brute-force oracles used in tests.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .rng import make_rng

log = logging.getLogger(__name__)

Cell = tuple[int, ...]


class InfeasibleScene(Exception):
    """Scene generation could not satisfy the clearance constraint."""


@dataclass(frozen=True)
class GridSpec:
    """Regular grid: cell counts per axis, meters per cell, world origin.

    Cell (i, j, ...) covers the half-open box origin + [i, i+1) * resolution
    per axis; its center sits at origin + (i + 0.5) * resolution.
    """

    dims: tuple[int, ...] = (16, 16)
    resolution: float = 0.05
    origin: tuple[float, ...] = (0.0, 0.0)

    def __post_init__(self):
        if len(self.dims) < 1 or any(d < 1 for d in self.dims):
            raise ValueError(f"all dims must be >= 1, got {self.dims}")
        if self.resolution <= 0:
            raise ValueError("resolution must be > 0")
        if len(self.origin) != len(self.dims):
            raise ValueError("origin and dims must have the same length")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def num_cells(self) -> int:
        return int(np.prod(self.dims))

    def contains(self, cell: Cell) -> bool:
        return all(0 <= c < d for c, d in zip(cell, self.dims))

    def cell_center(self, cell: Cell) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(cell) + 0.5) * self.resolution

    def world_to_cell(self, point) -> Cell | None:
        """Cell containing a world point, or None when outside the grid."""
        idx = np.floor((np.asarray(point, dtype=float) - np.asarray(self.origin)) / self.resolution)
        cell = tuple(int(i) for i in idx)
        return cell if self.contains(cell) else None

    def all_centers(self) -> np.ndarray:
        """(num_cells, ndim) array of cell centers in C (row-major) order."""
        grids = np.indices(self.dims).reshape(self.ndim, -1).T
        return np.asarray(self.origin) + (grids + 0.5) * self.resolution


@dataclass(frozen=True)
class GroundTruthGrid:
    """Binary occupancy truth plus per-cell object labels."""

    spec: GridSpec
    occupied: frozenset[Cell]
    object_ids: dict[Cell, int] = field(default_factory=dict)
    domain: str | None = None
    seed: int | None = None

    def __post_init__(self):
        for cell in self.occupied:
            if not self.spec.contains(cell):
                raise ValueError(f"occupied cell {cell} outside grid {self.spec.dims}")
        if not set(self.object_ids) <= self.occupied:
            raise ValueError("object_ids keys must be a subset of occupied cells")

    def to_array(self) -> np.ndarray:
        arr = np.zeros(self.spec.dims, dtype=np.uint8)
        for cell in self.occupied:
            arr[cell] = 1
        return arr

    def object_cells(self, object_id: int) -> frozenset[Cell]:
        return frozenset(c for c, o in self.object_ids.items() if o == object_id)


@dataclass(frozen=True)
class SceneParams:
    """Knobs for the randomized pipe and shelf scene generators."""

    domain: str = "pipe"
    pipe_count_range: tuple[int, int] = (5, 12)
    partition_count_range: tuple[int, int] = (1, 4)
    object_count_range: tuple[int, int] = (6, 12)
    pipe_thickness: int = 1
    clearance: int = 1

    def __post_init__(self):
        if self.domain not in ("pipe", "shelf"):
            raise ValueError(f"unknown domain {self.domain!r}")
        for lo, hi in (self.pipe_count_range, self.partition_count_range, self.object_count_range):
            if lo < 0 or lo > hi:
                raise ValueError("range lower bounds must be >= 0 and <= upper bounds")
        if self.pipe_thickness < 1:
            raise ValueError("pipe_thickness must be >= 1")


def _point_segment_distance(points: np.ndarray, p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    """Distance from each row of `points` to segment [p0, p1]."""
    d = p1 - p0
    dd = float(d @ d)
    if dd == 0.0:
        return np.linalg.norm(points - p0, axis=-1)
    t = np.clip((points - p0) @ d / dd, 0.0, 1.0)
    feet = p0 + t[..., None] * d
    return np.linalg.norm(points - feet, axis=-1)


def rasterize_capsule(p0, p1, radius: float, spec: GridSpec) -> set[Cell]:
    """Cells whose centers lie within `radius` of segment [p0, p1].

    Symmetric in (p0, p1); geometry outside the grid clips silently.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    origin = np.asarray(spec.origin)
    lo = np.minimum(p0, p1) - radius
    hi = np.maximum(p0, p1) + radius
    lo_idx = np.maximum(np.floor((lo - origin) / spec.resolution - 0.5).astype(int), 0)
    hi_idx = np.minimum(
        np.ceil((hi - origin) / spec.resolution + 0.5).astype(int) + 1,
        np.asarray(spec.dims),
    )
    if np.any(lo_idx >= hi_idx):
        return set()
    axes = [np.arange(a, b) for a, b in zip(lo_idx, hi_idx)]
    mesh = np.meshgrid(*axes, indexing="ij")
    idx = np.stack([m.ravel() for m in mesh], axis=-1)
    centers = origin + (idx + 0.5) * spec.resolution
    near = _point_segment_distance(centers, p0, p1) <= radius
    return {tuple(int(v) for v in row) for row in idx[near]}


def dilate_cells(cells: set[Cell] | frozenset[Cell], spec: GridSpec, radius: int = 1) -> set[Cell]:
    """Chebyshev dilation of a cell set, clipped to the grid."""
    if radius <= 0:
        return set(cells)
    offsets = np.indices((2 * radius + 1,) * spec.ndim).reshape(spec.ndim, -1).T - radius
    out: set[Cell] = set()
    for cell in cells:
        for off in offsets:
            cand = tuple(int(c + o) for c, o in zip(cell, off))
            if spec.contains(cand):
                out.add(cand)
    return out


# --- scene generators (2-axis grids) ---------------------------------------

_MAX_TILT = np.deg2rad(15.0)
_SCENE_RETRIES = 8


def _pipe_scene(params: SceneParams, spec: GridSpec, rng) -> dict[int, set[Cell]]:
    """Pipes span the full axis-0 extent at random offsets and small tilts."""
    w, h = spec.dims
    res = spec.resolution
    ox, oy = spec.origin
    count = int(rng.integers(params.pipe_count_range[0], params.pipe_count_range[1] + 1))
    radius = params.pipe_thickness * res / 2.0
    objects: dict[int, set[Cell]] = {}
    for i in range(count):
        y0 = oy + float(rng.uniform(0.5, h - 0.5)) * res
        tilt = float(rng.uniform(-_MAX_TILT, _MAX_TILT))
        dy = np.tan(tilt) * w * res
        y1 = float(np.clip(y0 + dy, oy + 0.5 * res, oy + (h - 0.5) * res))
        p0 = (ox - res, y0)
        p1 = (ox + (w + 1) * res, y1)
        objects[i] = rasterize_capsule(p0, p1, radius, spec)
    return objects


def _shelf_scene(params: SceneParams, spec: GridSpec, rng) -> dict[int, set[Cell]]:
    """Axis-aligned partition walls plus random rectangles and blobs."""
    w, h = spec.dims
    objects: dict[int, set[Cell]] = {}
    next_id = 0
    n_part = int(rng.integers(params.partition_count_range[0], params.partition_count_range[1] + 1))
    for _ in range(n_part):
        col = int(rng.integers(1, max(2, w - 1)))
        span = int(round(float(rng.uniform(0.55, 0.85)) * h))
        from_bottom = bool(rng.integers(0, 2))
        rows = range(0, span) if from_bottom else range(h - span, h)
        objects[next_id] = {(col, r) for r in rows if 0 <= r < h}
        next_id += 1
    n_obj = int(rng.integers(params.object_count_range[0], params.object_count_range[1] + 1))
    for _ in range(n_obj):
        if rng.uniform() < 0.6:
            ow = int(rng.integers(1, 4))
            oh = int(rng.integers(1, 4))
            x0 = int(rng.integers(0, max(1, w - ow)))
            y0 = int(rng.integers(0, max(1, h - oh)))
            cells = {(x0 + dx, y0 + dy) for dx in range(ow) for dy in range(oh)}
        else:
            # blob: short self-avoiding-ish random walk
            x = int(rng.integers(0, w))
            y = int(rng.integers(0, h))
            cells = {(x, y)}
            for _ in range(int(rng.integers(2, 8))):
                step = rng.integers(0, 4)
                dx, dy = [(1, 0), (-1, 0), (0, 1), (0, -1)][int(step)]
                x = int(np.clip(x + dx, 0, w - 1))
                y = int(np.clip(y + dy, 0, h - 1))
                cells.add((x, y))
        objects[next_id] = cells
        next_id += 1
    return objects


def generate_scene(
    params: SceneParams,
    spec: GridSpec,
    seed: int,
    keepout: frozenset[Cell] | set[Cell] = frozenset(),
) -> GroundTruthGrid:
    """Deterministic randomized scene for (params, spec, seed).

    `keepout` cells (typically the start and goal robot footprints), dilated
    by `params.clearance`, are carved free of every object. The whole scene
    is re-drawn from a derived stream if carving leaves any object with zero
    cells; after a bounded number of retries InfeasibleScene is raised.
    """
    if spec.ndim != 2:
        raise NotImplementedError("scene generators support 2-axis grids")
    carve = dilate_cells(set(keepout), spec, params.clearance) if keepout else set()
    for attempt in range(_SCENE_RETRIES):
        rng = make_rng(seed, "scene", params.domain, attempt)
        if params.domain == "pipe":
            objects = _pipe_scene(params, spec, rng)
        else:
            objects = _shelf_scene(params, spec, rng)
        if carve:
            objects = {oid: cells - carve for oid, cells in objects.items()}
        if all(cells for cells in objects.values()):
            occupied: set[Cell] = set()
            object_ids: dict[Cell, int] = {}
            for oid in sorted(objects):
                occupied |= objects[oid]
                for cell in objects[oid]:
                    object_ids[cell] = oid
            return GroundTruthGrid(
                spec=spec,
                occupied=frozenset(occupied),
                object_ids=object_ids,
                domain=params.domain,
                seed=seed,
            )
    raise InfeasibleScene(
        f"no valid {params.domain} scene for seed {seed} after {_SCENE_RETRIES} retries"
    )


# --- portable serialization -------------------------------------------------
#
# Grid file layout (little-endian throughout):
#   [u32 header_len][header JSON utf-8]
#   [u32 run_count][run_count x (u32 length, u8 value)]      occupancy RLE
#   [u32 run_count][run_count x (u32 length, i32 value)]     object-id RLE
# Runs are over cells flattened in C (row-major) order. Object id -1 marks
# unlabeled cells. The same container, with the object-id stream empty and
# payload values {0:free, 1:occupied, 2:unknown}, carries estimate snapshots.

GRID_MAGIC = "grid-rle-v1"


def rle_encode(values: np.ndarray) -> list[tuple[int, int]]:
    flat = np.asarray(values).ravel(order="C")
    if flat.size == 0:
        return []
    change = np.nonzero(np.diff(flat))[0] + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [flat.size]))
    return [(int(e - s), int(flat[s])) for s, e in zip(starts, ends)]


def rle_decode(runs, size: int, dtype=np.int64) -> np.ndarray:
    out = np.empty(size, dtype=dtype)
    pos = 0
    for length, value in runs:
        out[pos : pos + length] = value
        pos += length
    if pos != size:
        raise ValueError(f"RLE payload covers {pos} cells, expected {size}")
    return out


def _pack_runs(runs, value_dtype: str) -> bytes:
    arr = np.zeros(len(runs), dtype=np.dtype([("len", "<u4"), ("val", value_dtype)]))
    for i, (length, value) in enumerate(runs):
        arr[i] = (length, value)
    return np.uint32(len(runs)).tobytes() + arr.tobytes()


def _unpack_runs(buf: bytes, offset: int, value_dtype: str):
    (count,) = np.frombuffer(buf, dtype="<u4", count=1, offset=offset)
    offset += 4
    dt = np.dtype([("len", "<u4"), ("val", value_dtype)])
    arr = np.frombuffer(buf, dtype=dt, count=int(count), offset=offset)
    offset += int(count) * dt.itemsize
    return [(int(r["len"]), int(r["val"])) for r in arr], offset


def grid_to_bytes(grid: GroundTruthGrid) -> bytes:
    header = {
        "format": GRID_MAGIC,
        "dims": list(grid.spec.dims),
        "resolution": grid.spec.resolution,
        "origin": list(grid.spec.origin),
        "domain": grid.domain,
        "seed": grid.seed,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    occ = grid.to_array().astype(np.uint8)
    ids = np.full(grid.spec.dims, -1, dtype=np.int32)
    for cell, oid in grid.object_ids.items():
        ids[cell] = oid
    return (
        np.uint32(len(hdr)).tobytes()
        + hdr
        + _pack_runs(rle_encode(occ), "<u1")
        + _pack_runs(rle_encode(ids), "<i4")
    )


def grid_from_bytes(buf: bytes) -> GroundTruthGrid:
    (hlen,) = np.frombuffer(buf, dtype="<u4", count=1)
    header = json.loads(buf[4 : 4 + int(hlen)].decode("utf-8"))
    if header.get("format") != GRID_MAGIC:
        raise ValueError(f"unrecognized grid format {header.get('format')!r}")
    spec = GridSpec(
        dims=tuple(header["dims"]),
        resolution=header["resolution"],
        origin=tuple(header["origin"]),
    )
    offset = 4 + int(hlen)
    occ_runs, offset = _unpack_runs(buf, offset, "<u1")
    id_runs, offset = _unpack_runs(buf, offset, "<i4")
    occ = rle_decode(occ_runs, spec.num_cells, dtype=np.uint8).reshape(spec.dims)
    ids = rle_decode(id_runs, spec.num_cells, dtype=np.int32).reshape(spec.dims)
    occupied = {tuple(int(v) for v in c) for c in np.argwhere(occ == 1)}
    object_ids = {
        tuple(int(v) for v in c): int(ids[tuple(c)]) for c in np.argwhere(ids >= 0)
    }
    return GroundTruthGrid(
        spec=spec,
        occupied=frozenset(occupied),
        object_ids=object_ids,
        domain=header.get("domain"),
        seed=header.get("seed"),
    )


def save_grid(grid: GroundTruthGrid, path) -> None:
    with open(path, "wb") as fh:
        fh.write(grid_to_bytes(grid))


def load_grid(path) -> GroundTruthGrid:
    with open(path, "rb") as fh:
        return grid_from_bytes(fh.read())
