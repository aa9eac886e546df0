"""Probabilistic workspace belief built from interaction history, plus
extrapolation into unexplored regions via a pluggable predictor.

Cell states: certified free sweeps are ground truth and never revert;
contact marks are noisy and yield to free certification. The predictor input
encoding is {0 = known free, 0.5 = unknown, 1 = known occupied}; one byte per
cell on the wire (0, 1, 2 respectively).
"""
from __future__ import annotations

import json
import logging
import subprocess
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable

import numpy as np

from .workspace import Cell, GridSpec, _pack_runs, _unpack_runs, rle_decode, rle_encode

if TYPE_CHECKING:
    from .contact import ContactEstimate

log = logging.getLogger(__name__)

FREE = 0
OCCUPIED = 1
UNKNOWN = 2

SNAPSHOT_MAGIC = "estimate-rle-v1"


class OutOfGrid(Exception):
    """Contact point falls outside the workspace grid."""


class ExternalPredictorFailure(Exception):
    """Subprocess predictor timed out or broke the wire protocol."""


class OccupancyEstimate:
    """Three-state belief grid with per-cell probability on unknown cells.

    Single-writer: the executive mutates it between planning snapshots.
    """

    def __init__(self, spec: GridSpec):
        self.spec = spec
        self.state = np.full(spec.dims, UNKNOWN, dtype=np.int8)
        self.prob = np.full(spec.dims, 0.5, dtype=np.float64)

    def copy(self) -> "OccupancyEstimate":
        out = OccupancyEstimate(self.spec)
        out.state = self.state.copy()
        out.prob = self.prob.copy()
        return out

    def state_at(self, cell: Cell) -> int:
        return int(self.state[cell])

    def is_known_free(self, cell: Cell) -> bool:
        return self.state[cell] == FREE

    def certify_free(self, cells: Iterable[Cell]) -> None:
        """Mark swept cells as ground-truth free; idempotent. A previously
        occupied mark is dropped with a warning (localization is noisy, free
        certification is not)."""
        for cell in cells:
            if not self.spec.contains(cell):
                continue
            if self.state[cell] == OCCUPIED:
                log.warning("conflicting evidence at %s: occupied mark dropped for free", cell)
            self.state[cell] = FREE
            self.prob[cell] = 0.0

    def mark_contact(self, contact: "ContactEstimate", spread_radius: int = 1) -> None:
        """Record an estimated contact: its cell becomes occupied (unless
        known free); unknown neighbors within the Chebyshev radius get their
        probability raised to 0.9 * confidence (max semantics)."""
        cell = self.spec.world_to_cell(contact.point)
        if cell is None:
            raise OutOfGrid(f"contact point {contact.point} outside grid")
        if self.state[cell] != FREE:
            self.state[cell] = OCCUPIED
            self.prob[cell] = 1.0
        p_ring = 0.9 * contact.confidence
        for off in np.ndindex(*(2 * spread_radius + 1,) * self.spec.ndim):
            nb = tuple(c + o - spread_radius for c, o in zip(cell, off))
            if nb == cell or not self.spec.contains(nb):
                continue
            if self.state[nb] == UNKNOWN:
                self.prob[nb] = max(self.prob[nb], p_ring)

    def set_occupied(self, cell: Cell) -> None:
        """Force a cell occupied (hypothesis-set elimination)."""
        if self.state[cell] == FREE:
            raise ValueError(f"cell {cell} is certified free; cannot mark occupied")
        self.state[cell] = OCCUPIED
        self.prob[cell] = 1.0

    def encoded(self) -> np.ndarray:
        """Predictor input encoding: 0 known free, 0.5 unknown, 1 occupied."""
        return np.where(self.state == FREE, 0.0, np.where(self.state == OCCUPIED, 1.0, 0.5))

    def to_bytes(self) -> bytes:
        header = {
            "format": SNAPSHOT_MAGIC,
            "dims": list(self.spec.dims),
            "resolution": self.spec.resolution,
            "origin": list(self.spec.origin),
        }
        hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return np.uint32(len(hdr)).tobytes() + hdr + _pack_runs(rle_encode(self.state), "<u1")

    @classmethod
    def from_bytes(cls, buf: bytes) -> "OccupancyEstimate":
        (hlen,) = np.frombuffer(buf, dtype="<u4", count=1)
        header = json.loads(buf[4 : 4 + int(hlen)].decode("utf-8"))
        if header.get("format") != SNAPSHOT_MAGIC:
            raise ValueError(f"unrecognized snapshot format {header.get('format')!r}")
        spec = GridSpec(
            dims=tuple(header["dims"]),
            resolution=header["resolution"],
            origin=tuple(header["origin"]),
        )
        runs, _ = _unpack_runs(buf, 4 + int(hlen), "<u1")
        out = cls(spec)
        out.state = rle_decode(runs, spec.num_cells, dtype=np.int8).reshape(spec.dims)
        out.prob = np.where(
            out.state == FREE, 0.0, np.where(out.state == OCCUPIED, 1.0, 0.5)
        ).astype(np.float64)
        return out


@dataclass(frozen=True)
class PredictorConfig:
    kind: str = "structural"  # none | structural | external
    decay: float = 0.9
    axes: tuple[int, ...] | None = None  # None = every grid axis
    external_cmd: tuple[str, ...] | None = None
    prob_floor: float = 0.0
    prob_ceiling: float = 1.0
    timeout_s: float = 10.0

    def __post_init__(self):
        if self.kind not in ("none", "structural", "external"):
            raise ValueError(f"unknown predictor kind {self.kind!r}")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")
        if not 0.0 <= self.prob_floor <= self.prob_ceiling <= 1.0:
            raise ValueError("need 0 <= floor <= ceiling <= 1")
        if self.kind == "external" and not self.external_cmd:
            raise ValueError("external predictor requires external_cmd")


def predict(est: OccupancyEstimate, cfg: PredictorConfig) -> np.ndarray:
    """Probability grid over the workspace.

    Observed cells are authoritative in every mode (free -> 0, occupied -> 1);
    predictions only fill unknown space. The external predictor is advisory:
    any failure falls back to the passthrough output with a logged warning.
    """
    base = np.where(
        est.state == FREE, 0.0, np.where(est.state == OCCUPIED, 1.0, est.prob)
    ).astype(np.float64)
    if cfg.kind == "none":
        return base
    if cfg.kind == "structural":
        return _structural_predict(est, cfg, base)
    try:
        out = _external_predict(est, cfg)
    except ExternalPredictorFailure as exc:
        log.warning("external predictor failed (%s); falling back to passthrough", exc)
        return base
    out = out.astype(np.float64)
    out[est.state == FREE] = 0.0
    out[est.state == OCCUPIED] = 1.0
    return out


def _structural_predict(est: OccupancyEstimate, cfg: PredictorConfig, base: np.ndarray) -> np.ndarray:
    out = base.copy()
    axes = cfg.axes if cfg.axes is not None else tuple(range(est.spec.ndim))
    dims = est.spec.dims
    for cell in np.argwhere(est.state == OCCUPIED):
        for axis in axes:
            for sign in (1, -1):
                pos = list(cell)
                dist = 0
                while True:
                    pos[axis] += sign
                    dist += 1
                    if not 0 <= pos[axis] < dims[axis]:
                        break
                    idx = tuple(pos)
                    if est.state[idx] != UNKNOWN:
                        break
                    out[idx] = max(out[idx], cfg.decay**dist)
    unknown = est.state == UNKNOWN
    out[unknown] = np.clip(out[unknown], cfg.prob_floor, cfg.prob_ceiling)
    return out


# --- external predictor wire protocol ----------------------------------------
#
# One frame (little-endian):
#   [u32 frame_len][u32 header_len][header JSON utf-8][payload]
# frame_len counts everything after itself. Request payload: one byte per
# cell in C order, 0 = known free, 1 = unknown, 2 = known occupied. Response
# payload: float32 probabilities, C order.

_REQUEST_BYTE = {FREE: 0, UNKNOWN: 1, OCCUPIED: 2}


def pack_frame(header: dict, payload: bytes) -> bytes:
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = np.uint32(len(hdr)).tobytes() + hdr + payload
    return np.uint32(len(body)).tobytes() + body


def unpack_frame(buf: bytes, offset: int = 0) -> tuple[dict, bytes, int]:
    """Returns (header, payload, next_offset)."""
    if len(buf) < offset + 4:
        raise ExternalPredictorFailure("truncated frame length")
    (flen,) = np.frombuffer(buf, dtype="<u4", count=1, offset=offset)
    end = offset + 4 + int(flen)
    if len(buf) < end:
        raise ExternalPredictorFailure("truncated frame body")
    (hlen,) = np.frombuffer(buf, dtype="<u4", count=1, offset=offset + 4)
    hstart = offset + 8
    header = json.loads(buf[hstart : hstart + int(hlen)].decode("utf-8"))
    return header, buf[hstart + int(hlen) : end], end


def encode_request(est: OccupancyEstimate) -> bytes:
    codes = np.zeros(est.spec.dims, dtype=np.uint8)
    for state, byte in _REQUEST_BYTE.items():
        codes[est.state == state] = byte
    header = {"kind": "predict-request", "dims": list(est.spec.dims)}
    return pack_frame(header, codes.tobytes(order="C"))


def decode_response(buf: bytes, dims: tuple[int, ...]) -> np.ndarray:
    header, payload, _ = unpack_frame(buf)
    if header.get("kind") != "predict-response" or tuple(header.get("dims", ())) != tuple(dims):
        raise ExternalPredictorFailure(f"bad response header {header}")
    expected = int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise ExternalPredictorFailure(f"payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)


def _external_predict(est: OccupancyEstimate, cfg: PredictorConfig) -> np.ndarray:
    request = encode_request(est)
    try:
        proc = subprocess.run(
            list(cfg.external_cmd),
            input=request,
            capture_output=True,
            timeout=cfg.timeout_s,
        )
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise ExternalPredictorFailure(str(exc)) from exc
    if proc.returncode != 0:
        raise ExternalPredictorFailure(f"predictor exited {proc.returncode}")
    return decode_response(proc.stdout, est.spec.dims)
