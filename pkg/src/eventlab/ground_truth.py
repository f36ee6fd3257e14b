"""Pseudo ground-truth match matrices between query and reference places."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import check_int
from .events import parse_seconds_us

EARTH_RADIUS_M = 6_371_000.0
FILTERS = ("reverse_direction", "endpoint_overlap")


@dataclass(frozen=True, eq=False)
class PlaceIndex:
    """Places in traverse order.

    ``positions`` is ``(n, 2)``: latitude/longitude degrees when
    ``coords == "latlon"``, metres when ``coords == "planar"``. Headings are
    compass degrees; when omitted they are derived from consecutive positions.
    """

    t_center: np.ndarray
    positions: np.ndarray | None = None
    coords: str | None = None
    headings: np.ndarray | None = None
    frame_index: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.t_center, dtype=np.int64)
        if t.ndim != 1:
            raise ValueError("t_center must be one-dimensional")
        if t.size > 1 and np.any(np.diff(t) < 0):
            raise ValueError("place timestamps must be non-decreasing")
        object.__setattr__(self, "t_center", t)
        if self.frame_index is None:
            object.__setattr__(self, "frame_index", np.arange(t.size))
        if self.positions is not None:
            pos = np.asarray(self.positions, dtype=np.float64)
            if pos.shape != (t.size, 2) or not np.isfinite(pos).all():
                raise ValueError(f"positions must be a finite ({t.size}, 2) array for every place")
            if self.coords not in ("latlon", "planar"):
                raise ValueError("coords must be 'latlon' or 'planar' when positions are given")
            object.__setattr__(self, "positions", pos)
            if self.headings is None:
                object.__setattr__(self, "headings", derive_headings(pos, self.coords))
        if self.headings is not None:
            h = np.asarray(self.headings, dtype=np.float64)
            if h.shape != (t.size,):
                raise ValueError("headings must have one entry per place")
            object.__setattr__(self, "headings", h)

    def __len__(self):
        return int(self.t_center.size)


@dataclass(frozen=True, eq=False)
class GroundTruthMatrix:
    """Binary matrix, rows = queries, columns = references."""

    matrix: np.ndarray
    tolerance_kind: str
    tolerance: float
    filters: tuple = ()
    query_t: np.ndarray | None = None
    reference_t: np.ndarray | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.asarray(self.matrix)
        if m.ndim != 2:
            raise ValueError("ground truth must be a 2-D matrix")
        if m.size and not np.isin(m, (0, 1)).all():
            raise ValueError("ground truth entries must be 0 or 1")
        m = m.astype(bool)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "filters", tuple(sorted(self.filters)))

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def gtp(self):
        """Queries owning at least one correct reference."""
        return int(self.matrix.any(axis=1).sum())

    @property
    def empty_rows(self):
        return np.flatnonzero(~self.matrix.any(axis=1))


def gt_tolerance_in_places(tolerance_places: int, place_spacing_us: int) -> int:
    check_int(tolerance_places, "tolerance_places", 0)
    check_int(place_spacing_us, "place_spacing_us", 0)
    return int(tolerance_places) * int(place_spacing_us)


def build_gt_time(reference: PlaceIndex, query: PlaceIndex, tolerance_us: int) -> GroundTruthMatrix:
    """Entry (q, r) is set iff the place centres are within ``tolerance_us``."""
    if not len(reference) or not len(query):
        raise ValueError("reference and query place indexes must be non-empty")
    tolerance_us = check_int(tolerance_us, "tolerance_us", 0)
    diff = np.abs(query.t_center[:, None] - reference.t_center[None, :])
    return GroundTruthMatrix(diff <= tolerance_us, "time_us", tolerance_us, (),
                             query.t_center, reference.t_center)


def haversine_m(lat1, lon1, lat2, lon2):
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))
    a = (np.sin((lat2 - lat1) / 2) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2)
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def _bearing(p0, p1, coords):
    if coords == "planar":
        return np.degrees(np.arctan2(p1[:, 0] - p0[:, 0], p1[:, 1] - p0[:, 1])) % 360.0
    lat1, lon1, lat2, lon2 = map(np.radians, (p0[:, 0], p0[:, 1], p1[:, 0], p1[:, 1]))
    y = np.sin(lon2 - lon1) * np.cos(lat2)
    x = np.cos(lat1) * np.sin(lat2) - np.sin(lat1) * np.cos(lat2) * np.cos(lon2 - lon1)
    return np.degrees(np.arctan2(y, x)) % 360.0


def derive_headings(positions, coords):
    """Bearing of the segment ending at each place; the first place copies the second.

    Stationary segments keep the previous heading.
    """
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if n < 2:
        return np.zeros(n)
    seg = _bearing(pos[:-1], pos[1:], coords)
    moved = np.any(pos[1:] != pos[:-1], axis=1)
    headings = np.zeros(n)
    last = None
    for i in range(n - 1):
        if moved[i]:
            last = seg[i]
        headings[i + 1] = last if last is not None else np.nan
    valid = np.flatnonzero(~np.isnan(headings[1:]))
    fill = headings[1 + valid[0]] if valid.size else 0.0
    headings[1:][np.isnan(headings[1:])] = fill
    headings[0] = headings[1]
    return headings


def _endpoint_zone(n, fraction):
    return int(math.ceil(fraction * n)) if fraction > 0 else 0


def build_gt_position(reference: PlaceIndex, query: PlaceIndex, tolerance_m: float,
                      filters=(), max_heading_diff_deg=90.0,
                      endpoint_fraction=0.05) -> GroundTruthMatrix:
    """Match places within ``tolerance_m``, then clear entries rejected by ``filters``."""
    if reference.positions is None or query.positions is None:
        raise ValueError("both place indexes need positions for position ground truth")
    if reference.coords != query.coords:
        raise ValueError(
            f"mixed coordinate conventions: reference {reference.coords}, query {query.coords}")
    filters = tuple(filters)
    unknown = set(filters) - set(FILTERS)
    if unknown:
        raise ValueError(f"unknown ground-truth filters {sorted(unknown)}")
    q, r = query.positions, reference.positions
    if query.coords == "latlon":
        dist = haversine_m(q[:, None, 0], q[:, None, 1], r[None, :, 0], r[None, :, 1])
    else:
        dist = np.hypot(q[:, None, 0] - r[None, :, 0], q[:, None, 1] - r[None, :, 1])
    match = dist <= tolerance_m
    if "reverse_direction" in filters:
        delta = np.abs(query.headings[:, None] - reference.headings[None, :]) % 360.0
        delta = np.minimum(delta, 360.0 - delta)
        match &= delta <= max_heading_diff_deg
    if "endpoint_overlap" in filters:
        nq, nr = len(query), len(reference)
        mq, mr = _endpoint_zone(nq, endpoint_fraction), _endpoint_zone(nr, endpoint_fraction)
        q_idx = np.arange(nq)[:, None]
        r_idx = np.arange(nr)[None, :]
        q_end, q_begin = q_idx >= nq - mq, q_idx < mq
        r_end, r_begin = r_idx >= nr - mr, r_idx < mr
        match &= ~((q_end & r_begin) | (q_begin & r_end))
    return GroundTruthMatrix(match, "distance_m", float(tolerance_m), filters,
                             query.t_center, reference.t_center,
                             {"max_heading_diff_deg": max_heading_diff_deg,
                              "endpoint_fraction": endpoint_fraction})


# --------------------------------------------------------------------------- position tracks

@dataclass(frozen=True)
class PositionTrack:
    t_us: np.ndarray
    positions: np.ndarray
    coords: str

    def at(self, t_us, offset_us=0):
        """Nearest-timestamp position lookup (ties go to the earlier sample)."""
        t = np.asarray(t_us, dtype=np.int64) + offset_us
        idx = np.searchsorted(self.t_us, t, side="left")
        idx = np.clip(idx, 1, len(self.t_us) - 1) if len(self.t_us) > 1 else np.zeros_like(idx)
        if len(self.t_us) > 1:
            left = self.t_us[idx - 1]
            right = self.t_us[idx]
            idx = np.where(np.abs(t - left) <= np.abs(right - t), idx - 1, idx)
        return self.positions[idx]


def load_position_track(path) -> PositionTrack:
    """Read ``t_seconds,lat,lon`` or ``t_seconds,x_m,y_m`` CSV (header required)."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header == ["t_seconds", "lat", "lon"]:
            coords = "latlon"
        elif header == ["t_seconds", "x_m", "y_m"]:
            coords = "planar"
        else:
            raise ValueError(f"{path}: header must be t_seconds,lat,lon or t_seconds,x_m,y_m")
        ts, pos = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            try:
                ts.append(parse_seconds_us(row[0]))
                pos.append((float(row[1]), float(row[2])))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not ts:
        raise ValueError(f"{path}: empty position track")
    t = np.asarray(ts, dtype=np.int64)
    order = np.argsort(t, kind="stable")
    return PositionTrack(t[order], np.asarray(pos, dtype=np.float64)[order], coords)


def save_position_track(track: PositionTrack, path):
    cols = ("lat", "lon") if track.coords == "latlon" else ("x_m", "y_m")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t_seconds", *cols])
        for t, (a, b) in zip(track.t_us.tolist(), track.positions.tolist()):
            writer.writerow([f"{t // 1_000_000}.{t % 1_000_000:06d}", repr(a), repr(b)])


# --------------------------------------------------------------------------- persistence

def save_bitmap(matrix, path, sidecar: dict):
    """Row-major packed bits (MSB first, rows padded to whole bytes) + JSON sidecar."""
    path = Path(path)
    m = np.asarray(matrix, dtype=bool)
    path.write_bytes(np.packbits(m, axis=1, bitorder="big").tobytes())
    meta = {"rows": int(m.shape[0]), "cols": int(m.shape[1]), "bit_order": "msb_first",
            "row_stride_bytes": int((m.shape[1] + 7) // 8), **sidecar}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_bitmap(path):
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    rows, cols = meta["rows"], meta["cols"]
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    stride = (cols + 7) // 8
    if raw.size != rows * stride:
        raise ValueError(f"{path}: expected {rows * stride} bytes, found {raw.size}")
    bits = np.unpackbits(raw.reshape(rows, stride), axis=1, bitorder="big")[:, :cols]
    return bits.astype(bool), meta


def save_gt(gt: GroundTruthMatrix, path):
    save_bitmap(gt.matrix, path, {
        "kind": "ground_truth",
        "tolerance": {"kind": gt.tolerance_kind, "value": gt.tolerance},
        "filters": list(gt.filters),
        "params": gt.params,
        "query_t_us": None if gt.query_t is None else [int(v) for v in gt.query_t],
        "reference_t_us": None if gt.reference_t is None else [int(v) for v in gt.reference_t],
        "gtp": gt.gtp,
        "empty_query_rows": [int(i) for i in gt.empty_rows],
    })


def load_gt(path) -> GroundTruthMatrix:
    bits, meta = load_bitmap(path)
    tol = meta["tolerance"]
    return GroundTruthMatrix(bits, tol["kind"], tol["value"], tuple(meta.get("filters", ())),
                             None if meta.get("query_t_us") is None else np.asarray(meta["query_t_us"]),
                             None if meta.get("reference_t_us") is None else np.asarray(meta["reference_t_us"]),
                             meta.get("params", {}))
