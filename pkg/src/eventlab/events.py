"""Event streams: data model, file formats and a synthetic traverse generator.

Timestamps are integer microseconds since stream start. Polarity is stored as
+1 / -1; formats that encode polarity as {0, 1} map 0 to -1 on ingest.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from ._validation import check_int

EVB_MAGIC = b"EVB1"
EVB_HEADER = struct.Struct("<4sIIQ")
EVB_RECORD = np.dtype(
    [("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "V3")]
)
assert EVB_HEADER.size == 20 and EVB_RECORD.itemsize == 16

FORMATS = ("text", "evb", "hdf5")


class EventFormatError(ValueError):
    """Raised when an event file cannot be parsed under its declared format."""


def _frozen(arr, dtype):
    arr = np.ascontiguousarray(arr, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-ordered events from one sensor.

    Columns are stored as parallel read-only arrays. ``t_start`` is the
    absolute time (microseconds) that ``t == 0`` corresponds to; it is 0
    unless the stream was rebased on load.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    width: int
    height: int
    duration: int | None = None
    t_start: int = 0
    dataset: str = ""
    sequence: str = ""

    def __post_init__(self):
        width = check_int(self.width, "width", 1)
        height = check_int(self.height, "height", 1)
        t = np.asarray(self.t)
        n = t.shape[0] if t.ndim else 0
        for name in ("x", "y", "p"):
            col = np.asarray(getattr(self, name))
            if col.shape != (n,):
                raise ValueError(f"column {name} has shape {col.shape}, expected ({n},)")
        if n and np.any(t < 0):
            raise ValueError("timestamps must be non-negative")
        t = _frozen(t, np.int64)
        x = _frozen(self.x, np.int64)
        y = _frozen(self.y, np.int64)
        p = _frozen(self.p, np.int8)
        if n:
            if np.any(np.diff(t) < 0):
                raise ValueError("timestamps must be non-decreasing")
            if x.min() < 0 or x.max() >= width or y.min() < 0 or y.max() >= height:
                raise ValueError(f"event coordinates outside {width}x{height} resolution")
            if not np.isin(p, (-1, 1)).all():
                raise ValueError("polarity must be +1 or -1")
        last = int(t[-1]) if n else 0
        duration = last if self.duration is None else check_int(self.duration, "duration", 0)
        if duration < last:
            raise ValueError(f"duration {duration} shorter than last timestamp {last}")
        for name, value in (("t", t), ("x", x), ("y", y), ("p", p), ("width", width),
                            ("height", height), ("duration", duration)):
            object.__setattr__(self, name, value)

    def __len__(self):
        return int(self.t.shape[0])

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.duration == other.duration
            and self.t_start == other.t_start
            and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in "txyp")
        )

    def same_events(self, other):
        """True when both streams hold identical records at the same resolution."""
        return (
            self.width == other.width
            and self.height == other.height
            and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in "txyp")
        )

    @classmethod
    def from_unsorted(cls, t, x, y, p, width, height, **kwargs):
        """Build a stream from records in arbitrary order (stable sort by t)."""
        t = np.asarray(t, dtype=np.int64)
        order = np.argsort(t, kind="stable")
        p = np.asarray(p, dtype=np.int8)
        return cls(t[order], np.asarray(x)[order], np.asarray(y)[order], p[order],
                   width, height, **kwargs)

    @classmethod
    def empty(cls, width, height, **kwargs):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z.astype(np.int8), width, height, **kwargs)

    def slice_time(self, begin, end):
        """Events with ``begin <= t < end`` (times keep their original origin)."""
        lo, hi = np.searchsorted(self.t, [begin, end], side="left")
        return EventStream(self.t[lo:hi], self.x[lo:hi], self.y[lo:hi], self.p[lo:hi],
                           self.width, self.height, self.duration, self.t_start,
                           self.dataset, self.sequence)


# --------------------------------------------------------------------------- text

def parse_seconds_us(token: str) -> int:
    """Decimal seconds string -> integer microseconds, rounding half up."""
    token = token.strip()
    head, dot, frac = token.partition(".")
    if (head.isdigit() or (head == "" and frac)) and (frac.isdigit() or frac == ""):
        us = int(head or "0") * 1_000_000
        if frac:
            us += int(frac[:6].ljust(6, "0"))
            if len(frac) > 6 and frac[6] >= "5":
                us += 1
        return us
    try:
        value = Decimal(token)
    except InvalidOperation:
        raise ValueError(f"not a timestamp: {token!r}") from None
    if not value.is_finite() or value < 0:
        raise ValueError(f"timestamp must be finite and non-negative: {token!r}")
    return int((value * 1_000_000 + Decimal("0.5")).to_integral_value(rounding="ROUND_FLOOR"))


def format_seconds_us(us: int) -> str:
    return f"{us // 1_000_000}.{us % 1_000_000:06d}"


def _read_text(path, resolution):
    ts, xs, ys, ps = [], [], [], []
    header = None
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            if stripped.startswith("#"):
                if lineno == 1:
                    parts = stripped[1:].split()
                    try:
                        header = (int(parts[0]), int(parts[1]))
                    except (IndexError, ValueError):
                        raise EventFormatError(f"{path}:1: bad resolution header {stripped!r}") from None
                continue
            parts = stripped.split()
            if len(parts) != 4:
                raise EventFormatError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                t = parse_seconds_us(parts[0])
                x, y, p = int(parts[1]), int(parts[2]), int(parts[3])
            except ValueError as exc:
                raise EventFormatError(f"{path}:{lineno}: {exc}") from None
            if p not in (0, 1, -1):
                raise EventFormatError(f"{path}:{lineno}: polarity must be 0 or 1, got {p}")
            ts.append(t)
            xs.append(x)
            ys.append(y)
            ps.append(1 if p == 1 else -1)
    return (np.array(ts, dtype=np.int64), np.array(xs, dtype=np.int64),
            np.array(ys, dtype=np.int64), np.array(ps, dtype=np.int8), header)


def _write_text(stream, path):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"# {stream.width} {stream.height}\n")
        for t, x, y, p in zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(),
                              stream.p.tolist()):
            fh.write(f"{format_seconds_us(t)} {x} {y} {1 if p > 0 else 0}\n")


# --------------------------------------------------------------------------- evb

def _read_evb(path):
    with open(path, "rb") as fh:
        head = fh.read(EVB_HEADER.size)
        if len(head) != EVB_HEADER.size:
            raise EventFormatError(f"{path}: truncated header ({len(head)} bytes)")
        magic, width, height, count = EVB_HEADER.unpack(head)
        if magic != EVB_MAGIC:
            raise EventFormatError(f"{path}: bad magic {magic!r}")
        body = fh.read()
    expected = count * EVB_RECORD.itemsize
    if len(body) != expected:
        raise EventFormatError(
            f"{path}: offset {EVB_HEADER.size}: expected {expected} payload bytes, found {len(body)}")
    rec = np.frombuffer(body, dtype=EVB_RECORD, count=count)
    bad = ~np.isin(rec["p"], (-1, 1))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise EventFormatError(
            f"{path}: offset {EVB_HEADER.size + i * EVB_RECORD.itemsize}: invalid polarity {rec['p'][i]}")
    if count and rec["t"].max() > np.iinfo(np.int64).max:
        raise EventFormatError(f"{path}: timestamp overflows int64")
    return (rec["t"].astype(np.int64), rec["x"].astype(np.int64), rec["y"].astype(np.int64),
            rec["p"].astype(np.int8), (width, height))


def _write_evb(stream, path):
    if stream.width > 0xFFFF + 1 or stream.height > 0xFFFF + 1:
        raise ValueError("evb coordinates are 16-bit; resolution too large")
    rec = np.zeros(len(stream), dtype=EVB_RECORD)
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.p
    with open(path, "wb") as fh:
        fh.write(EVB_HEADER.pack(EVB_MAGIC, stream.width, stream.height, len(stream)))
        fh.write(rec.tobytes())


# --------------------------------------------------------------------------- hdf5

def _read_hdf5(path, sequence):
    import h5py

    with h5py.File(path, "r") as fh:
        if sequence is None:
            groups = [k for k in fh.keys() if isinstance(fh[k], h5py.Group)]
            if len(groups) != 1:
                raise EventFormatError(
                    f"{path}: {len(groups)} sequence groups present; name one of {groups}")
            sequence = groups[0]
        if sequence not in fh:
            raise EventFormatError(f"{path}: no sequence group {sequence!r}")
        grp = fh[sequence]
        try:
            cols = [np.asarray(grp[c][()]) for c in "txyp"]
        except KeyError as exc:
            raise EventFormatError(f"{path}/{sequence}: missing dataset {exc}") from None
        lengths = {c.shape for c in cols}
        if len(lengths) != 1 or cols[0].ndim != 1:
            raise EventFormatError(f"{path}/{sequence}: t, x, y, p must be equal-length 1-D datasets")
        header = None
        if "width" in grp.attrs and "height" in grp.attrs:
            header = (int(grp.attrs["width"]), int(grp.attrs["height"]))
        t_start = int(grp.attrs.get("t_start", 0))
        duration = int(grp.attrs["duration"]) if "duration" in grp.attrs else None
    t, x, y, p = cols
    if not np.issubdtype(t.dtype, np.integer):
        raise EventFormatError(f"{path}/{sequence}: t must hold integer microseconds")
    p = p.astype(np.int64)
    if p.size and not np.isin(p, (-1, 0, 1)).all():
        raise EventFormatError(f"{path}/{sequence}: polarity values outside {{0, 1}}")
    p = np.where(p > 0, 1, -1).astype(np.int8)
    return t.astype(np.int64), x.astype(np.int64), y.astype(np.int64), p, header, t_start, duration


def _write_hdf5(stream, path, sequence):
    import h5py

    with h5py.File(path, "a") as fh:
        if sequence in fh:
            del fh[sequence]
        grp = fh.create_group(sequence)
        grp.create_dataset("t", data=stream.t.astype(np.int64))
        grp.create_dataset("x", data=stream.x.astype(np.uint16))
        grp.create_dataset("y", data=stream.y.astype(np.uint16))
        grp.create_dataset("p", data=(stream.p > 0).astype(np.uint8))
        grp.attrs["width"] = stream.width
        grp.attrs["height"] = stream.height
        grp.attrs["t_start"] = stream.t_start
        grp.attrs["duration"] = stream.duration


# --------------------------------------------------------------------------- public I/O

def load_events(path, format=None, resolution=None, sequence=None, rebase=False,
                dataset="", sequence_name=None) -> EventStream:
    """Read an event file into an :class:`EventStream`.

    ``format`` defaults to the file suffix (``.txt``, ``.evb``, ``.h5``/``.hdf5``).
    ``resolution`` is a ``(width, height)`` override used when the file has no
    header; a header always wins. Out-of-order records are stably sorted.
    With ``rebase=True`` the first timestamp becomes 0 and is kept in ``t_start``.
    """
    path = Path(path)
    format = format or _guess_format(path)
    if format not in FORMATS:
        raise ValueError(f"unknown event format {format!r}; expected one of {FORMATS}")
    t_start, duration = 0, None
    if format == "text":
        t, x, y, p, header = _read_text(path, resolution)
    elif format == "evb":
        t, x, y, p, header = _read_evb(path)
    else:
        t, x, y, p, header, t_start, duration = _read_hdf5(path, sequence)
    res = header or resolution
    if res is None:
        raise EventFormatError(f"{path}: no resolution in file and no override supplied")
    width, height = int(res[0]), int(res[1])
    if width < 1 or height < 1:
        raise EventFormatError(f"{path}: zero-area resolution {width}x{height}")
    if len(t):
        bad = (x < 0) | (x >= width) | (y < 0) | (y >= height)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise EventFormatError(
                f"{path}: record {i}: coordinate ({x[i]}, {y[i]}) outside {width}x{height}")
    order = np.argsort(t, kind="stable")
    t, x, y, p = t[order], x[order], y[order], p[order]
    if rebase and len(t):
        origin = int(t[0])
        t = t - origin
        t_start += origin
        duration = None if duration is None else duration - origin
    if duration is not None and len(t) and duration < t[-1]:
        duration = None
    name = sequence_name if sequence_name is not None else (sequence or path.stem)
    return EventStream(t, x, y, p, width, height, duration=duration, t_start=t_start,
                       dataset=dataset, sequence=name)


def save_events(stream: EventStream, path, format=None, sequence=None):
    """Write ``stream``; reloading reproduces timestamps, coordinates and polarities."""
    path = Path(path)
    format = format or _guess_format(path)
    try:
        if format == "evb":
            _write_evb(stream, path)
        elif format == "text":
            _write_text(stream, path)
        elif format == "hdf5":
            _write_hdf5(stream, path, sequence or stream.sequence or "events")
        else:
            raise ValueError(f"unknown event format {format!r}")
    except OSError as exc:
        raise OSError(f"cannot write events to {path}: {exc}") from exc


def _guess_format(path):
    suffix = path.suffix.lower()
    if suffix in (".txt", ".csv", ".dat"):
        return "text"
    if suffix == ".evb":
        return "evb"
    if suffix in (".h5", ".hdf5"):
        return "hdf5"
    raise ValueError(f"cannot infer event format from {path.name!r}; pass format=")


# --------------------------------------------------------------------------- synthesis

@dataclass(frozen=True)
class SceneTexture:
    """A horizontally periodic texture the synthetic camera slides across.

    Event intensity is proportional to the absolute horizontal gradient of a
    smoothed random field, so events cluster on vertical edges. ``length`` is
    the scene width in pixels; traverses longer than that wrap around.
    """

    length: int = 2048
    seed: int = 0
    feature_scale: float = 3.0
    floor: float = 0.05

    def maps(self, height):
        rng = np.random.default_rng(self.seed)
        field_ = rng.standard_normal((height, self.length))
        field_ = ndimage.gaussian_filter(field_, self.feature_scale, mode="wrap")
        grad = np.roll(field_, -1, axis=1) - np.roll(field_, 1, axis=1)
        weight = np.abs(grad)
        weight += self.floor * weight.mean()
        polarity = np.where(grad <= 0, 1, -1).astype(np.int8)
        return weight, polarity


def _speed_segments(duration_us, speed_profile):
    speeds = np.asarray(speed_profile if len(speed_profile) else [1.0], dtype=np.float64)
    if np.any(speeds < 0) or not np.isfinite(speeds).all():
        raise ValueError("speed multipliers must be finite and non-negative")
    edges = np.floor(np.linspace(0, duration_us, len(speeds) + 1) + 0.5).astype(np.int64)
    return edges, speeds


def traverse_offset(t_us, duration_us, speed_profile=(1.0,), px_per_s=100.0):
    """Camera position along the scene (pixels) at times ``t_us``."""
    t = np.asarray(t_us, dtype=np.float64)
    edges, speeds = _speed_segments(duration_us, speed_profile)
    seg_len = np.diff(edges).astype(np.float64)
    start = np.concatenate([[0.0], np.cumsum(seg_len * speeds)])
    idx = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, len(speeds) - 1)
    travelled = start[idx] + (t - edges[idx]) * speeds[idx]
    return travelled * px_per_s / 1e6


def synth_traverse(seed, duration_us, mean_rate, width, height, scene=None,
                   speed_profile: Sequence[float] = (1.0,), px_per_s=100.0,
                   dataset="synthetic", sequence="") -> EventStream:
    """Deterministic Poisson event stream from a camera sliding across ``scene``.

    The instantaneous event rate is ``mean_rate * speed`` so every stretch of
    the scene yields the same expected number of events regardless of how fast
    it is crossed. ``speed_profile`` lists multipliers for equal-length
    segments of the traverse.
    """
    width = check_int(width, "width", 0)
    height = check_int(height, "height", 0)
    if width * height == 0:
        raise ValueError("zero-area resolution")
    duration_us = check_int(duration_us, "duration_us", 0)
    if mean_rate < 0:
        raise ValueError("mean_rate must be non-negative")
    scene = scene or SceneTexture()
    if scene.length < width:
        raise ValueError("scene length must be at least the sensor width")
    rng = np.random.default_rng(seed)
    edges, speeds = _speed_segments(duration_us, speed_profile)

    chunks = []
    for (lo, hi), v in zip(zip(edges[:-1], edges[1:]), speeds):
        n = rng.poisson(mean_rate * v * (hi - lo) / 1e6) if hi > lo else 0
        if n:
            chunks.append(np.sort(rng.integers(lo, hi, size=n)))
    if not chunks or mean_rate == 0:
        return EventStream.empty(width, height, duration=duration_us, dataset=dataset,
                                 sequence=sequence)
    t = np.concatenate(chunks).astype(np.int64)

    weight, polarity = scene.maps(height)
    ext_cols = np.concatenate([np.arange(scene.length), np.arange(width)])
    # column-major flattening: a camera window is a contiguous range of cells
    w_ext = weight[:, ext_cols].T.ravel()
    p_ext = polarity[:, ext_cols].T.ravel()
    cum = np.concatenate([[0.0], np.cumsum(w_ext)])

    shift = np.floor(traverse_offset(t, duration_us, speeds, px_per_s)).astype(np.int64) % scene.length
    lo = cum[shift * height]
    hi = cum[(shift + width) * height]
    u = lo + rng.random(t.shape[0]) * (hi - lo)
    cell = np.searchsorted(cum, u, side="right") - 1
    cell = np.clip(cell, shift * height, (shift + width) * height - 1)
    col, row = np.divmod(cell, height)
    x = col - shift
    return EventStream(t, x, row, p_ext[cell], width, height, duration=duration_us,
                       dataset=dataset, sequence=sequence)
