"""Event-count frames: accumulation by time window or by event count.

Counts are per pixel and channel, saturating at 65535. In ``two_channel``
mode channel 0 holds positive and channel 1 negative events; in ``summed``
mode both polarities share one channel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_choice, check_int
from .events import EventStream

SATURATION = np.iinfo(np.uint16).max
POLARITY_MODES = ("two_channel", "summed")
MODES = ("fixed_window", "fixed_count")
# bincount scratch is int64 per cell; keep one chunk under ~128 MiB
_MAX_CHUNK_CELLS = 1 << 24


class FrameDirectoryError(ValueError):
    """Raised when a frame directory does not match its metadata."""


@dataclass(frozen=True)
class Frame:
    t_begin: int
    t_end: int
    counts: np.ndarray

    @property
    def total(self):
        return int(self.counts.sum(dtype=np.int64))


@dataclass(frozen=True, eq=False)
class FrameStack:
    """Ordered event frames plus the parameters that produced them.

    ``counts`` has shape ``(n_frames, channels, height, width)`` and dtype
    uint16; ``t_begin``/``t_end`` are microsecond bounds per frame.
    """

    counts: np.ndarray
    t_begin: np.ndarray
    t_end: np.ndarray
    mode: str
    parameter: int
    polarity_mode: str
    width: int
    height: int
    dataset: str = ""
    sequence: str = ""
    stream_t_start: int = 0
    stream_duration: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        check_choice(self.mode, "mode", MODES)
        check_choice(self.polarity_mode, "polarity_mode", POLARITY_MODES)
        counts = np.asarray(self.counts, dtype=np.uint16)
        channels = 2 if self.polarity_mode == "two_channel" else 1
        n = counts.shape[0]
        if counts.shape != (n, channels, self.height, self.width):
            raise ValueError(
                f"counts shape {counts.shape} != ({n}, {channels}, {self.height}, {self.width})")
        t_begin = np.asarray(self.t_begin, dtype=np.int64)
        t_end = np.asarray(self.t_end, dtype=np.int64)
        if t_begin.shape != (n,) or t_end.shape != (n,):
            raise ValueError("t_begin/t_end must have one entry per frame")
        if n and np.any(t_end <= t_begin):
            raise ValueError("every frame needs t_begin < t_end")
        if n > 1 and np.any(np.diff(t_begin) < 0):
            raise ValueError("frames must be ordered by t_begin")
        for arr in (counts, t_begin, t_end):
            arr.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "t_begin", t_begin)
        object.__setattr__(self, "t_end", t_end)

    def __len__(self):
        return int(self.counts.shape[0])

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.select(np.arange(len(self))[i])
        return Frame(int(self.t_begin[i]), int(self.t_end[i]), self.counts[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other):
        if not isinstance(other, FrameStack):
            return NotImplemented
        return (
            (self.mode, self.parameter, self.polarity_mode, self.width, self.height)
            == (other.mode, other.parameter, other.polarity_mode, other.width, other.height)
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.t_begin, other.t_begin)
            and np.array_equal(self.t_end, other.t_end)
        )

    @property
    def t_center(self):
        return (self.t_begin + self.t_end) // 2

    def summed(self):
        """Counts with polarity channels summed (saturating), shape (n, H, W)."""
        if self.polarity_mode == "summed":
            return self.counts[:, 0]
        total = self.counts[:, 0].astype(np.uint32) + self.counts[:, 1]
        return np.minimum(total, SATURATION).astype(np.uint16)

    def select(self, index):
        index = np.asarray(index, dtype=np.int64)
        return replace(self, counts=self.counts[index], t_begin=self.t_begin[index],
                       t_end=self.t_end[index])

    def metadata(self):
        return {
            "dataset": self.dataset,
            "sequence": self.sequence,
            "mode": self.mode,
            "parameter": int(self.parameter),
            "polarity_mode": self.polarity_mode,
            "width": int(self.width),
            "height": int(self.height),
            "stream_t_start_us": int(self.stream_t_start),
            "stream_duration_us": int(self.stream_duration),
            "timestamp_convention": "integer microseconds since stream start",
            **{k: v for k, v in sorted(self.extra.items())},
            "frames": [[int(b), int(e)] for b, e in zip(self.t_begin, self.t_end)],
        }


def _accumulate(stream, frame_index, n_frames, polarity_mode):
    """Scatter events into (n_frames, C, H, W) saturating uint16 counts."""
    channels = 2 if polarity_mode == "two_channel" else 1
    plane = stream.height * stream.width
    per_frame = channels * plane
    out = np.zeros((n_frames, channels, stream.height, stream.width), dtype=np.uint16)
    if n_frames == 0:
        return out
    keep = (frame_index >= 0) & (frame_index < n_frames)
    fi = frame_index[keep]
    cell = stream.y[keep] * stream.width + stream.x[keep]
    if channels == 2:
        cell = cell + np.where(stream.p[keep] > 0, 0, plane)
    flat = out.reshape(n_frames, per_frame)
    chunk = max(1, _MAX_CHUNK_CELLS // per_frame)
    # frame_index is non-decreasing, so each chunk is a contiguous event range
    bounds = np.searchsorted(fi, np.arange(0, n_frames + chunk, chunk), side="left")
    for c, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
        f0 = c * chunk
        f1 = min(n_frames, f0 + chunk)
        if f0 >= n_frames:
            break
        if hi == lo:
            continue
        local = (fi[lo:hi] - f0) * per_frame + cell[lo:hi]
        binned = np.bincount(local, minlength=(f1 - f0) * per_frame)
        flat[f0:f1] = np.minimum(binned, SATURATION).reshape(f1 - f0, per_frame)
    return out


def generate_fixed_window(stream: EventStream, window_us: int, polarity_mode="summed") -> FrameStack:
    """Tile ``[0, duration)`` with half-open windows ``[k*W, (k+1)*W)``.

    A boundary event belongs to the later frame; the trailing partial window
    is dropped.
    """
    window_us = check_int(window_us, "window_us", 1)
    check_choice(polarity_mode, "polarity_mode", POLARITY_MODES)
    n_frames = stream.duration // window_us
    index = stream.t // window_us
    counts = _accumulate(stream, index, n_frames, polarity_mode)
    t_begin = np.arange(n_frames, dtype=np.int64) * window_us
    return FrameStack(counts, t_begin, t_begin + window_us, "fixed_window", window_us,
                      polarity_mode, stream.width, stream.height, stream.dataset,
                      stream.sequence, stream.t_start, stream.duration)


def generate_fixed_count(stream: EventStream, n_events: int, polarity_mode="summed") -> FrameStack:
    """Consecutive runs of exactly ``n_events`` events; the remainder is dropped."""
    n_events = check_int(n_events, "n_events", 1)
    check_choice(polarity_mode, "polarity_mode", POLARITY_MODES)
    n_frames = len(stream) // n_events
    index = np.arange(len(stream), dtype=np.int64) // n_events
    counts = _accumulate(stream, index, n_frames, polarity_mode)
    firsts = np.arange(n_frames, dtype=np.int64) * n_events
    t_begin = stream.t[firsts]
    t_end = stream.t[firsts + n_events - 1] + 1
    return FrameStack(counts, t_begin, t_end, "fixed_count", n_events, polarity_mode,
                      stream.width, stream.height, stream.dataset, stream.sequence,
                      stream.t_start, stream.duration)


def generate_matched(reference: EventStream, query: EventStream, n_events: int,
                     polarity_mode="summed"):
    """Fixed-count stacks for both traverses with equal events per frame."""
    ref = generate_fixed_count(reference, n_events, polarity_mode)
    qry = generate_fixed_count(query, n_events, polarity_mode)
    for name, stack, stream in (("reference", ref, reference), ("query", qry, query)):
        if len(stack) == 0:
            raise ValueError(
                f"{name} stream {stream.sequence!r} has {len(stream)} events, "
                f"fewer than one frame of {n_events}")
    return ref, qry


def aggregate_mean(stack: FrameStack, factor: int) -> FrameStack:
    """Replace each run of ``factor`` frames by their per-pixel mean (round half up)."""
    factor = check_int(factor, "factor", 1)
    if factor == 1:
        return stack
    n_out = len(stack) // factor
    used = n_out * factor
    grouped = stack.counts[:used].astype(np.int64).reshape(
        (n_out, factor) + stack.counts.shape[1:])
    total = grouped.sum(axis=1)
    mean = (2 * total + factor) // (2 * factor)
    t_begin = stack.t_begin[:used:factor] if n_out else stack.t_begin[:0]
    t_end = stack.t_end[factor - 1:used:factor] if n_out else stack.t_end[:0]
    extra = dict(stack.extra)
    extra["aggregate_factor"] = extra.get("aggregate_factor", 1) * factor
    parameter = stack.parameter * factor
    return replace(stack, counts=mean.astype(np.uint16), t_begin=t_begin, t_end=t_end,
                   parameter=parameter, extra=extra)


def subsample_by_time(stack: FrameStack, period_us: int) -> FrameStack:
    """Keep the first frame starting inside each bucket ``[k*P, (k+1)*P)``."""
    period_us = check_int(period_us, "period_us", 1)
    bucket = stack.t_begin // period_us
    keep = np.ones(len(stack), dtype=bool)
    keep[1:] = bucket[1:] != bucket[:-1]
    if keep.all():
        return stack
    extra = dict(stack.extra)
    extra["subsample_period_us"] = period_us
    out = stack.select(np.flatnonzero(keep))
    return replace(out, extra=extra)


# --------------------------------------------------------------------------- frame directories

def rescale_to_uint8(counts):
    """Per-frame max normalisation to 0..255 with round half up; zeros stay zero."""
    c = np.asarray(counts, dtype=np.int64)
    peak = int(c.max()) if c.size else 0
    if peak == 0:
        return np.zeros(c.shape, dtype=np.uint8)
    return ((2 * 255 * c + peak) // (2 * peak)).astype(np.uint8)


def export_frames(stack: FrameStack, directory) -> Path:
    """Write ``frames/NNNNNN.pgm`` (summed polarity, 8-bit) plus ``metadata.json``."""
    directory = Path(directory)
    frame_dir = directory / "frames"
    frame_dir.mkdir(parents=True, exist_ok=True)
    summed = stack.summed()
    for i in range(len(stack)):
        Image.fromarray(rescale_to_uint8(summed[i]), mode="L").save(frame_dir / f"{i:06d}.pgm")
    meta = stack.metadata()
    meta["polarity_mode"] = stack.polarity_mode
    meta["image_format"] = "pgm8"
    meta["rescale"] = "per-frame max -> 255, round half up; all-zero frames stay zero"
    (directory / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def import_frames(directory) -> FrameStack:
    """Read a frame directory, including one whose images an external tool rewrote.

    Image values become single-channel counts.
    """
    directory = Path(directory)
    meta_path = directory / "metadata.json"
    if not meta_path.is_file():
        raise FrameDirectoryError(f"{directory}: missing metadata.json")
    try:
        meta = json.loads(meta_path.read_text())
        width, height = int(meta["width"]), int(meta["height"])
        spans = np.asarray(meta["frames"], dtype=np.int64).reshape(-1, 2)
        mode, parameter = meta["mode"], int(meta["parameter"])
    except (KeyError, ValueError, TypeError) as exc:
        raise FrameDirectoryError(f"{meta_path}: inconsistent metadata ({exc})") from None
    images = sorted((directory / "frames").glob("*.pgm"))
    if len(images) != len(spans):
        raise FrameDirectoryError(
            f"{directory}: metadata lists {len(spans)} frames but {len(images)} images exist")
    counts = np.zeros((len(images), 1, height, width), dtype=np.uint16)
    for i, path in enumerate(images):
        if path.stem != f"{i:06d}":
            raise FrameDirectoryError(f"{path}: expected frame name {i:06d}.pgm")
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L") if img.mode not in ("L", "I;16", "I") else img)
        if arr.shape != (height, width):
            raise FrameDirectoryError(
                f"{path}: image size {arr.shape[::-1]} != metadata resolution {(width, height)}")
        counts[i, 0] = np.clip(arr, 0, SATURATION)
    known = {"dataset", "sequence", "mode", "parameter", "polarity_mode", "width", "height",
             "stream_t_start_us", "stream_duration_us", "frames", "timestamp_convention",
             "image_format", "rescale"}
    extra = {k: v for k, v in meta.items() if k not in known}
    extra["imported_from"] = "frame_directory"
    return FrameStack(counts, spans[:, 0], spans[:, 1], mode, parameter, "summed", width,
                      height, meta.get("dataset", ""), meta.get("sequence", ""),
                      int(meta.get("stream_t_start_us", 0)), int(meta.get("stream_duration_us", 0)),
                      extra)


# --------------------------------------------------------------------------- estimator

class FrameAccumulator(TransformerMixin, BaseEstimator):
    """Turn an :class:`EventStream` into a :class:`FrameStack`.

    Parameters
    ----------
    accumulator : {"eventcount", "timewindow"}
    parameter : int
        Events per frame, or window length in microseconds.
    polarity_mode : {"summed", "two_channel"}
    subsample_us : int or None
        Keep at most one frame per period after accumulation.
    """

    def __init__(self, accumulator="eventcount", parameter=25000, polarity_mode="summed",
                 subsample_us=None):
        self.accumulator = accumulator
        self.parameter = parameter
        self.polarity_mode = polarity_mode
        self.subsample_us = subsample_us

    def fit(self, X=None, y=None):
        check_choice(self.accumulator, "accumulator", ("eventcount", "timewindow"))
        check_int(self.parameter, "parameter", 1)
        check_choice(self.polarity_mode, "polarity_mode", POLARITY_MODES)
        return self

    def transform(self, X):
        self.fit()
        if self.accumulator == "eventcount":
            stack = generate_fixed_count(X, self.parameter, self.polarity_mode)
        else:
            stack = generate_fixed_window(X, self.parameter, self.polarity_mode)
        if self.subsample_us:
            stack = subsample_by_time(stack, self.subsample_us)
        return stack
