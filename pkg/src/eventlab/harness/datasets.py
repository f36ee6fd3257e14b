"""Dataset manifests, source fetching and the canonical evb cache.

A manifest is a YAML file named ``<dataset>.yaml``::

    name: qcr_event
    gt_source: odometry        # time | gps | odometry
    tolerance: {places: 3}     # or {time_ms: 300} / {meters: 5.0}
    filters: [reverse_direction]
    sequences:
      normal1:
        path: normal1.txt      # relative to the manifest, or `url:`
        format: text           # text | evb | hdf5
        sha256: 3f2a...
        resolution: [346, 260]
        positions: normal1_positions.csv
        clock_offset_us: 0

A sequence may instead carry a ``synth:`` block with the arguments of
:func:`eventlab.events.synth_traverse`; it is generated on first use.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from filelock import FileLock

from ..events import SceneTexture, load_events, save_events, synth_traverse, traverse_offset
from ..ground_truth import PositionTrack, load_position_track, save_position_track

GT_SOURCES = ("time", "gps", "odometry")
_SEQUENCE_KEYS = {"path", "url", "format", "sha256", "resolution", "positions",
                  "positions_sha256", "clock_offset_us", "group", "synth", "rebase"}
_MANIFEST_KEYS = {"name", "gt_source", "tolerance", "filters", "sequences", "description"}


class ManifestError(ValueError):
    pass


class ChecksumMismatchError(ValueError):
    pass


class FetchError(OSError):
    pass


@dataclass(frozen=True)
class SequenceEntry:
    name: str
    path: str | None = None
    url: str | None = None
    format: str | None = None
    sha256: str | None = None
    resolution: tuple | None = None
    positions: str | None = None
    positions_sha256: str | None = None
    clock_offset_us: int = 0
    group: str | None = None
    synth: dict | None = None
    rebase: bool = False


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    sequences: dict
    gt_source: str = "time"
    tolerance: dict = field(default_factory=lambda: {"time_ms": 300})
    filters: tuple = ()
    base_dir: Path | None = None

    def __post_init__(self):
        if self.gt_source not in GT_SOURCES:
            raise ManifestError(f"{self.name}: gt_source must be one of {GT_SOURCES}")
        if len(self.tolerance) != 1 or next(iter(self.tolerance)) not in ("places", "time_ms", "time_us", "meters"):
            raise ManifestError(f"{self.name}: tolerance must be one of places/time_ms/time_us/meters")

    def sequence(self, name) -> SequenceEntry:
        try:
            return self.sequences[name]
        except KeyError:
            raise ManifestError(
                f"dataset {self.name!r} has no sequence {name!r}; "
                f"available: {', '.join(sorted(self.sequences))}") from None

    def resolve_path(self, rel):
        p = Path(rel)
        if not p.is_absolute() and self.base_dir is not None:
            p = self.base_dir / p
        return p


def manifest_from_dict(data, base_dir=None) -> DatasetManifest:
    unknown = set(data) - _MANIFEST_KEYS
    if unknown:
        raise ManifestError(f"unknown manifest keys {sorted(unknown)}")
    if "name" not in data or "sequences" not in data:
        raise ManifestError("manifest needs `name` and `sequences`")
    seqs = {}
    for name, entry in (data["sequences"] or {}).items():
        entry = dict(entry or {})
        bad = set(entry) - _SEQUENCE_KEYS
        if bad:
            raise ManifestError(f"{data['name']}/{name}: unknown keys {sorted(bad)}")
        if not entry.get("synth") and not (entry.get("path") or entry.get("url")):
            raise ManifestError(f"{data['name']}/{name}: needs `path`, `url` or `synth`")
        if not entry.get("synth") and not entry.get("sha256"):
            raise ManifestError(f"{data['name']}/{name}: file sources need a sha256 checksum")
        if entry.get("resolution") is not None:
            entry["resolution"] = tuple(int(v) for v in entry["resolution"])
        seqs[str(name)] = SequenceEntry(name=str(name), **entry)
    return DatasetManifest(
        name=str(data["name"]),
        sequences=seqs,
        gt_source=data.get("gt_source", "time"),
        tolerance=dict(data.get("tolerance") or {"time_ms": 300}),
        filters=tuple(data.get("filters") or ()),
        base_dir=Path(base_dir) if base_dir else None,
    )


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return manifest_from_dict(data, base_dir=path.parent)


# --------------------------------------------------------------------------- bundled fixture

SYNTH_WIDTH, SYNTH_HEIGHT = 128, 96
SYNTH_DURATION_US = 8_000_000
SYNTH_RATE = 100_000.0
SYNTH_PX_PER_S = 100.0
SYNTH_M_PER_PX = 0.01


def synth_sequence(seed, speed_profile=(1.0,), scene_seed=0, duration_us=SYNTH_DURATION_US,
                   mean_rate=SYNTH_RATE, width=SYNTH_WIDTH, height=SYNTH_HEIGHT,
                   scene_length=2048, feature_scale=3.0, px_per_s=SYNTH_PX_PER_S,
                   m_per_px=SYNTH_M_PER_PX, sequence=""):
    """Generate one synthetic traverse and its planar position track."""
    scene = SceneTexture(length=scene_length, seed=scene_seed, feature_scale=feature_scale)
    stream = synth_traverse(seed, duration_us, mean_rate, width, height, scene,
                            speed_profile, px_per_s, dataset="synthetic", sequence=sequence)
    t = np.arange(0, duration_us + 1, 1000, dtype=np.int64)
    x = traverse_offset(t, duration_us, speed_profile, px_per_s) * m_per_px
    track = PositionTrack(t, np.column_stack([x, np.zeros_like(x)]), "planar")
    return stream, track


SPEED_VARIED = {"mean_rate": 10_000.0, "px_per_s": 40.0, "speed_profile": [1.0, 1.5, 0.6, 0.9]}
FIXTURE_VERSION = 1


def synth_fixture_manifest(seed=0, name="synth_fixture"):
    """Manifest dict for the bundled synthetic dataset.

    All sequences share one scene. ``seqA``/``seqB``/``fast``/``slow``/``varied``
    are dense traverses (1e5 events/s); ``sv_ref``/``sv_query`` form the sparse
    speed-varied pair (1e4 events/s, mean query speed equal to the reference)
    where short windows are noise limited.
    """
    base = 100 * int(seed)

    def seq(k, **kw):
        return {"synth": {"seed": base + k, "scene_seed": int(seed), **kw}}

    return {
        "name": name,
        "description": "Desk-scale synthetic traverses over one shared scene.",
        "gt_source": "odometry",
        "tolerance": {"places": 3},
        "filters": [],
        "sequences": {
            "seqA": seq(11, speed_profile=[1.0]),
            "seqB": seq(12, speed_profile=[1.0]),
            "fast": seq(13, speed_profile=[2.0]),
            "slow": seq(14, speed_profile=[0.5]),
            "varied": seq(15, speed_profile=[1.0, 1.5, 0.6, 0.9]),
            "sv_ref": seq(21, mean_rate=SPEED_VARIED["mean_rate"], px_per_s=SPEED_VARIED["px_per_s"],
                          speed_profile=[1.0]),
            "sv_query": seq(22, **SPEED_VARIED),
        },
    }


SYNTH_FIXTURE = synth_fixture_manifest(0)

_BUILTIN = {"synth_fixture": SYNTH_FIXTURE}


def builtin_manifests():
    return {name: manifest_from_dict(data) for name, data in _BUILTIN.items()}


def find_manifests(search_dirs=()):
    """Builtin manifests overlaid with ``<dir>/*.yaml`` from each search dir."""
    found = builtin_manifests()
    for d in search_dirs:
        d = Path(d)
        if not d.is_dir():
            continue
        for path in sorted(d.glob("*.yaml")) + sorted(d.glob("*.yml")):
            m = load_manifest(path)
            found[m.name] = m
    return found


# --------------------------------------------------------------------------- cache

def cache_root(cache_dir=None) -> Path:
    root = cache_dir or os.environ.get("EVENTLAB_CACHE") or Path.home() / ".cache" / "eventlab"
    return Path(root)


def _offline():
    return os.environ.get("EVENTLAB_OFFLINE", "").lower() not in ("", "0", "false", "no")


def sha256_file(path, chunk=1 << 20):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(chunk), b""):
            h.update(block)
    return h.hexdigest()


def _synth_key(entry: SequenceEntry):
    blob = json.dumps({"synth": entry.synth, "version": FIXTURE_VERSION}, sort_keys=True).encode()
    return "synth:" + hashlib.sha256(blob).hexdigest()


def _fetch(manifest, entry, dest_dir):
    if entry.path:
        src = manifest.resolve_path(entry.path)
        if not src.is_file():
            raise FetchError(f"{manifest.name}/{entry.name}: source file {src} not found")
        return src
    if _offline():
        raise FetchError(f"{manifest.name}/{entry.name}: EVENTLAB_OFFLINE set; cannot fetch {entry.url}")
    dest_dir.mkdir(parents=True, exist_ok=True)
    dest = dest_dir / Path(urllib.request.urlparse(entry.url).path).name
    try:
        with urllib.request.urlopen(entry.url) as resp, open(dest, "wb") as out:
            shutil.copyfileobj(resp, out)
    except OSError as exc:
        raise FetchError(f"{manifest.name}/{entry.name}: fetch of {entry.url} failed: {exc}") from exc
    return dest


def _paths(root, manifest, entry):
    base = root / manifest.name
    return base / f"{entry.name}.evb", base / f"{entry.name}.evb.json", base / f"{entry.name}.positions.csv"


def resolve_dataset(manifest: DatasetManifest, sequence: str, cache_dir=None):
    """Load ``sequence`` as an EventStream, populating the evb cache on first use.

    File sources are checksum-verified before anything is written to the
    cache. Later calls read only the cache.
    """
    entry = manifest.sequence(sequence)
    root = cache_root(cache_dir)
    evb, meta_path, pos_path = _paths(root, manifest, entry)
    key = _synth_key(entry) if entry.synth else entry.sha256
    evb.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(evb) + ".lock"):
        if evb.is_file() and meta_path.is_file():
            meta = json.loads(meta_path.read_text())
            if meta.get("source_key") == key:
                stream = load_events(evb, "evb", dataset=manifest.name, sequence_name=entry.name)
                return _restore_extent(stream, meta)
        if entry.synth:
            stream, track = synth_sequence(sequence=entry.name, **entry.synth)
            save_position_track(track, pos_path)
        else:
            src = _fetch(manifest, entry, root / manifest.name / "downloads")
            digest = sha256_file(src)
            if digest != entry.sha256:
                raise ChecksumMismatchError(
                    f"{manifest.name}/{entry.name}: checksum mismatch for {src} "
                    f"(expected {entry.sha256}, got {digest})")
            try:
                stream = load_events(src, entry.format, resolution=entry.resolution,
                                     sequence=entry.group or (entry.name if entry.format == "hdf5" else None),
                                     rebase=entry.rebase, dataset=manifest.name,
                                     sequence_name=entry.name)
            except ValueError as exc:
                raise ValueError(f"{manifest.name}/{entry.name}: conversion failed: {exc}") from exc
        fd, tmp = tempfile.mkstemp(dir=evb.parent, suffix=".evb.tmp")
        os.close(fd)
        save_events(stream, tmp, "evb")
        os.replace(tmp, evb)
        meta = {"source_key": key, "dataset": manifest.name, "sequence": entry.name,
                "duration_us": stream.duration, "t_start_us": stream.t_start,
                "timestamp_convention": "integer microseconds since stream start"}
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return stream


def _restore_extent(stream, meta):
    from ..events import EventStream

    return EventStream(stream.t, stream.x, stream.y, stream.p, stream.width, stream.height,
                       duration=max(int(meta.get("duration_us", stream.duration)), stream.duration),
                       t_start=int(meta.get("t_start_us", 0)), dataset=stream.dataset,
                       sequence=stream.sequence)


def resolve_track(manifest: DatasetManifest, sequence: str, cache_dir=None):
    """Position track for ``sequence`` or None when the manifest has none."""
    entry = manifest.sequence(sequence)
    if entry.synth:
        _, _, pos_path = _paths(cache_root(cache_dir), manifest, entry)
        if not pos_path.is_file():
            resolve_dataset(manifest, sequence, cache_dir)
        return load_position_track(pos_path)
    if not entry.positions:
        return None
    path = manifest.resolve_path(entry.positions)
    if entry.positions_sha256 and sha256_file(path) != entry.positions_sha256:
        raise ChecksumMismatchError(f"{manifest.name}/{entry.name}: position track checksum mismatch")
    return load_position_track(path)
