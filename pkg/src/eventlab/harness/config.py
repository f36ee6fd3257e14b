"""Experiment configuration: YAML parsing and batch expansion into RunSpecs."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .datasets import find_manifests
from .registry import registered_baselines

GENERATORS = ("frames", "reconstruction-import")
ACCUMULATORS = ("eventcount", "timewindow")

TOP_LEVEL_KEYS = {
    "frame_generator", "reconstruction_model", "timewindows", "num_events", "filter_time_sec",
    "ground_truth_tolerance", "batch_experiments", "polarity_mode", "seed", "ground_truth",
    "reconstruction_dir", "output_dir", "jobs", "wta",
}
ENTRY_KEYS = {
    "dataset", "reference", "queries", "query", "num_events", "timewindows", "frame_generator",
    "frame_accumulator", "baselines", "polarity_mode", "seed", "filter_time_sec",
    "ground_truth_tolerance", "ground_truth",
}
GT_KEYS = {"source", "tolerance_places", "tolerance_us", "tolerance_ms", "tolerance_m", "filters",
           "max_heading_diff_deg", "endpoint_fraction"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSpec:
    """One reference/query evaluation.

    ``parameter`` is events per frame for ``eventcount`` and microseconds
    for ``timewindow``. ``gt`` holds ground-truth overrides as sorted
    (key, value) pairs so a RunSpec stays hashable.
    """

    baseline: str
    dataset: str
    reference: str
    query: str
    generator: str = "frames"
    accumulator: str = "eventcount"
    parameter: int = 25000
    polarity_mode: str = "summed"
    gt: tuple = field(default=())
    seed: int = 0
    subsample_us: int | None = None

    def __post_init__(self):
        if isinstance(self.gt, dict):
            object.__setattr__(self, "gt", _freeze(self.gt))
        if self.generator not in GENERATORS:
            raise ConfigError(f"generator must be one of {GENERATORS}, got {self.generator!r}")
        if self.accumulator not in ACCUMULATORS:
            raise ConfigError(f"accumulator must be one of {ACCUMULATORS}, got {self.accumulator!r}")
        if isinstance(self.parameter, bool) or not isinstance(self.parameter, int) or self.parameter <= 0:
            raise ConfigError(f"parameter must be a positive integer, got {self.parameter!r}")
        if self.subsample_us is not None and self.subsample_us <= 0:
            raise ConfigError("subsample period must be positive")

    @property
    def gt_params(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.gt}

    @property
    def run_id(self):
        return "__".join([self.baseline, self.dataset, self.reference, self.query, self.generator,
                          self.accumulator, str(self.parameter), f"s{self.seed}"])

    def to_dict(self):
        d = asdict(self)
        d["gt"] = self.gt_params
        return d


def _freeze(gt):
    return tuple(sorted((k, tuple(v) if isinstance(v, list) else v) for k, v in gt.items()))


def _generator(name):
    if name in ("reconstruction", "reconstruction-import", "reconstruction_import"):
        return "reconstruction-import"
    if name in ("frames", None):
        return "frames"
    raise ConfigError(f"unknown frame_generator {name!r}")


def _positive_ints(values, key):
    if values is None:
        return None
    if not isinstance(values, (list, tuple)):
        values = [values]
    out = []
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or v <= 0 or int(v) != v:
            raise ConfigError(f"{key} entries must be positive integers, got {v!r}")
        out.append(int(v))
    return out


def _gt_overrides(section, where):
    gt = {}
    if section.get("ground_truth_tolerance") is not None:
        gt["tolerance_places"] = _positive_or_zero(section["ground_truth_tolerance"], "ground_truth_tolerance")
    extra = section.get("ground_truth") or {}
    bad = set(extra) - GT_KEYS
    if bad:
        raise ConfigError(f"{where}: unknown ground_truth keys {sorted(bad)}")
    gt.update(extra)
    if "tolerance_ms" in gt:
        gt["tolerance_us"] = int(round(float(gt.pop("tolerance_ms")) * 1000))
    return gt


def _positive_or_zero(v, key):
    if isinstance(v, bool) or not isinstance(v, int) or v < 0:
        raise ConfigError(f"{key} must be a non-negative integer, got {v!r}")
    return v


def _subsample(section):
    v = section.get("filter_time_sec")
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)) or v <= 0:
        raise ConfigError(f"filter_time_sec must be positive, got {v!r}")
    return int(round(float(v) * 1_000_000))


def load_config(path):
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def default_manifest_dirs(config_path=None):
    dirs = []
    if config_path is not None:
        dirs.append(Path(config_path).resolve().parent / "datasets")
    dirs.append(Path.cwd() / "datasets")
    return dirs


def parse_config(path, strict=True, manifest_dirs=None):
    """Return ``(defaults, runs)``.

    Each batch entry expands to queries x parameters x baselines, ordered by
    entry, then query (as listed), then parameter (ascending), then baseline
    (as listed).
    """
    data = load_config(path)
    dirs = list(manifest_dirs) if manifest_dirs is not None else default_manifest_dirs(path)
    return expand_config(data, strict=strict, manifests=find_manifests(dirs), source=str(path))


def expand_config(data, strict=True, manifests=None, source="<config>"):
    if strict:
        bad = set(data) - TOP_LEVEL_KEYS
        if bad:
            raise ConfigError(f"{source}: unknown keys {sorted(bad)}")
    manifests = manifests if manifests is not None else find_manifests()
    defaults = {k: v for k, v in data.items() if k != "batch_experiments"}
    top_gt = _gt_overrides(data, source)
    top_sub = _subsample(data)
    baselines_known = set(registered_baselines())
    runs = []
    for i, entry in enumerate(data.get("batch_experiments") or []):
        where = f"{source}: batch_experiments[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{where}: must be a mapping")
        if strict:
            bad = set(entry) - ENTRY_KEYS
            if bad:
                raise ConfigError(f"{where}: unknown keys {sorted(bad)}")
        for req in ("dataset", "reference", "baselines"):
            if req not in entry:
                raise ConfigError(f"{where}: missing `{req}`")
        dataset = entry["dataset"]
        if dataset not in manifests:
            raise ConfigError(f"{where}: unknown dataset {dataset!r}; known: {sorted(manifests)}")
        manifest = manifests[dataset]
        queries = entry.get("queries", entry.get("query"))
        queries = [queries] if isinstance(queries, str) else list(queries or [])
        for seq in [entry["reference"], *queries]:
            manifest.sequence(seq)
        baselines = entry["baselines"]
        baselines = [baselines] if isinstance(baselines, str) else list(baselines)
        unknown = [b for b in baselines if b not in baselines_known]
        if unknown:
            raise ConfigError(
                f"{where}: unknown baselines {unknown}; registered: {sorted(baselines_known)}")
        accumulator = entry.get("frame_accumulator")
        if accumulator is None:
            accumulator = "timewindow" if "timewindows" in entry and "num_events" not in entry else "eventcount"
        if accumulator not in ACCUMULATORS:
            raise ConfigError(f"{where}: frame_accumulator must be one of {ACCUMULATORS}")
        if accumulator == "eventcount":
            params = _positive_ints(entry.get("num_events", data.get("num_events")), "num_events")
        else:
            ms = _positive_ints(entry.get("timewindows", data.get("timewindows")), "timewindows")
            params = None if ms is None else [m * 1000 for m in ms]
        if not params:
            raise ConfigError(f"{where}: no {'num_events' if accumulator == 'eventcount' else 'timewindows'} given")
        generator = _generator(entry.get("frame_generator", data.get("frame_generator")))
        gt = dict(top_gt)
        gt.update(_gt_overrides(entry, where))
        sub = _subsample(entry) if "filter_time_sec" in entry else top_sub
        polarity = entry.get("polarity_mode", data.get("polarity_mode", "summed"))
        seed = int(entry.get("seed", data.get("seed", 0)))
        for q in queries:
            for p in sorted(params):
                for b in baselines:
                    runs.append(RunSpec(b, dataset, entry["reference"], q, generator, accumulator,
                                        p, polarity, gt, seed, sub))
    return defaults, runs
