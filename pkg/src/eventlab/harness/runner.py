"""Run orchestration: one RunSpec end to end, batches, and the combined CSV."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock
from sklearn.pipeline import Pipeline

from ..frames import (aggregate_mean, generate_fixed_count, generate_fixed_window,
                      generate_matched, import_frames, subsample_by_time)
from ..ground_truth import (PlaceIndex, build_gt_position, build_gt_time, gt_tolerance_in_places,
                            haversine_m, save_gt)
from ..vpr import PlaceMatcher, evaluate, recall_at_k
from ..wta import SWEEP_COLUMNS, integer_ratio, wta_sweep
from .config import RunSpec, parse_config
from .datasets import find_manifests, resolve_dataset, resolve_track
from .registry import baseline_metric, get_baseline

log = logging.getLogger(__name__)

CSV_COLUMNS = ("baseline", "dataset", "reference", "query", "generator", "accumulator",
               "parameter", "recall_at_1", "recall_at_5", "recall_at_10", "pr_auc", "gtp",
               "queries_total", "runtime_ms", "seed")
SUMMARY_COLUMNS = ("baseline", "dataset", "runs", "mean_recall_at_1", "mean_recall_at_5",
                   "mean_recall_at_10", "mean_pr_auc")


class StageError(RuntimeError):
    """A run failed; ``stage`` names the pipeline step."""

    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage


@dataclass
class RunContext:
    out_dir: Path
    manifests: dict = field(default_factory=find_manifests)
    cache_dir: Path | None = None
    reconstruction_dir: Path | None = None
    write_gt: bool = True

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)

    @property
    def results_csv(self):
        return self.out_dir / "results.csv"

    def manifest(self, name):
        try:
            return self.manifests[name]
        except KeyError:
            raise KeyError(f"unknown dataset {name!r}; known: {sorted(self.manifests)}") from None


@dataclass
class RunResult:
    spec: RunSpec
    report: dict | None
    row: dict
    error: str | None = None


# --------------------------------------------------------------------------- stages

def _frames(spec, ctx, manifest, ref_stream, qry_stream):
    if spec.generator == "reconstruction-import":
        if ctx.reconstruction_dir is None:
            raise ValueError("reconstruction-import needs a reconstruction directory")
        stacks = []
        for seq in (spec.reference, spec.query):
            d = Path(ctx.reconstruction_dir) / spec.dataset / seq / f"{spec.accumulator}_{spec.parameter}"
            stacks.append(import_frames(d))
        ref, qry = stacks
    elif spec.accumulator == "eventcount":
        ref, qry = generate_matched(ref_stream, qry_stream, spec.parameter, spec.polarity_mode)
    else:
        ref = generate_fixed_window(ref_stream, spec.parameter, spec.polarity_mode)
        qry = generate_fixed_window(qry_stream, spec.parameter, spec.polarity_mode)
    if spec.subsample_us:
        ref, qry = subsample_by_time(ref, spec.subsample_us), subsample_by_time(qry, spec.subsample_us)
    for name, stack in (("reference", ref), ("query", qry)):
        if len(stack) == 0:
            raise ValueError(f"{name} produced no frames")
    return ref, qry


def _places(stack, manifest, seq, ctx):
    entry = manifest.sequence(seq)
    t = stack.t_center
    track = resolve_track(manifest, seq, ctx.cache_dir) if manifest.gt_source != "time" else None
    if manifest.gt_source != "time" and track is None:
        raise ValueError(f"{manifest.name}/{seq}: gt_source {manifest.gt_source} needs a position track")
    if track is None:
        return PlaceIndex(t + entry.clock_offset_us)
    return PlaceIndex(t + entry.clock_offset_us, track.at(t, entry.clock_offset_us), track.coords)


def _spacing_us(ref_places, spec):
    if spec.subsample_us:
        return spec.subsample_us
    if len(ref_places) < 2:
        return 0
    return int(np.median(np.diff(ref_places.t_center)))


def _spacing_m(ref_places):
    if len(ref_places) < 2:
        return 0.0
    p = ref_places.positions
    if ref_places.coords == "latlon":
        step = haversine_m(p[:-1, 0], p[:-1, 1], p[1:, 0], p[1:, 1])
    else:
        step = np.hypot(*np.diff(p, axis=0).T)
    return float(np.median(step))


def build_ground_truth(spec, manifest, ref_places, qry_places):
    gt = spec.gt_params
    source = gt.get("source", manifest.gt_source)
    tol = manifest.tolerance
    if source == "time":
        if "tolerance_us" in gt:
            tol_us = int(gt["tolerance_us"])
        elif "tolerance_places" in gt or "places" in tol:
            places = gt.get("tolerance_places", tol.get("places"))
            tol_us = gt_tolerance_in_places(int(places), _spacing_us(ref_places, spec))
        elif "time_us" in tol:
            tol_us = int(tol["time_us"])
        elif "time_ms" in tol:
            tol_us = int(round(float(tol["time_ms"]) * 1000))
        else:
            raise ValueError(f"{manifest.name}: time ground truth needs a time or place tolerance")
        return build_gt_time(ref_places, qry_places, tol_us)
    if "tolerance_m" in gt:
        tol_m = float(gt["tolerance_m"])
    elif "tolerance_places" in gt or "places" in tol:
        tol_m = int(gt.get("tolerance_places", tol.get("places"))) * _spacing_m(ref_places)
    elif "meters" in tol:
        tol_m = float(tol["meters"])
    else:
        raise ValueError(f"{manifest.name}: position ground truth needs a metre or place tolerance")
    filters = gt.get("filters", list(manifest.filters))
    kwargs = {k: gt[k] for k in ("max_heading_diff_deg", "endpoint_fraction") if k in gt}
    return build_gt_position(ref_places, qry_places, tol_m, filters, **kwargs)


def make_pipeline(baseline, seed=0):
    est = get_baseline(baseline)
    if "random_state" in est.get_params():
        est.set_params(random_state=seed)
    return Pipeline([("describe", est), ("match", PlaceMatcher(metric=baseline_metric(est)))])


def _stage(name, fn, *args):
    try:
        return fn(*args)
    except Exception as exc:  # tag and re-raise, the batch runner records it
        raise StageError(name, exc) from exc


def execute(spec: RunSpec, ctx: RunContext):
    """Run every stage; returns (report dict, distance matrix, ground truth)."""
    manifest = _stage("resolve", ctx.manifest, spec.dataset)
    if spec.generator == "frames":
        ref_stream = _stage("resolve", resolve_dataset, manifest, spec.reference, ctx.cache_dir)
        qry_stream = _stage("resolve", resolve_dataset, manifest, spec.query, ctx.cache_dir)
    else:
        ref_stream = qry_stream = None
    ref, qry = _stage("frames", _frames, spec, ctx, manifest, ref_stream, qry_stream)
    ref_places = _stage("ground_truth", _places, ref, manifest, spec.reference, ctx)
    qry_places = _stage("ground_truth", _places, qry, manifest, spec.query, ctx)
    gt = _stage("ground_truth", build_ground_truth, spec, manifest, ref_places, qry_places)

    def describe():
        pipe = make_pipeline(spec.baseline, spec.seed).fit(ref)
        q_desc = pipe[:-1].transform(qry)
        return pipe[-1].distances(q_desc), q_desc.shape[1]

    d, n_features = _stage("baseline", describe)
    metrics = _stage("metrics", evaluate, d, gt)
    report = {
        "run": spec.to_dict(),
        "metrics": metrics.to_dict(),
        "frames": {
            "reference": len(ref), "query": len(qry),
            "reference_span_us": [int(ref.t_begin[0]), int(ref.t_end[-1])],
            "query_span_us": [int(qry.t_begin[0]), int(qry.t_end[-1])],
            "polarity_mode": ref.polarity_mode,
        },
        "descriptor": {"length": int(n_features), "metric": d.metric},
        "ground_truth": {"tolerance": {"kind": gt.tolerance_kind, "value": gt.tolerance},
                         "filters": list(gt.filters), "gtp": gt.gtp,
                         "queries_without_positive": int(len(gt.empty_rows))},
    }
    return report, d, gt


def _row(spec, metrics=None, runtime_ms=0):
    row = {c: "" for c in CSV_COLUMNS}
    row.update(baseline=spec.baseline, dataset=spec.dataset, reference=spec.reference,
               query=spec.query, generator=spec.generator, accumulator=spec.accumulator,
               parameter=spec.parameter, runtime_ms=runtime_ms, seed=spec.seed)
    if metrics is not None:
        r = metrics["recall_at"]
        row.update(recall_at_1=r.get("1", ""), recall_at_5=r.get("5", ""),
                   recall_at_10=r.get("10", ""), pr_auc=metrics["pr_auc"], gtp=metrics["gtp"],
                   queries_total=metrics["queries_total"])
    return row


def dumps_report(report):
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def append_rows(path, rows):
    """Append rows to the combined CSV under a file lock, writing the header once."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(path) + ".lock"):
        new = not path.exists() or path.stat().st_size == 0
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        if new:
            w.writeheader()
        for row in rows:
            w.writerow(row)
        with open(path, "a", newline="") as fh:
            fh.write(buf.getvalue())


def _compute(spec, ctx):
    start = time.perf_counter()
    try:
        report, _, gt = execute(spec, ctx)
    except StageError as exc:
        log.error("run %s failed: %s", spec.run_id, exc)
        return RunResult(spec, None, _row(spec, None, int((time.perf_counter() - start) * 1000)), str(exc)), None
    runtime = int((time.perf_counter() - start) * 1000)
    return RunResult(spec, report, _row(spec, report["metrics"], runtime)), gt


def _persist(result, gt, ctx):
    reports = ctx.out_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    rid = result.spec.run_id
    if result.report is not None:
        (reports / f"{rid}.json").write_text(dumps_report(result.report))
        if ctx.write_gt and gt is not None:
            gt_dir = ctx.out_dir / "gt"
            gt_dir.mkdir(exist_ok=True)
            save_gt(gt, gt_dir / f"{rid}.gt")
    else:
        with FileLock(str(ctx.out_dir / "failures.jsonl") + ".lock"):
            with open(ctx.out_dir / "failures.jsonl", "a") as fh:
                fh.write(json.dumps({"run": result.spec.to_dict(), "error": result.error},
                                    sort_keys=True) + "\n")


def run_single(spec: RunSpec, ctx: RunContext) -> RunResult:
    """Evaluate one spec, write its JSON report and append its CSV row."""
    ctx.out_dir.mkdir(parents=True, exist_ok=True)
    result, gt = _compute(spec, ctx)
    _persist(result, gt, ctx)
    append_rows(ctx.results_csv, [result.row])
    return result


def summarize(results):
    """Mean Recall@K and PR-AUC per (baseline, dataset) over successful runs."""
    groups = {}
    for r in results:
        if r.report is None:
            continue
        groups.setdefault((r.spec.baseline, r.spec.dataset), []).append(r.row)
    out = []
    for (b, ds), rows in groups.items():
        mean = lambda key: float(np.mean([float(x[key]) for x in rows]))  # noqa: E731
        out.append({"baseline": b, "dataset": ds, "runs": len(rows),
                    "mean_recall_at_1": mean("recall_at_1"), "mean_recall_at_5": mean("recall_at_5"),
                    "mean_recall_at_10": mean("recall_at_10"), "mean_pr_auc": mean("pr_auc")})
    return out


def run_batch(specs, ctx: RunContext, jobs=1):
    """Run specs (optionally concurrently); rows are appended in spec order.

    Returns (results, summary rows). A failed run yields a row with empty
    metric cells and an entry in ``failures.jsonl``.
    """
    ctx.out_dir.mkdir(parents=True, exist_ok=True)
    if not ctx.results_csv.exists():
        append_rows(ctx.results_csv, [])
    results = []
    with ThreadPoolExecutor(max_workers=max(1, int(jobs))) as pool:
        futures = [pool.submit(_compute, s, ctx) for s in specs]
        for fut in futures:
            result, gt = fut.result()
            _persist(result, gt, ctx)
            append_rows(ctx.results_csv, [result.row])
            results.append(result)
    summary = summarize(results)
    with open(ctx.out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(summary)
    return results, summary


def run_batch_config(config_path, out_dir=None, jobs=None, cache_dir=None, manifest_dirs=None,
                     strict=True):
    defaults, specs = parse_config(config_path, strict=strict, manifest_dirs=manifest_dirs)
    from .config import default_manifest_dirs

    dirs = manifest_dirs if manifest_dirs is not None else default_manifest_dirs(config_path)
    ctx = RunContext(out_dir or defaults.get("output_dir") or "eventlab_out",
                     find_manifests(dirs), cache_dir,
                     defaults.get("reconstruction_dir"))
    return run_batch(specs, ctx, jobs or defaults.get("jobs", 1))


# --------------------------------------------------------------------------- wta

def _stacks_for(stream_ref, stream_qry, accumulator, parameter, polarity_mode):
    if accumulator == "eventcount":
        return (generate_fixed_count(stream_ref, parameter, polarity_mode),
                generate_fixed_count(stream_qry, parameter, polarity_mode))
    return (generate_fixed_window(stream_ref, parameter, polarity_mode),
            generate_fixed_window(stream_qry, parameter, polarity_mode))


def run_wta(block, ctx: RunContext, defaults=None):
    """Short-versus-long window WTA sweep plus the mean-aggregation control.

    ``block`` keys: dataset, reference, query, baseline, frame_accumulator,
    small, large (ms for timewindow, events for eventcount), thresholds.
    """
    defaults = defaults or {}
    accumulator = block.get("frame_accumulator", "timewindow")
    scale = 1000 if accumulator == "timewindow" else 1
    small, large = int(block["small"]) * scale, int(block["large"]) * scale
    ratio = integer_ratio(large, small)
    thresholds = [float(t) for t in block.get("thresholds", [0.0, 0.25, 0.5, 0.75])]
    polarity = block.get("polarity_mode", "summed")
    spec = RunSpec(block.get("baseline", "dense_sad"), block["dataset"], block["reference"],
                   block["query"], "frames", accumulator, small, polarity,
                   block.get("ground_truth", {}), int(block.get("seed", 0)))
    manifest = ctx.manifest(spec.dataset)
    ref_stream = resolve_dataset(manifest, spec.reference, ctx.cache_dir)
    qry_stream = resolve_dataset(manifest, spec.query, ctx.cache_dir)

    def matrices(ref, qry):
        rp = _places(ref, manifest, spec.reference, ctx)
        qp = _places(qry, manifest, spec.query, ctx)
        gt = build_ground_truth(spec, manifest, rp, qp)
        pipe = make_pipeline(spec.baseline, spec.seed).fit(ref)
        return pipe[-1].distances(pipe[:-1].transform(qry)), gt

    ref_s, qry_s = _stacks_for(ref_stream, qry_stream, accumulator, small, polarity)
    ref_l, qry_l = _stacks_for(ref_stream, qry_stream, accumulator, large, polarity)
    d_small, gt_small = matrices(ref_s, qry_s)
    d_large, gt_large = matrices(ref_l, qry_l)
    rows = wta_sweep(d_small, gt_small, d_large, gt_large, ratio, thresholds)
    d_avg, gt_avg = matrices(aggregate_mean(ref_s, ratio), aggregate_mean(qry_s, ratio))
    summary = {
        "ratio": ratio,
        "small_recall1": recall_at_k(d_small, gt_small, 1),
        "large_recall1": recall_at_k(d_large, gt_large, 1),
        "averaged_recall1": recall_at_k(d_avg, gt_avg, 1),
        "dropped_small": rows[0]["dropped_small"] if rows else 0,
        "sweep": rows,
    }
    ctx.out_dir.mkdir(parents=True, exist_ok=True)
    with open(ctx.out_dir / "wta_sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    (ctx.out_dir / "wta_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
