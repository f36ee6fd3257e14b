"""Command line entry point.

    eventlab <baseline> <dataset> <reference> <query> [options]
    eventlab batch --config PATH
    eventlab wta --config PATH
    eventlab slam-eval --gt FILE --est FILE [FILE ...]
    eventlab export-frames <dataset> <sequence> (--num-events N | --timewindow MS) --out DIR
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from ..frames import export_frames, generate_fixed_count, generate_fixed_window
from ..slam import DEFAULT_MAX_DT_US, eval_trials, load_trajectory
from .config import ConfigError, RunSpec, default_manifest_dirs, load_config, parse_config
from .datasets import find_manifests, resolve_dataset
from .registry import registered_baselines
from .runner import RunContext, run_batch, run_single, run_wta

SUBCOMMANDS = ("batch", "wta", "slam-eval", "export-frames")
SLAM_COLUMNS = ("scene", "method", "trial", "rmse_ate_cm", "accuracy_inv_cm", "pairs")


def _common(p):
    p.add_argument("--out", type=Path, default=None, help="output directory (default ./eventlab_out)")
    p.add_argument("--cache", type=Path, default=None, help="cache root (default $EVENTLAB_CACHE)")
    p.add_argument("--manifest-dir", type=Path, action="append", default=None,
                   help="extra directory of <dataset>.yaml manifests")
    p.add_argument("-v", "--verbose", action="store_true")


def single_parser():
    p = argparse.ArgumentParser(prog="eventlab", description="Run one baseline on one reference/query pair.",
                                epilog=f"subcommands: {', '.join(SUBCOMMANDS)}")
    p.add_argument("baseline")
    p.add_argument("dataset")
    p.add_argument("reference")
    p.add_argument("query")
    p.add_argument("--config", type=Path, help="config file providing defaults")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--num-events", type=int, help="events per frame")
    g.add_argument("--timewindow", type=int, help="window length in ms")
    p.add_argument("--generator", choices=("frames", "reconstruction-import"), default=None)
    p.add_argument("--polarity-mode", choices=("summed", "two_channel"), default=None)
    p.add_argument("--reconstruction-dir", type=Path, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    _common(p)
    return p


def _manifest_dirs(args, config_path=None):
    dirs = default_manifest_dirs(config_path)
    return dirs + list(args.manifest_dir or [])


def _run_single(argv):
    args = single_parser().parse_args(argv)
    defaults = load_config(args.config) if args.config else {}
    if args.baseline not in registered_baselines():
        print(f"eventlab: unknown baseline {args.baseline!r}; registered: "
              f"{', '.join(registered_baselines())}", file=sys.stderr)
        return 2
    manifests = find_manifests(_manifest_dirs(args, args.config))
    if args.dataset not in manifests:
        print(f"eventlab: unknown dataset {args.dataset!r}; known: {', '.join(sorted(manifests))}",
              file=sys.stderr)
        return 2
    if args.timewindow is not None:
        accumulator, parameter = "timewindow", args.timewindow * 1000
    elif args.num_events is not None:
        accumulator, parameter = "eventcount", args.num_events
    elif defaults.get("num_events"):
        accumulator, parameter = "eventcount", int(_first(defaults["num_events"]))
    elif defaults.get("timewindows"):
        accumulator, parameter = "timewindow", int(_first(defaults["timewindows"])) * 1000
    else:
        accumulator, parameter = "eventcount", 25000
    gen = args.generator or ("reconstruction-import"
                             if str(defaults.get("frame_generator", "frames")).startswith("reconstruction")
                             else "frames")
    gt = {}
    if defaults.get("ground_truth_tolerance") is not None:
        gt["tolerance_places"] = int(defaults["ground_truth_tolerance"])
    gt.update(defaults.get("ground_truth") or {})
    sub = defaults.get("filter_time_sec")
    try:
        spec = RunSpec(args.baseline, args.dataset, args.reference, args.query, gen, accumulator,
                       parameter, args.polarity_mode or defaults.get("polarity_mode", "summed"), gt,
                       args.seed if args.seed is not None else int(defaults.get("seed", 0)),
                       int(round(float(sub) * 1e6)) if sub else None)
    except ConfigError as exc:
        print(f"eventlab: {exc}", file=sys.stderr)
        return 2
    ctx = RunContext(args.out or Path(defaults.get("output_dir", "eventlab_out")), manifests, args.cache,
                     args.reconstruction_dir or defaults.get("reconstruction_dir"))
    result = run_single(spec, ctx)
    if result.error:
        print(f"eventlab: {result.error}", file=sys.stderr)
        return 1
    m = result.report["metrics"]
    print(f"{spec.run_id}: R@1={m['recall_at']['1']:.4f} R@5={m['recall_at']['5']:.4f} "
          f"R@10={m['recall_at']['10']:.4f} PR-AUC={m['pr_auc']:.4f} GTP={m['gtp']}")
    print(f"report: {ctx.out_dir / 'reports' / (spec.run_id + '.json')}")
    return 0


def _first(v):
    return v[0] if isinstance(v, (list, tuple)) else v


def _batch(argv):
    p = argparse.ArgumentParser(prog="eventlab batch")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--lenient", action="store_true", help="ignore unknown config keys")
    _common(p)
    args = p.parse_args(argv)
    dirs = _manifest_dirs(args, args.config)
    try:
        defaults, specs = parse_config(args.config, strict=not args.lenient, manifest_dirs=dirs)
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"eventlab batch: {exc}", file=sys.stderr)
        return 2
    ctx = RunContext(args.out or Path(defaults.get("output_dir", "eventlab_out")), find_manifests(dirs),
                     args.cache, defaults.get("reconstruction_dir"))
    results, summary = run_batch(specs, ctx, args.jobs or defaults.get("jobs", 1))
    failed = sum(r.error is not None for r in results)
    print(f"{len(results)} runs, {failed} failed; results in {ctx.results_csv}")
    for s in summary:
        print(f"  {s['baseline']:>14} {s['dataset']:<16} runs={s['runs']} "
              f"R@1={s['mean_recall_at_1']:.4f} PR-AUC={s['mean_pr_auc']:.4f}")
    return 1 if failed else 0


def _wta(argv):
    p = argparse.ArgumentParser(prog="eventlab wta")
    p.add_argument("--config", type=Path, required=True)
    _common(p)
    args = p.parse_args(argv)
    data = load_config(args.config)
    if "wta" not in data:
        print("eventlab wta: config has no `wta` block", file=sys.stderr)
        return 2
    dirs = _manifest_dirs(args, args.config)
    ctx = RunContext(args.out or Path(data.get("output_dir", "eventlab_out")), find_manifests(dirs), args.cache)
    summary = run_wta(data["wta"], ctx, data)
    print(f"ratio {summary['ratio']}: small R@1={summary['small_recall1']:.4f} "
          f"large R@1={summary['large_recall1']:.4f} averaged R@1={summary['averaged_recall1']:.4f}")
    for row in summary["sweep"]:
        print(f"  threshold {row['threshold']:.2f}: adjusted R@1={row['adjusted_recall1']:.4f} "
              f"(bins upgraded {row['bins_upgraded']})")
    return 0


def _slam_eval(argv):
    p = argparse.ArgumentParser(prog="eventlab slam-eval")
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--est", type=Path, nargs="+", required=True)
    p.add_argument("--scene", default="scene")
    p.add_argument("--method", default="method")
    p.add_argument("--max-dt-ms", type=float, default=DEFAULT_MAX_DT_US / 1000)
    p.add_argument("--normalize-quaternions", action="store_true")
    p.add_argument("--out", type=Path, default=None, help="CSV to append rows to (default stdout)")
    args = p.parse_args(argv)
    gt = load_trajectory(args.gt, args.normalize_quaternions)
    trials = [load_trajectory(e, args.normalize_quaternions) for e in args.est]
    results, box = eval_trials(trials, gt, int(round(args.max_dt_ms * 1000)))
    rows = []
    for i, r in enumerate(results):
        rows.append({"scene": args.scene, "method": args.method, "trial": i,
                     "rmse_ate_cm": repr(r.rmse_ate_cm),
                     "accuracy_inv_cm": repr(1.0 / r.rmse_ate_cm) if r.rmse_ate_cm > 0 else "",
                     "pairs": r.pairs})
    med = box["median"]
    rows.append({"scene": args.scene, "method": args.method, "trial": "summary",
                 "rmse_ate_cm": repr(med), "accuracy_inv_cm": repr(1.0 / med) if med > 0 else "",
                 "pairs": sum(r.pairs for r in results)})
    if args.out:
        new = not args.out.exists() or args.out.stat().st_size == 0
        with open(args.out, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SLAM_COLUMNS, lineterminator="\n")
            if new:
                w.writeheader()
            w.writerows(rows)
        box_path = args.out.with_suffix(".summary.json")
        box_path.write_text(json.dumps({"scene": args.scene, "method": args.method, **box},
                                       indent=2, sort_keys=True) + "\n")
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=SLAM_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return 0


def _export_frames(argv):
    p = argparse.ArgumentParser(prog="eventlab export-frames")
    p.add_argument("dataset")
    p.add_argument("sequence")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--num-events", type=int)
    g.add_argument("--timewindow", type=int, help="ms")
    p.add_argument("--polarity-mode", choices=("summed", "two_channel"), default="summed")
    _common(p)
    args = p.parse_args(argv)
    manifests = find_manifests(_manifest_dirs(args))
    stream = resolve_dataset(manifests[args.dataset], args.sequence, args.cache)
    if args.num_events:
        stack, name = generate_fixed_count(stream, args.num_events, args.polarity_mode), f"eventcount_{args.num_events}"
    else:
        stack = generate_fixed_window(stream, args.timewindow * 1000, args.polarity_mode)
        name = f"timewindow_{args.timewindow * 1000}"
    out = (args.out or Path("eventlab_frames")) / args.dataset / args.sequence / name
    export_frames(stack, out)
    print(f"{len(stack)} frames -> {out}")
    return 0


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if "-v" in argv or "--verbose" in argv else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"batch": _batch, "wta": _wta, "slam-eval": _slam_eval, "export-frames": _export_frames}
    if argv and argv[0] in handlers:
        return handlers[argv[0]](argv[1:])
    return _run_single(argv)


if __name__ == "__main__":
    sys.exit(main())
