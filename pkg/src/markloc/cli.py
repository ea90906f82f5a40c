"""Command-line entry point: scenario generation, pipeline runs, report
comparison, and raster export.

Exit codes: 0 success, 1 runtime failure, 2 usage/validation error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .evaluation import (
    DirSource,
    PipelineConfig,
    read_summary,
    run_pipeline,
    write_report,
)
from .hdmap import ParseError, ValidationError
from .libev import RasterConfig, export_instance_masks
from .localmap import LocalMapConfig
from .registration import SolverParams
from .segmentation import GroundFilterConfig
from .sim import InvalidSpec, build_scenario, load_spec, spec_from_dict, write_scenario

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="markloc",
        description="LiDAR road-marking detection and HD-map localization toolkit",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic scenario directory")
    g.add_argument("spec", help="scenario spec JSON (template, seed, noise, ...)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=None, help="override the spec seed")

    r = sub.add_parser("run", help="run the pipeline over a scenario directory")
    r.add_argument("scenario", help="directory produced by `markloc gen`")
    r.add_argument("--solver", choices=("sgicp", "icp"), default="sgicp")
    r.add_argument("--labeler", choices=("oracle", "heuristic"), default="oracle")
    r.add_argument("--out", required=True, help="report output directory")
    r.add_argument("--seed", type=int, default=0, help="local-map discard seed")
    r.add_argument("--eta", type=float, default=50.0, help="local-map retention parameter")
    r.add_argument("--kf-q", type=float, default=0.1, help="threshold filter process noise")
    r.add_argument("--kf-r", type=float, default=2.0, help="threshold filter measurement noise")
    r.add_argument("--min-marking-fraction", type=float, default=0.01)
    r.add_argument("--ground-band", type=float, default=0.15, help="ground band halfwidth, m")
    r.add_argument("--resolution", type=float, default=0.1, help="raster meters per pixel")
    r.add_argument("--extent", type=float, default=60.0, help="raster window side, m")
    r.add_argument("--max-dist", type=float, default=2.0, help="association gate, m")
    r.add_argument("--max-iterations", type=int, default=50, help="solver outer iterations")
    r.add_argument("--tol", type=float, default=1e-5, help="solver pose-delta tolerance")
    r.add_argument("--damping", type=float, default=1e-4, help="initial Levenberg lambda")
    r.add_argument("--huber", action="store_true", help="Huber loss on Mahalanobis residuals")
    r.add_argument("--eps-lines", type=float, default=1e-6)
    r.add_argument("--eps-segments", type=float, default=1e-1)
    r.add_argument("--eps-others", type=float, default=1.0)
    r.add_argument("--no-degeneracy-guard", action="store_true",
                   help="disable the under-constrained direction gate")
    r.add_argument("--init-offset", type=float, nargs=3, default=(0.3, 0.3, 1.0),
                   metavar=("DX", "DY", "DYAW_DEG"), help="frame-0 pose perturbation")

    c = sub.add_parser("compare", help="compare two run reports side by side")
    c.add_argument("report_a")
    c.add_argument("report_b")

    x = sub.add_parser("raster-export", help="export a LiBEV raster PNG + masks")
    x.add_argument("scenario", help="directory produced by `markloc gen`")
    x.add_argument("--frame", type=int, required=True, help="frame index to export")
    x.add_argument("--out", required=True, help="output path prefix")
    x.add_argument("--labeler", choices=("oracle", "heuristic"), default="oracle")
    x.add_argument("--resolution", type=float, default=0.1)
    x.add_argument("--extent", type=float, default=60.0)
    return p


def _config_from_args(args) -> PipelineConfig:
    return PipelineConfig(
        ground=GroundFilterConfig(band_halfwidth_m=args.ground_band),
        kf_q=args.kf_q,
        kf_r=args.kf_r,
        min_marking_fraction=args.min_marking_fraction,
        localmap=LocalMapConfig(eta=args.eta, rng_seed=args.seed),
        raster=RasterConfig(resolution=args.resolution, extent=args.extent),
        solver=SolverParams(
            max_dist=args.max_dist,
            max_outer=args.max_iterations,
            tol=args.tol,
            lambda0=args.damping,
            eps_lines=args.eps_lines,
            eps_segments=args.eps_segments,
            eps_others=args.eps_others,
            huber_enabled=args.huber,
            degeneracy_guard=not args.no_degeneracy_guard,
        ),
        init_offset=tuple(args.init_offset),
    )


def cmd_gen(args) -> int:
    try:
        spec = load_spec(args.spec)
        if args.seed is not None:
            spec = replace(spec, seed=args.seed)
        scenario = build_scenario(spec)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidSpec, TypeError, ValueError) as e:
        print(f"invalid spec: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        write_scenario(scenario, args.out)
    except OSError as e:
        print(f"error writing {args.out}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(
        f"wrote {args.out}: {len(scenario.hd_map.elements)} map elements, "
        f"{scenario.n_frames} frames"
    )
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        source = DirSource(args.scenario)
    except (FileNotFoundError, ParseError, ValidationError, InvalidSpec) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        config = _config_from_args(args)
    except (ValueError, InvalidSpec) as e:
        print(f"invalid configuration: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        report = run_pipeline(source, args.solver, args.labeler, config)
        write_report(report, args.out)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    s = report.summary()
    t = report.timing_summary()["total_ms"]
    print(
        f"{args.solver}/{args.labeler}: mean |lon| {s['mean_abs_lon']:.3f} m, "
        f"mean |lat| {s['mean_abs_lat']:.3f} m, mean |yaw| {s['mean_abs_yaw_deg']:.3f} deg, "
        f"{s['n_flagged']} flagged, {s['n_gaps']} gaps, "
        f"runtime p50 {t['p50']:.1f} ms p95 {t['p95']:.1f} ms"
    )
    if report.detection is not None:
        print(f"detection macro P/R/F1: {report.detection.macro_precision:.3f}/"
              f"{report.detection.macro_recall:.3f}/{report.detection.macro_f1:.3f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        a = read_summary(args.report_a)
        b = read_summary(args.report_b)
    except (FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if a["scenario_hash"] != b["scenario_hash"] or a["n_frames"] != b["n_frames"]:
        print(
            "scenario mismatch: reports come from different scenarios "
            f"({a['scenario_hash']}/{a['n_frames']} frames vs "
            f"{b['scenario_hash']}/{b['n_frames']} frames)",
            file=sys.stderr,
        )
        return EXIT_USAGE
    name_a = f"{a['solver']}/{a['labeler']}"
    name_b = f"{b['solver']}/{b['labeler']}"
    print(f"{'metric':<22}{name_a:>14}{name_b:>14}{'delta':>12}")
    rows = [
        ("mean |lon| (m)", "mean_abs_lon"),
        ("mean |lat| (m)", "mean_abs_lat"),
        ("mean |yaw| (deg)", "mean_abs_yaw_deg"),
        ("rms lon (m)", "rms_lon"),
        ("rms lat (m)", "rms_lat"),
        ("rms yaw (deg)", "rms_yaw_deg"),
        ("max |lon| (m)", "max_abs_lon"),
        ("max |lat| (m)", "max_abs_lat"),
        ("max |yaw| (deg)", "max_abs_yaw_deg"),
    ]
    for label, key in rows:
        va, vb = a[key], b[key]
        print(f"{label:<22}{va:>14.4f}{vb:>14.4f}{vb - va:>12.4f}")
    for label, key in (("flagged frames", "n_flagged"), ("gap frames", "n_gaps")):
        print(f"{label:<22}{a[key]:>14d}{b[key]:>14d}{b[key] - a[key]:>12d}")
    return EXIT_OK


def cmd_raster_export(args) -> int:
    from .libev import HeuristicLabeler, OracleLabeler, rasterize
    from .localmap import LocalMap
    from .segmentation import (
        AdaptiveThreshold,
        DegenerateGround,
        EmptyGround,
        apply_marking_fraction_guard,
        extract_ground,
        segment_high_reflectance,
    )

    try:
        source = DirSource(args.scenario)
    except (FileNotFoundError, ParseError, ValidationError, InvalidSpec) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if not 0 <= args.frame < source.n_frames:
        print(f"error: frame {args.frame} outside 0..{source.n_frames - 1}", file=sys.stderr)
        return EXIT_USAGE
    config = PipelineConfig(raster=RasterConfig(args.resolution, args.extent))
    thr = AdaptiveThreshold(q=config.kf_q, r=config.kf_r)
    local_map = LocalMap(config.localmap)
    for k in range(args.frame + 1):
        cloud, odom, _ = source.frame(k)
        try:
            ground = extract_ground(cloud, config.ground)
            threshold = thr.update(ground)
            segmented = segment_high_reflectance(ground, threshold)
            segmented = apply_marking_fraction_guard(ground, segmented,
                                                     config.min_marking_fraction)
        except (DegenerateGround, EmptyGround):
            from .core import PointCloud

            segmented = PointCloud.empty()
        local_map.update(segmented, odom, k)
    snapshot = local_map.snapshot()
    raster = rasterize(snapshot, odom.translation, config.raster)
    if args.labeler == "oracle":
        labeler = OracleLabeler(source.labels_by_element, config.oracle_min_pixels)
    else:
        labeler = HeuristicLabeler(config.heuristic)
    instances = labeler.label(raster, snapshot)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    raster.save_png(prefix.with_suffix(".png"))
    raster.export_cell_counts(prefix.with_suffix(".cells.txt"))
    export_instance_masks(instances, prefix.with_suffix(".masks.txt"))
    print(
        f"wrote {prefix.with_suffix('.png')} ({raster.width}x{raster.height}), "
        f"{len(instances)} instances"
    )
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    handlers = {
        "gen": cmd_gen,
        "run": cmd_run,
        "compare": cmd_compare,
        "raster-export": cmd_raster_export,
    }
    try:
        return handlers[args.command](args)
    except (InvalidSpec, ParseError, ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # runtime failures map to exit 1
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
