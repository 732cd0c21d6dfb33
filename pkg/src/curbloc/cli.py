"""Command-line entry points: simulate, build-map, parameterize,
localize, evaluate.

A typical round trip:

    curbloc simulate --out run0 --seed 7
    curbloc build-map --data run0 --out maps/base.txt
    curbloc parameterize --base-map maps/base.txt --out maps/curb.txt
    curbloc localize --data run0 --base-map maps/base.txt \\
        --curb-map maps/curb.txt --out results
    curbloc evaluate --trajectory results/trajectory.csv --data run0 \\
        --out results/metrics.csv
"""

from __future__ import annotations

import argparse
import os
import sys

from .basemap import load_base_map, save_base_map
from .config import load_config, write_default_config
from .curbmap import build_curb_map, load_curb_map, save_curb_map
from .evaluation import evaluate, localization_success, save_metrics_csv
from .graph import load_trajectory, save_trajectory
from .pipeline import build_maps_from_drive, run_localization
from .simulate import (NoiseSpec, generate_world, load_dataset, save_dataset,
                       simulate_drive, standard_course)


def _parse_mask(values) -> list[tuple[float, float]]:
    out = []
    for v in values or ():
        lo, _, hi = v.partition(":")
        out.append((float(lo), float(hi)))
    return out


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    spec = standard_course(seed=args.seed, block=args.block)
    world = generate_world(spec)
    if args.clean:
        noise = NoiseSpec(odom_drift_per_m=0.0, detection_sigma=0.0, dropout=0.0,
                          clutter_per_m2=0.0)
    else:
        noise = cfg.noise
    frames = simulate_drive(world, noise, seed=args.seed, speed=cfg.speed,
                            frame_rate=cfg.frame_rate, sensor_range=cfg.sensor_range,
                            visual_mask=_parse_mask(args.mask))
    save_dataset(frames, args.out)
    print(f"wrote {len(frames)} frames to {args.out} "
          f"({len(world.curb_points)} curb points in the world)")
    return 0


def cmd_build_map(args) -> int:
    cfg = load_config(args.config)
    frames = load_dataset(args.data)
    base, _ = build_maps_from_drive(frames, cfg.fit, session_id=args.session)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_base_map(base, args.out)
    with_obs = sum(1 for v in base.vertices if v.curb_observation is not None)
    print(f"wrote base map with {len(base)} vertices "
          f"({with_obs} carrying curb data) to {args.out}")
    return 0


def cmd_parameterize(args) -> int:
    cfg = load_config(args.config)
    base = load_base_map(args.base_map)
    curb = build_curb_map(base, cfg.fit)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_curb_map(curb, args.out)
    n_spline = sum(1 for s in curb.segments if s.kind == "spline")
    print(f"wrote curb map: {len(curb.segments)} segments ({n_spline} splines), "
          f"{curb.stored_points} stored of {curb.total_raw_points} raw points "
          f"({100.0 * curb.compression_ratio:.1f}%)")
    return 0


def cmd_localize(args) -> int:
    cfg = load_config(args.config)
    frames = load_dataset(args.data)
    base = load_base_map(args.base_map)
    curb = load_curb_map(args.curb_map)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "diagnostics.jsonl")
    result = run_localization(frames, base, curb, cfg.tracker, cfg.graph,
                              log_path=log_path)
    save_trajectory(result.graph.vertices, os.path.join(args.out, "trajectory.csv"))
    accepted = result.status_counts.get("accepted", 0)
    print(f"localized {len(frames)} frames: {accepted} curb constraints accepted; "
          f"statuses {result.status_counts}")
    print(f"trajectory and diagnostics written to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    frames = load_dataset(args.data)
    estimates = load_trajectory(args.trajectory)
    if len(estimates) != len(frames):
        print(f"error: trajectory has {len(estimates)} rows, dataset has "
              f"{len(frames)} frames", file=sys.stderr)
        return 1
    flags = [localization_success(f.visual_available, e.localized)
             for f, e in zip(frames, estimates)]
    metrics = evaluate(estimates, frames, localized=flags)
    save_metrics_csv([(args.data, 1, metrics)], args.out)
    print(metrics.table_row())
    print(f"metrics written to {args.out}")
    return 0


def cmd_write_config(args) -> int:
    write_default_config(args.out)
    print(f"default configuration written to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="curbloc",
        description="Curb-landmark mapping and localization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML configuration file")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("simulate", help="generate a synthetic drive dataset")
    common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--block", type=float, default=500.0,
                   help="course block size in meters (route is 4 blocks)")
    p.add_argument("--mask", action="append", metavar="LO:HI",
                   help="visual-dropout interval in route meters (repeatable)")
    p.add_argument("--clean", action="store_true",
                   help="disable all noise sources")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("build-map", help="assemble a base map from a dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="base-map file to write")
    p.add_argument("--session", type=int, default=0, help="recording session id")
    p.set_defaults(func=cmd_build_map)

    p = sub.add_parser("parameterize", help="compress a base map's curb data")
    common(p)
    p.add_argument("--base-map", required=True, help="base-map file")
    p.add_argument("--out", required=True, help="curb-map file to write")
    p.set_defaults(func=cmd_parameterize)

    p = sub.add_parser("localize", help="run localization against saved maps")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--base-map", required=True)
    p.add_argument("--curb-map", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("evaluate", help="score a trajectory against ground truth")
    common(p)
    p.add_argument("--trajectory", required=True, help="estimated trajectory CSV")
    p.add_argument("--data", required=True, help="dataset directory with ground truth")
    p.add_argument("--out", required=True, help="metrics CSV to write")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("write-config", help="emit the default configuration file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_write_config)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
