"""Command-line entry point: simulate | cluster | run | evaluate.

Every command writes a manifest echo (config text, seed, version, inputs)
next to its outputs so a run can be reproduced bit-exactly.  Exit codes:
0 success, 1 usage or I/O failure, 2 solver or pipeline failure (partial
outputs are kept).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, dataio
from .backend.solver import SolverOptions
from .errors import LinevioError, SolverDiverged
from .evaluation import TrajectorySample, align_posyaw, apply_alignment, rmse, segment_errors
from .frontend import EventClusterer, cluster_labels
from .geometry import Transform
from .imu import WorldModel
from .pipeline import OdometryConfig, run_odometry, window_boundaries
from .sim import AnalyticTrajectory, generate_events, generate_imu, shapes_scene, sparse_scene, default_rig

log = logging.getLogger("linevio")


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace, config_text: str):
    manifest = {
        "version": __version__,
        "command": command,
        "seed": getattr(args, "seed", None),
        "args": {k: str(v) for k, v in vars(args).items() if k != "func"},
        "config": config_text,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _config_text(path):
    if path is None:
        return dataio.default_config_text()
    return Path(path).read_text()


def _default_trajectory(duration: float) -> AnalyticTrajectory:
    return AnalyticTrajectory(
        duration=duration,
        trans_amp=[[0.18, 0.15, 0.1], [0.05, 0.04, 0.06]],
        trans_freq=[[0.5, 0.4, 0.3], [0.9, 0.8, 1.1]],
        trans_phase=[[np.pi / 2] * 3, [np.pi / 2] * 3],
        rot_amp=[[0.08, 0.1, 0.07]],
        rot_freq=[[0.4, 0.3, 0.5]],
        rot_phase=[[np.pi / 2] * 3],
    )


def cmd_simulate(args) -> int:
    cfg = dataio.load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.sim_seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    camera, extrinsics = default_rig()
    scene = sparse_scene(args.lines) if args.scene == "sparse" else shapes_scene()
    duration = args.duration if args.duration is not None else cfg.sim_duration_s
    traj = _default_trajectory(duration)

    imu_data, _, _ = generate_imu(traj, cfg.sim, cfg.world, seed=seed)
    events = generate_events(scene, traj, camera, extrinsics, cfg.sim, seed=seed)
    if len(events) == 0:
        log.warning("simulation produced an empty event stream")

    dataio.write_events(out / "events.txt", events)
    dataio.write_imu(out / "imu.txt", imu_data)
    dataio.write_calibration(out / "calib.txt", camera, extrinsics)
    dataio.write_labels(out / "labels.txt", events.labels)
    n_gt = max(2, int(np.ceil(duration * cfg.groundtruth_rate_hz)) + 1)
    gt_ts = np.linspace(0.0, duration, n_gt)
    samples = [
        TrajectorySample(float(t), traj.pose(float(t)), traj.velocity(float(t)))
        for t in gt_ts
    ]
    dataio.write_groundtruth(out / "groundtruth.txt", samples)
    _write_manifest(out, "simulate", args, _config_text(args.config))
    log.info("wrote dataset to %s (%d events)", out, len(events))
    return 0


def _load_dataset(args):
    camera, extrinsics = dataio.read_calibration(args.calib)
    events = dataio.load_events(args.events)
    imu_data = dataio.load_imu(args.imu)
    return camera, extrinsics, events, imu_data


def cmd_cluster(args) -> int:
    cfg = dataio.load_config(args.config)
    if args.window_events:
        cfg.frontend.window_size_n = args.window_events
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    camera, extrinsics, events, _ = (*dataio.read_calibration(args.calib),
                                     dataio.load_events(args.events), None)
    clusterer = EventClusterer(cfg.frontend)
    bounds = window_boundaries(len(events), cfg.frontend.window_size_n)
    if not bounds:
        log.error("not enough events for one window")
        return 2
    for m, (lo, hi) in enumerate(bounds):
        result = clusterer.process_window(events.ts[lo:hi], events.xy[lo:hi], m)
        labels = cluster_labels(hi - lo, result.clusters)
        tracks = np.full(hi - lo, -1, dtype=np.int64)
        for ci, cl in enumerate(result.clusters):
            tracks[labels == ci] = cl.track_id
        path = out / f"window_{m:04d}.csv"
        with open(path, "w") as fh:
            fh.write("event_index,x,y,t,cluster_id,track_id\n")
            for i in range(hi - lo):
                fh.write(f"{lo + i},{events.x[lo + i]:.6f},{events.y[lo + i]:.6f},"
                         f"{events.ts[lo + i]:.9f},{labels[i]},{tracks[i]}\n")
        log.info("window %d: %d clusters -> %s", m, len(result.clusters), path)
    _write_manifest(out, "cluster", args, _config_text(args.config))
    return 0


def cmd_run(args) -> int:
    cfg = dataio.load_config(args.config)
    if args.window_events:
        cfg.frontend.window_size_n = args.window_events
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    camera, extrinsics, events, imu_data = _load_dataset(args)
    pipeline_cfg = OdometryConfig(
        frontend=cfg.frontend,
        weights=cfg.weights,
        imu_noise=cfg.imu_noise,
        world=cfg.world,
        mode=args.mode or cfg.mode,
        batch_cutoff_s=args.batch_cutoff_s if args.batch_cutoff_s is not None else cfg.batch_cutoff_s,
        sliding_window=args.sliding_window if args.sliding_window is not None else cfg.sliding_window,
        nominal_depth_m=cfg.nominal_depth_m,
        min_track_events=cfg.min_track_events,
    )

    conv_path = out / "convergence.jsonl"
    conv_fh = open(conv_path, "w")

    def log_report(window_id, report):
        for rec in report.iteration_dicts():
            rec = {"window": window_id, **rec}
            conv_fh.write(json.dumps(rec) + "\n")
        conv_fh.flush()

    status = 0
    try:
        result = run_odometry(events, imu_data, camera, extrinsics, pipeline_cfg,
                              iteration_cb=log_report)
    except SolverDiverged as exc:
        log.error("solver diverged: %s", exc)
        conv_fh.close()
        _write_manifest(out, "run", args, _config_text(args.config))
        return 2
    except LinevioError as exc:
        log.error("pipeline failed: %s", exc)
        conv_fh.close()
        _write_manifest(out, "run", args, _config_text(args.config))
        return 2
    finally:
        if not conv_fh.closed:
            conv_fh.close()

    samples = [
        TrajectorySample(t, Transform(rot, pos), vel)
        for t, rot, pos, vel in result.trajectory()
    ]
    dataio.write_trajectory(out / "trajectory.txt", samples)
    with open(out / "track_lengths.csv", "w") as fh:
        fh.write("window_id,tau,n_active_tracks,mean_track_windows,moving_avg_windows\n")
        for s in result.track_stats:
            fh.write(f"{s.window_id},{s.tau:.9f},{s.n_active_tracks},"
                     f"{s.mean_track_windows:.4f},{s.moving_avg_windows:.4f}\n")
    _write_manifest(out, "run", args, _config_text(args.config))
    log.info("wrote %s and %s", out / "trajectory.txt", conv_path)
    return status


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    estimate = dataio.read_trajectory(args.estimate)
    truth = dataio.read_trajectory(args.groundtruth)
    world = WorldModel()
    up = -world.gravity / np.linalg.norm(world.gravity)
    alignment = align_posyaw(estimate, truth, first_k=args.first_k, gravity_axis=up)
    aligned = apply_alignment(alignment, estimate)
    e_t, e_r = rmse(aligned, truth, t_max=args.t_max)
    fractions = tuple(float(f) for f in args.fractions.split(","))
    segments = segment_errors(estimate, truth, fractions=fractions, gravity_axis=up)

    with open(out / "rmse.csv", "w") as fh:
        fh.write("t_max_s,first_k,e_t_m,e_r_deg\n")
        fh.write(f"{args.t_max},{args.first_k},{e_t:.9f},{e_r:.9f}\n")
    summary = {
        "t_max_s": args.t_max,
        "first_k": args.first_k,
        "e_t_m": e_t,
        "e_r_deg": e_r,
        "segments": [
            {
                "fraction": s.fraction,
                "length_m": s.length_m,
                "trans_quartiles_m": list(s.quartiles_trans()),
                "rot_quartiles_deg": list(s.quartiles_rot()),
            }
            for s in segments
        ],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    for s in segments:
        path = out / f"segment_errors_{int(round(s.fraction * 100))}pct.csv"
        with open(path, "w") as fh:
            fh.write("segment_length_pct,translation_error_m,rotation_error_deg\n")
            for te, re_ in zip(s.trans_errors, s.rot_errors_deg):
                fh.write(f"{int(round(s.fraction * 100))},{te:.9f},{re_:.9f}\n")
    _write_manifest(out, "evaluate", args, _config_text(None))
    log.info("wrote %s and %s", out / "rmse.csv", out / "summary.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="linevio",
        description="Event-camera + IMU odometry with 3D line landmarks",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic labeled dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--duration", type=float, default=None, help="seconds (0 allowed)")
    p.add_argument("--scene", choices=["shapes", "sparse"], default="shapes")
    p.add_argument("--lines", type=int, default=6, help="line count for --scene sparse")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("cluster", help="run the front-end alone, dump per-window CSVs")
    p.add_argument("--config", default=None)
    p.add_argument("--events", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window-events", type=int, default=None)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("run", help="full odometry pipeline")
    p.add_argument("--config", default=None)
    p.add_argument("--events", required=True)
    p.add_argument("--imu", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--groundtruth", default=None, help="unused by run, accepted for symmetry")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=["full-batch", "sliding", "hybrid"], default=None)
    p.add_argument("--batch-cutoff-s", type=float, default=None)
    p.add_argument("--window-events", type=int, default=None)
    p.add_argument("--sliding-window", type=int, default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="RMSE and segment-error metrics")
    p.add_argument("--estimate", required=True)
    p.add_argument("--groundtruth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--t-max", type=float, default=40.0)
    p.add_argument("--first-k", type=int, default=50)
    p.add_argument("--fractions", default="0.1,0.2,0.3,0.4,0.5")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except LinevioError as exc:
        log.error("%s", exc)
        return 2
    except OSError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
