"""End-to-end orchestration: windowing, clustering, problem growth, solving.

Two entry points: `build_reference_problem` constructs an estimation problem
directly from simulator ground truth (labels as associations, exact nodes),
which is what the consistency and recovery experiments use;  `run_odometry`
is the real pipeline driving the clustering front-end and incremental
solves window by window.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .backend.problem import (
    AssociationBlock,
    NavStateNode,
    Problem,
    ResidualWeights,
    initialize_line,
)
from .backend.solver import ConvergenceReport, SolveSchedule, SolverOptions, solve
from .errors import LinevioError
from .frontend import EventClusterer, FrontendConfig, emit_associations
from .geometry import CameraModel, Transform
from .imu import BiasState, ImuData, ImuNoise, WorldModel, preintegrate, propagate_state
from .sim import EventStream

log = logging.getLogger(__name__)


@dataclass
class OdometryConfig:
    """Everything the pipeline needs besides the data itself."""

    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    weights: ResidualWeights = field(default_factory=ResidualWeights)
    imu_noise: ImuNoise = field(default_factory=ImuNoise)
    world: WorldModel = field(default_factory=WorldModel)
    mode: str = "hybrid"  # full-batch | sliding | hybrid
    batch_cutoff_s: float = 24.0
    sliding_window: int = 30
    nominal_depth_m: float = 2.0
    min_track_events: int = 50
    solver: SolverOptions = field(default_factory=SolverOptions)
    # Intermediate (per-window) re-solves are warm-started; cap their effort
    # and leave full convergence to the final solve.
    intermediate_max_iterations: int = 8
    intermediate_cost_rel_tol: float = 1e-6


def window_boundaries(n_events: int, window_events: int) -> list[tuple[int, int]]:
    """[start, stop) index ranges of full windows; a short tail is dropped."""
    n_windows = n_events // window_events
    return [(m * window_events, (m + 1) * window_events) for m in range(n_windows)]


def _segment_for(imu_data: ImuData, t0: float, t1: float, noise: ImuNoise,
                 bias_prior: BiasState | None = None):
    return preintegrate(imu_data.slice(t0, t1), t0, t1, bias_prior=bias_prior, noise=noise)


def build_reference_problem(scene, traj, events: EventStream, imu_data: ImuData,
                            camera: CameraModel, extrinsics: Transform,
                            window_events: int,
                            weights: ResidualWeights | None = None,
                            noise: ImuNoise | None = None,
                            world: WorldModel | None = None) -> Problem:
    """Problem at ground truth: exact nodes, true lines, labeled associations."""
    from .sim import ground_truth_states

    if events.labels is None:
        raise ValueError("reference problem needs per-event line labels")
    noise = noise or ImuNoise()
    problem = Problem(camera, extrinsics, weights or ResidualWeights(), world or WorldModel())
    bounds = window_boundaries(len(events), window_events)
    if not bounds:
        raise ValueError("not enough events for a single window")
    taus = [float(events.ts[lo]) for lo, _ in bounds]
    nodes = ground_truth_states(traj, taus)
    ends = taus[1:] + [float(events.ts[bounds[-1][1] - 1]) + 1e-6]
    for node, t1 in zip(nodes, ends):
        seg = _segment_for(imu_data, node.timestamp, t1, noise)
        problem.add_node(node, seg)
    for lid, line in enumerate(scene.lines):
        problem.set_line(lid, line)
    for m, (lo, hi) in enumerate(bounds):
        lbl = events.labels[lo:hi]
        for lid in np.unique(lbl):
            if lid < 0:
                continue
            sel = np.flatnonzero(lbl == lid) + lo
            problem.add_block(AssociationBlock(
                window_id=m,
                line_id=int(lid),
                ts=events.ts[sel],
                uv=np.column_stack([events.x[sel], events.y[sel]]),
                event_index=sel,
            ))
    problem.validate()
    return problem


@dataclass
class TrackStat:
    window_id: int
    tau: float
    n_active_tracks: int
    mean_track_windows: float
    moving_avg_windows: float


@dataclass
class OdometryResult:
    problem: Problem
    reports: list[ConvergenceReport]
    track_stats: list[TrackStat]
    n_windows: int

    def trajectory(self):
        """Per-node (t, rotation, position, velocity) tuples."""
        return [
            (n.timestamp, n.rotation.copy(), n.position.copy(), n.velocity.copy())
            for n in self.problem.nodes
        ]


def _schedule_for(config: OdometryConfig, tau: float) -> SolveSchedule:
    if config.mode == "full-batch":
        return SolveSchedule("full")
    if config.mode == "sliding":
        return SolveSchedule("sliding", config.sliding_window)
    if config.mode == "hybrid":
        if tau <= config.batch_cutoff_s:
            return SolveSchedule("full")
        return SolveSchedule("sliding", config.sliding_window)
    raise ValueError(f"unknown mode {config.mode!r}")


def run_odometry(events: EventStream, imu_data: ImuData, camera: CameraModel,
                 extrinsics: Transform, config: OdometryConfig,
                 iteration_cb=None) -> OdometryResult:
    """Run the full pipeline over an event stream.

    Each window is clustered, new tracks become line landmarks initialized
    at the nominal depth, the new node is seeded by inertial propagation
    from the previous one, and the problem is re-solved under the schedule.
    Raises LinevioError("no associations") when nothing clusters.
    """
    bounds = window_boundaries(len(events), config.frontend.window_size_n)
    if not bounds:
        raise LinevioError("not enough events for a single window")
    problem = Problem(camera, extrinsics, config.weights, config.world)
    clusterer = EventClusterer(config.frontend)
    if clusterer.c is None:
        spans = [float(events.ts[hi - 1] - events.ts[lo]) for lo, hi in bounds]
        clusterer.c = max(float(np.median(spans)), 1e-9) / 40.0
        log.info("time normalization c=%.6g s per pixel-equivalent (median span)", clusterer.c)
    reports: list[ConvergenceReport] = []
    track_stats: list[TrackStat] = []
    track_first_window: dict[int, int] = {}
    track_event_counts: dict[int, int] = {}
    window_tracks: list[set[int]] = []

    taus = [float(events.ts[lo]) for lo, _ in bounds]
    t_last = float(events.ts[bounds[-1][1] - 1]) + 1e-6
    ends = taus[1:] + [t_last]

    for m, (lo, hi) in enumerate(bounds):
        ts = events.ts[lo:hi]
        xy = events.xy[lo:hi]
        seg = _segment_for(imu_data, taus[m], ends[m], config.imu_noise)
        if m == 0:
            node = NavStateNode(taus[0], np.eye(3), np.zeros(3), np.zeros(3))
        else:
            prev = problem.nodes[m - 1]
            pos, vel, rot = propagate_state(
                prev, problem.segments[m - 1], taus[m], prev.bias, config.world
            )
            node = NavStateNode(taus[m], rot, pos, vel, BiasState(
                accel_prior=prev.bias.accel_prior,
                gyro_prior=prev.bias.gyro_prior,
                accel_correction=prev.bias.accel_correction,
                gyro_correction=prev.bias.gyro_correction,
            ))
        problem.add_node(node, seg)

        result = clusterer.process_window(ts, xy, m)
        idx, a_ts, a_x, a_y, a_track = emit_associations(result)
        seen = set()
        for track in np.unique(a_track):
            sel = a_track == track
            if int(sel.sum()) < config.min_track_events:
                continue
            track = int(track)
            seen.add(track)
            track_event_counts[track] = track_event_counts.get(track, 0) + int(sel.sum())
            if track not in problem.lines:
                track_first_window[track] = m
                line = initialize_line(
                    np.column_stack([a_x[sel], a_y[sel]]),
                    node, camera, extrinsics, config.nominal_depth_m,
                )
                problem.set_line(track, line, first_window=m)
            problem.add_block(AssociationBlock(
                window_id=m,
                line_id=track,
                ts=a_ts[sel],
                uv=np.column_stack([a_x[sel], a_y[sel]]),
                event_index=idx[sel] + lo,
            ))
        window_tracks.append(seen)

        if problem.n_associations == 0:
            if m == len(bounds) - 1:
                raise LinevioError("no associations")
            continue

        schedule = _schedule_for(config, taus[m])
        options = config.solver
        if m < len(bounds) - 1:
            options = SolverOptions(**{**options.__dict__,
                                       "max_iterations": config.intermediate_max_iterations,
                                       "cost_rel_tol": config.intermediate_cost_rel_tol})
        report = solve(problem, schedule, options)
        reports.append(report)
        if iteration_cb is not None:
            iteration_cb(m, report)

        ages = [m - track_first_window[t] + 1 for t in seen]
        mean_age = float(np.mean(ages)) if ages else 0.0
        recent = [s.mean_track_windows for s in track_stats[-4:]] + [mean_age]
        track_stats.append(TrackStat(
            window_id=m,
            tau=taus[m],
            n_active_tracks=len(seen),
            mean_track_windows=mean_age,
            moving_avg_windows=float(np.mean(recent)),
        ))
        log.info(
            "window %d: %d tracks, %d assoc, cost %.3e (%s)",
            m, len(seen), problem.n_associations, report.final_cost, report.status,
        )
    return OdometryResult(problem, reports, track_stats, len(bounds))
