"""Synthetic data generation: line scenes, smooth trajectories, ideal event
streams with per-event line labels, and (optionally noisy) IMU readings.

The event model is a geometric edge sweep: points sampled along each 3D
segment are tracked through the image, and a point emits an event whenever
its projection has moved by the contrast step since its last event.  Events
therefore lie exactly on the projected segment at their own timestamp, which
is what makes the stream usable as a consistency oracle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    MIN_DEPTH,
    CameraModel,
    Line3,
    Transform,
    so3_exp,
    so3_right_jacobian,
)
from .imu import ImuData, WorldModel


@dataclass(frozen=True)
class Scene:
    """Static wireframe scene of 3D line segments (ids are list positions)."""

    lines: tuple[Line3, ...]

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple(self.lines))
        for ln in self.lines:
            if max(np.abs(ln.point_a).max(), np.abs(ln.point_b).max()) > 100.0:
                raise ValueError("scene line outside the bounded workspace")


@dataclass(frozen=True)
class AnalyticTrajectory:
    """Sinusoidal-basis trajectory with closed-form derivatives.

    Each axis of position and orientation (rotation vector) is a sum of
    terms amp * (sin(2 pi freq t + phase) - sin(phase)), so the pose at t=0
    is exactly (rot=I, pos=base_position) and all derivatives are analytic.
    """

    duration: float
    base_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    trans_amp: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))
    trans_freq: np.ndarray = field(default_factory=lambda: np.ones((1, 3)))
    trans_phase: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))
    rot_amp: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))
    rot_freq: np.ndarray = field(default_factory=lambda: np.ones((1, 3)))
    rot_phase: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))

    def __post_init__(self):
        for name in ("trans_amp", "trans_freq", "trans_phase", "rot_amp", "rot_freq", "rot_phase"):
            arr = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "base_position", np.asarray(self.base_position, dtype=float).reshape(3))

    @staticmethod
    def _basis(t, amp, freq, phase, order: int):
        t = np.asarray(t, dtype=float)
        w = 2.0 * np.pi * freq
        arg = w * t[..., None, None] + phase
        if order == 0:
            val = amp * (np.sin(arg) - np.sin(phase))
        elif order == 1:
            val = amp * w * np.cos(arg)
        elif order == 2:
            val = -amp * w**2 * np.sin(arg)
        else:
            raise ValueError(order)
        return val.sum(axis=-2)

    def position(self, t) -> np.ndarray:
        return self.base_position + self._basis(t, self.trans_amp, self.trans_freq, self.trans_phase, 0)

    def velocity(self, t) -> np.ndarray:
        return self._basis(t, self.trans_amp, self.trans_freq, self.trans_phase, 1)

    def acceleration(self, t) -> np.ndarray:
        return self._basis(t, self.trans_amp, self.trans_freq, self.trans_phase, 2)

    def rotvec(self, t) -> np.ndarray:
        return self._basis(t, self.rot_amp, self.rot_freq, self.rot_phase, 0)

    def rotvec_rate(self, t) -> np.ndarray:
        return self._basis(t, self.rot_amp, self.rot_freq, self.rot_phase, 1)

    def rotation(self, t) -> np.ndarray:
        return so3_exp(self.rotvec(t))

    def angular_velocity_body(self, t) -> np.ndarray:
        # Rdot = R hat(w_body) with w_body = Jr(theta) thetadot.
        theta = self.rotvec(t)
        return np.einsum("...ij,...j->...i", so3_right_jacobian(theta), self.rotvec_rate(t))

    def pose(self, t: float) -> Transform:
        return Transform(self.rotation(t), self.position(t))


@dataclass(frozen=True)
class SimConfig:
    """Sampling rates, event-model constants, and noise toggles.

    All noise defaults to zero so the default stream is an exact oracle.
    """

    imu_rate: float = 1000.0
    contrast_step_px: float = 0.5
    edge_sample_spacing_px: float = 1.0
    max_sweep_step_px: float = 0.25
    accel_noise_density: float = 0.0
    gyro_noise_density: float = 0.0
    accel_bias_const: float = 0.0
    gyro_bias_const: float = 0.0
    accel_bias_rw: float = 0.0
    gyro_bias_rw: float = 0.0
    event_jitter_px: float = 0.0
    event_time_jitter_s: float = 0.0
    spurious_rate: float = 0.0  # events / pixel / second over the full sensor

    def __post_init__(self):
        if self.imu_rate <= 0 or self.contrast_step_px <= 0 or self.edge_sample_spacing_px <= 0:
            raise ValueError("rates and event-model steps must be positive")


@dataclass
class EventStream:
    """Column arrays of an event stream plus optional per-event line labels."""

    ts: np.ndarray
    x: np.ndarray
    y: np.ndarray
    polarity: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.ts = np.asarray(self.ts, dtype=float)
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.polarity = np.asarray(self.polarity, dtype=np.int64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.ts)

    @property
    def xy(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])


def default_trajectory(duration: float, trans_scale: float = 1.0,
                       rot_scale: float = 1.0) -> AnalyticTrajectory:
    """Gentle 6-DoF sinusoidal motion starting at rest at the origin.

    Two incommensurate harmonics per axis keep the image-plane speed away
    from zero after the initial ramp-in, so lines are observed continuously.
    """
    return AnalyticTrajectory(
        duration=duration,
        base_position=np.zeros(3),
        trans_amp=np.array([[0.16, 0.13, 0.09], [0.045, 0.055, 0.04]]) * trans_scale,
        trans_freq=[[0.50, 0.41, 0.33], [1.17, 0.93, 1.31]],
        trans_phase=[[np.pi / 2] * 3, [np.pi / 2] * 3],
        rot_amp=np.array([[0.07, 0.09, 0.06], [0.035, 0.03, 0.04]]) * rot_scale,
        rot_freq=[[0.44, 0.29, 0.56], [1.03, 1.23, 0.87]],
        # Staggered second-harmonic phases keep the angular rate (and with
        # it every line's image speed) away from zero after t=0.
        rot_phase=[[np.pi / 2] * 3, [2.1, 0.9, 4.6]],
    )


def default_rig():
    """DAVIS-like camera plus a non-trivial body-to-camera extrinsic.

    The camera optical axis points along world +x at t=0 (rotation about y
    by 90 degrees) with a small lever arm, so scenes live in a plane of
    constant x.
    """
    camera = CameraModel(fx=200.0, fy=200.0, cx=120.0, cy=90.0, width=240, height=180)
    rot_ic = so3_exp(np.array([0.0, np.pi / 2.0, 0.0]))
    extrinsics = Transform(rot_ic, np.array([0.01, 0.02, -0.015]))
    return camera, extrinsics


def shapes_scene(depth: float = 2.0) -> Scene:
    """Eight segments (rectangle, triangle, one diagonal) in the plane x=depth."""
    d = depth
    rect = [
        ([d, -0.75, -0.45], [d, -0.15, -0.45]),
        ([d, -0.15, -0.45], [d, -0.15, 0.25]),
        ([d, -0.15, 0.25], [d, -0.75, 0.25]),
        ([d, -0.75, 0.25], [d, -0.75, -0.45]),
    ]
    tri = [
        ([d, 0.2, -0.5], [d, 0.75, -0.35]),
        ([d, 0.75, -0.35], [d, 0.45, 0.1]),
        ([d, 0.45, 0.1], [d, 0.2, -0.5]),
    ]
    diag = [([d, -0.05, 0.45], [d, 0.7, 0.3])]
    lines = tuple(Line3(np.array(a), np.array(b)) for a, b in rect + tri + diag)
    return Scene(lines)


def sparse_scene(n_lines: int = 6, depth: float = 2.0) -> Scene:
    """Well-separated, non-touching segments for clustering experiments."""
    specs = [
        ([-0.8, -0.5], [-0.8, 0.5]),
        ([-0.45, -0.55], [-0.25, 0.45]),
        ([0.0, -0.5], [0.0, 0.5]),
        ([0.4, -0.45], [0.3, 0.5]),
        ([0.75, -0.5], [0.75, 0.45]),
        ([-0.6, 0.62], [0.6, 0.66]),
        ([-0.6, -0.68], [0.55, -0.62]),
        ([-0.15, -0.05], [0.18, 0.02]),
    ]
    if n_lines > len(specs):
        raise ValueError(f"at most {len(specs)} preset lines")
    lines = tuple(
        Line3(np.array([depth, a[0], a[1]]), np.array([depth, b[0], b[1]]))
        for a, b in specs[:n_lines]
    )
    return Scene(lines)


def generate_imu(traj: AnalyticTrajectory, cfg: SimConfig,
                 world: WorldModel | None = None,
                 seed: int = 0):
    """Inverse sensor model along the trajectory.

    Returns (ImuData, accel_bias_track, gyro_bias_track); the bias tracks
    are what was actually injected at each sample time.
    """
    world = world or WorldModel()
    rng = np.random.default_rng(seed)
    n = int(math.ceil(traj.duration * cfg.imu_rate))
    ts = np.linspace(0.0, n / cfg.imu_rate, n + 1)
    dt = 1.0 / cfg.imu_rate

    rot = traj.rotation(ts)
    acc_w = traj.acceleration(ts) - world.gravity
    accel = np.einsum("nji,nj->ni", rot, acc_w)
    gyro = traj.angular_velocity_body(ts)

    def bias_track(const_scale, rw_scale):
        const = rng.normal(0.0, 1.0, 3) * const_scale if const_scale > 0 else np.zeros(3)
        track = np.tile(const, (len(ts), 1))
        if rw_scale > 0:
            steps = rng.normal(0.0, rw_scale * math.sqrt(dt), (len(ts) - 1, 3))
            track[1:] += np.cumsum(steps, axis=0)
        return track

    accel_bias = bias_track(cfg.accel_bias_const, cfg.accel_bias_rw)
    gyro_bias = bias_track(cfg.gyro_bias_const, cfg.gyro_bias_rw)
    accel = accel + accel_bias
    gyro = gyro + gyro_bias
    if cfg.accel_noise_density > 0:
        accel = accel + rng.normal(0.0, cfg.accel_noise_density * math.sqrt(cfg.imu_rate), accel.shape)
    if cfg.gyro_noise_density > 0:
        gyro = gyro + rng.normal(0.0, cfg.gyro_noise_density * math.sqrt(cfg.imu_rate), gyro.shape)
    return ImuData(ts, accel, gyro), accel_bias, gyro_bias


def _project_samples(camera, extrinsics, traj, t, pts_w):
    rot = traj.rotation(t)
    pos = traj.position(t)
    p_i = (pts_w - pos) @ rot  # R^T (x - p), row-vector convention
    p_c = (p_i - extrinsics.translation) @ extrinsics.rotation
    uv, depth = camera.project_camera(np.where((p_c[:, 2] > MIN_DEPTH)[:, None], p_c, [0.0, 0.0, 1.0]))
    visible = (p_c[:, 2] > MIN_DEPTH) & camera.contains(uv)
    return uv, visible


def _line_event_sweep(line, label, traj, camera, extrinsics, cfg, rng):
    """Event sweep for one line; returns (ts, xy, labels) arrays."""
    uv0, vis0 = _project_samples(camera, extrinsics, traj, 0.0,
                                 np.stack([line.point_a, line.point_b]))
    if vis0.all():
        len_px = float(np.linalg.norm(uv0[1] - uv0[0]))
    else:
        len_px = line.length * camera.fx / max(1.0, np.abs(line.point_a).max())
    n_s = max(2, int(math.ceil(len_px / cfg.edge_sample_spacing_px)) + 1)
    fracs = np.linspace(0.0, 1.0, n_s)
    pts_w = line.point_a + fracs[:, None] * (line.point_b - line.point_a)

    thresh = rng.uniform(0.0, cfg.contrast_step_px, n_s)
    pos, vis = _project_samples(camera, extrinsics, traj, 0.0, pts_w)
    ref = np.where(vis[:, None], pos, np.nan)

    out_t, out_xy = [], []
    t = 0.0
    dt = 1e-3
    dt_min, dt_max = 1e-5, 5e-3
    while t < traj.duration - 1e-12:
        dt = min(dt, traj.duration - t)
        while True:
            pos2, vis2 = _project_samples(camera, extrinsics, traj, t + dt, pts_w)
            both = vis & vis2
            motion = float(np.max(np.linalg.norm(pos2 - pos, axis=1)[both])) if both.any() else 0.0
            if motion <= cfg.max_sweep_step_px or dt <= dt_min:
                break
            dt = max(dt_min, dt * 0.5 * cfg.max_sweep_step_px / motion)
        armed = np.isfinite(ref[:, 0]) & vis2
        moved = np.linalg.norm(np.where(armed[:, None], pos2 - ref, 0.0), axis=1)
        fire = armed & (moved > thresh)
        if fire.any():
            out_t.append(np.full(int(fire.sum()), t + dt))
            out_xy.append(pos2[fire])
            ref[fire] = pos2[fire]
            thresh[fire] = cfg.contrast_step_px
        ref[~vis2] = np.nan
        newly = vis2 & ~np.isfinite(ref[:, 0])
        ref[newly] = pos2[newly]
        pos, vis = pos2, vis2
        t += dt
        if motion < 0.5 * cfg.max_sweep_step_px:
            dt = min(dt * 1.5, dt_max)
    if not out_t:
        return np.empty(0), np.empty((0, 2)), np.empty(0, dtype=np.int64)
    ts = np.concatenate(out_t)
    xy = np.vstack(out_xy)
    return ts, xy, np.full(len(ts), label, dtype=np.int64)


def generate_events(scene: Scene, traj: AnalyticTrajectory, camera: CameraModel,
                    extrinsics: Transform, cfg: SimConfig, seed: int = 0) -> EventStream:
    """Labeled event stream for the scene along the trajectory.

    Jitter, timestamp jitter, and spurious events are applied afterwards
    when enabled; spurious events carry label -1.  The stream is sorted by
    timestamp and fully reproducible from the seed.
    """
    rng = np.random.default_rng(seed)
    parts_t, parts_xy, parts_lbl = [], [], []
    for label, line in enumerate(scene.lines):
        ts, xy, lbl = _line_event_sweep(line, label, traj, camera, extrinsics, cfg, rng)
        parts_t.append(ts)
        parts_xy.append(xy)
        parts_lbl.append(lbl)
    ts = np.concatenate(parts_t) if parts_t else np.empty(0)
    xy = np.vstack(parts_xy) if parts_xy else np.empty((0, 2))
    labels = np.concatenate(parts_lbl) if parts_lbl else np.empty(0, dtype=np.int64)

    if cfg.event_jitter_px > 0 and len(ts):
        xy = xy + rng.normal(0.0, cfg.event_jitter_px, xy.shape)
        keep = (
            (xy[:, 0] >= 0) & (xy[:, 0] < camera.width)
            & (xy[:, 1] >= 0) & (xy[:, 1] < camera.height)
        )
        ts, xy, labels = ts[keep], xy[keep], labels[keep]
    if cfg.event_time_jitter_s > 0 and len(ts):
        ts = np.clip(ts + rng.normal(0.0, cfg.event_time_jitter_s, len(ts)), 0.0, traj.duration)
    if cfg.spurious_rate > 0:
        n_spur = rng.poisson(cfg.spurious_rate * camera.width * camera.height * traj.duration)
        if n_spur:
            ts = np.concatenate([ts, rng.uniform(0.0, traj.duration, n_spur)])
            xy = np.vstack([
                xy,
                np.column_stack([
                    rng.uniform(0, camera.width, n_spur),
                    rng.uniform(0, camera.height, n_spur),
                ]),
            ])
            labels = np.concatenate([labels, np.full(n_spur, -1, dtype=np.int64)])

    order = np.argsort(ts, kind="stable")
    ts, xy, labels = ts[order], xy[order], labels[order]
    polarity = rng.integers(0, 2, len(ts))
    return EventStream(ts, xy[:, 0], xy[:, 1], polarity, labels)


def ground_truth_states(traj: AnalyticTrajectory, taus):
    """Exact per-window states (zero bias corrections) at the given times."""
    from .backend.problem import NavStateNode
    from .imu import BiasState

    taus = np.asarray(taus, dtype=float)
    rots = traj.rotation(taus)
    poss = traj.position(taus)
    vels = traj.velocity(taus)
    return [
        NavStateNode(
            timestamp=float(t),
            rotation=rots[i],
            position=poss[i],
            velocity=vels[i],
            bias=BiasState(),
        )
        for i, t in enumerate(taus)
    ]
