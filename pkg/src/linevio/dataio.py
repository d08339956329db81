"""Plain-text dataset files and the declarative run configuration.

File conventions (whitespace-separated columns, one record per line):

    events.txt       t x y p
    imu.txt          t ax ay az gx gy gz
    groundtruth.txt  t px py pz qx qy qz qw
    trajectory.txt   t px py pz qx qy qz qw vx vy vz   (estimator output)
    calib.txt        fx fy cx cy / k1 k2 p1 p2 / width height /
                     qx qy qz qw / px py pz             (five lines, # comments ok)
    labels.txt       one line id per event (-1 for noise)

Event and IMU readers stream in bounded chunks so peak memory does not
depend on file size.  The run configuration is an INI-style file covering
every tunable threshold; `default_config_text()` documents each default.
"""
from __future__ import annotations

import configparser
import io as _io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backend.problem import ResidualWeights
from .errors import NonMonotoneTimestamps, ParseError
from .evaluation import TrajectorySample
from .frontend import FrontendConfig
from .geometry import CameraModel, Event, Transform, quat_to_rot, rot_to_quat
from .imu import ImuData, ImuNoise, ImuSample, WorldModel
from .sim import EventStream, SimConfig

EVENT_CHUNK = 65536
TIME_DISORDER_TOLERANCE = 1e-3
_EVENT_FMT = "{:.9f} {:.6f} {:.6f} {:d}\n"
_IMU_FMT = "{:.9f}" + " {:.9f}" * 6 + "\n"
_POSE_FMT = "{:.9f}" + " {:.9f}" * 7 + "\n"
_TRAJ_FMT = "{:.9f}" + " {:.9f}" * 10 + "\n"


def _parse_floats(path, line_no, line, n_cols):
    parts = line.split()
    if len(parts) != n_cols:
        raise ParseError(path, line_no, f"expected {n_cols} columns, got {len(parts)}")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise ParseError(path, line_no, str(exc)) from exc


def read_event_chunks(path, chunk: int = EVENT_CHUNK):
    """Yield EventStream chunks; validates timestamp order within 1 ms."""
    prev_t = -np.inf
    buf_t, buf_x, buf_y, buf_p = [], [], [], []
    with open(path, "r") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            t, x, y, p = _parse_floats(path, line_no, line, 4)
            if t < prev_t - TIME_DISORDER_TOLERANCE:
                raise NonMonotoneTimestamps(
                    f"{path}:{line_no}: timestamp {t} precedes {prev_t} by more than 1 ms"
                )
            prev_t = max(prev_t, t)
            buf_t.append(t)
            buf_x.append(x)
            buf_y.append(y)
            buf_p.append(int(p))
            if len(buf_t) >= chunk:
                yield EventStream(np.array(buf_t), np.array(buf_x), np.array(buf_y), np.array(buf_p))
                buf_t, buf_x, buf_y, buf_p = [], [], [], []
    if buf_t:
        yield EventStream(np.array(buf_t), np.array(buf_x), np.array(buf_y), np.array(buf_p))


def read_events(path):
    """Stream Event records one at a time (never fully resident)."""
    for chunk in read_event_chunks(path):
        for i in range(len(chunk)):
            yield Event(float(chunk.ts[i]), float(chunk.x[i]), float(chunk.y[i]), int(chunk.polarity[i]))


def load_events(path) -> EventStream:
    chunks = list(read_event_chunks(path))
    if not chunks:
        return EventStream(np.empty(0), np.empty(0), np.empty(0), np.empty(0, dtype=np.int64))
    return EventStream(
        np.concatenate([c.ts for c in chunks]),
        np.concatenate([c.x for c in chunks]),
        np.concatenate([c.y for c in chunks]),
        np.concatenate([c.polarity for c in chunks]),
    )


def write_events(path, stream: EventStream):
    with open(path, "w") as fh:
        for i in range(len(stream)):
            fh.write(_EVENT_FMT.format(stream.ts[i], stream.x[i], stream.y[i], int(stream.polarity[i])))


def read_imu(path):
    """Stream ImuSample records."""
    prev_t = -np.inf
    with open(path, "r") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = _parse_floats(path, line_no, line, 7)
            if vals[0] <= prev_t:
                raise NonMonotoneTimestamps(f"{path}:{line_no}: non-increasing timestamp")
            prev_t = vals[0]
            yield ImuSample(vals[0], np.array(vals[1:4]), np.array(vals[4:7]))


def load_imu(path) -> ImuData:
    ts, acc, gyr = [], [], []
    for s in read_imu(path):
        ts.append(s.t)
        acc.append(s.accel)
        gyr.append(s.gyro)
    return ImuData(np.array(ts), np.array(acc) if acc else np.zeros((0, 3)),
                   np.array(gyr) if gyr else np.zeros((0, 3)))


def write_imu(path, data: ImuData):
    with open(path, "w") as fh:
        for i in range(len(data)):
            fh.write(_IMU_FMT.format(data.ts[i], *data.accel[i], *data.gyro[i]))


def _pose_from_cols(path, line_no, vals):
    q = np.array(vals[4:8])
    norm = np.linalg.norm(q)
    if abs(norm - 1.0) > 1e-3:
        raise ParseError(path, line_no, f"quaternion norm defect {abs(norm - 1.0):.3e}")
    return Transform(quat_to_rot(q / norm), np.array(vals[1:4]))


def read_trajectory(path) -> list[TrajectorySample]:
    """Pose file (8 columns) or estimator output (11 columns, with velocity)."""
    out = []
    with open(path, "r") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) == 8:
                vals = _parse_floats(path, line_no, line, 8)
                vel = None
            elif len(parts) == 11:
                vals = _parse_floats(path, line_no, line, 11)
                vel = np.array(vals[8:11])
            else:
                raise ParseError(path, line_no, f"expected 8 or 11 columns, got {len(parts)}")
            out.append(TrajectorySample(vals[0], _pose_from_cols(path, line_no, vals), vel))
    if len(out) >= 2 and any(out[i + 1].t < out[i].t for i in range(len(out) - 1)):
        raise NonMonotoneTimestamps(f"{path}: trajectory not time-sorted")
    return out


read_groundtruth = read_trajectory


def write_groundtruth(path, samples):
    with open(path, "w") as fh:
        for s in samples:
            q = s.pose.quat()
            fh.write(_POSE_FMT.format(s.t, *s.pose.translation, *q))


def write_trajectory(path, samples):
    """Estimator output: t, position, quaternion (xyzw), velocity."""
    with open(path, "w") as fh:
        for s in samples:
            q = s.pose.quat()
            vel = s.velocity if s.velocity is not None else np.zeros(3)
            fh.write(_TRAJ_FMT.format(s.t, *s.pose.translation, *q, *vel))


def read_calibration(path):
    """(CameraModel, body-to-camera Transform) from the five-line format."""
    rows = []
    with open(path, "r") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append((line_no, line))
    if len(rows) != 5:
        raise ParseError(path, rows[-1][0] if rows else 0, f"expected 5 data lines, got {len(rows)}")
    fx, fy, cx, cy = _parse_floats(path, rows[0][0], rows[0][1], 4)
    k1, k2, p1, p2 = _parse_floats(path, rows[1][0], rows[1][1], 4)
    width, height = _parse_floats(path, rows[2][0], rows[2][1], 2)
    q = np.array(_parse_floats(path, rows[3][0], rows[3][1], 4))
    p = np.array(_parse_floats(path, rows[4][0], rows[4][1], 3))
    norm = np.linalg.norm(q)
    if abs(norm - 1.0) > 1e-3:
        raise ParseError(path, rows[3][0], f"quaternion norm defect {abs(norm - 1.0):.3e}")
    camera = CameraModel(fx, fy, cx, cy, int(width), int(height), k1, k2, p1, p2)
    return camera, Transform(quat_to_rot(q / norm), p)


def write_calibration(path, camera: CameraModel, extrinsics: Transform):
    q = rot_to_quat(extrinsics.rotation)
    with open(path, "w") as fh:
        fh.write("# fx fy cx cy\n")
        fh.write(f"{camera.fx:.9f} {camera.fy:.9f} {camera.cx:.9f} {camera.cy:.9f}\n")
        fh.write("# k1 k2 p1 p2\n")
        fh.write(f"{camera.k1:.9f} {camera.k2:.9f} {camera.p1:.9f} {camera.p2:.9f}\n")
        fh.write("# width height\n")
        fh.write(f"{camera.width} {camera.height}\n")
        fh.write("# body-to-camera rotation qx qy qz qw\n")
        fh.write(" ".join(f"{v:.9f}" for v in q) + "\n")
        fh.write("# body-to-camera translation px py pz\n")
        fh.write(" ".join(f"{v:.9f}" for v in extrinsics.translation) + "\n")


def write_labels(path, labels):
    with open(path, "w") as fh:
        for v in labels:
            fh.write(f"{int(v)}\n")


def load_labels(path) -> np.ndarray:
    with open(path, "r") as fh:
        return np.array([int(line) for line in fh if line.strip()], dtype=np.int64)


# --- run configuration --------------------------------------------------------


@dataclass
class RunConfig:
    frontend: FrontendConfig
    weights: ResidualWeights
    imu_noise: ImuNoise
    world: WorldModel
    sim: SimConfig
    sim_duration_s: float = 5.0
    sim_seed: int = 0
    nominal_depth_m: float = 2.0
    min_track_events: int = 50
    batch_cutoff_s: float = 24.0
    sliding_window: int = 30
    mode: str = "hybrid"
    groundtruth_rate_hz: float = 200.0


def default_config_text() -> str:
    return """\
# Run configuration: every tunable constant, with its default.
# Values are overridable; CLI flags win over this file.

[frontend]
# seconds per pixel-equivalent for the event time axis; auto = calibrate on
# the first window so its span maps to ~40 pixel-equivalents
c = auto
# spatio-temporal neighbor radius (pixel-equivalent units)
neighbor_radius = 3.0
# colinearity threshold on x-y normals, in (0, 1)
n_thr = 0.95
# point-to-line image-space threshold (pixels)
e_thr = 1.5
# discard clusters smaller than this
min_cluster_size = 30
# trailing events appended to the next window for track stitching
stitch_tail = 2000
# events per estimation window
window_events = 200000

[backend]
# whitening scales of the scalar residual families
sigma_line_px = 1.0
sigma_attraction = 50.0
sigma_repulsion_px = 1.0
# bias random-walk scales (per sqrt-second)
sigma_bias_accel_rw = 1e-3
sigma_bias_gyro_rw = 1e-4
# depth used when bootstrapping a new line landmark (meters)
nominal_depth_m = 2.0
# ignore tracks with fewer events per window than this
min_track_events = 50
# optimization schedule: full-batch | sliding | hybrid
mode = hybrid
# data-time threshold for switching from full batch to sliding (seconds)
batch_cutoff_s = 24.0
# sliding-window length in event windows
sliding_window = 30
# robust loss: none | huber
robust_loss = none
huber_scale_px = 2.0

[imu]
# white-noise densities used for preintegration whitening (per sqrt-Hz)
accel_noise_density = 2e-2
gyro_noise_density = 2e-3
# world gravity vector (m/s^2)
gravity = 0, 0, -9.81

[sim]
duration_s = 5.0
seed = 0
imu_rate = 1000.0
# emit an event after this much projected edge motion (pixels)
contrast_step_px = 0.5
# spacing of tracked points along each segment (pixels)
edge_sample_spacing_px = 1.0
# bound on projected motion per sweep step (pixels)
max_sweep_step_px = 0.25
# noise toggles (all zero = exact oracle stream)
accel_noise_density = 0.0
gyro_noise_density = 0.0
accel_bias_const = 0.0
gyro_bias_const = 0.0
accel_bias_rw = 0.0
gyro_bias_rw = 0.0
event_jitter_px = 0.0
event_time_jitter_s = 0.0
spurious_rate = 0.0
# ground-truth file sampling rate (Hz)
groundtruth_rate_hz = 200.0
"""


def _get(cp, section, key, cast, default):
    if not cp.has_option(section, key):
        return default
    raw = cp.get(section, key).strip()
    return cast(raw)


def _vec3(raw: str) -> np.ndarray:
    return np.array([float(v) for v in raw.replace(",", " ").split()])


def load_config(path=None) -> RunConfig:
    """Parse the INI config; missing file or keys fall back to defaults."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(default_config_text())
    if path is not None:
        with open(path, "r") as fh:
            cp.read_file(fh)

    c_raw = cp.get("frontend", "c").strip()
    frontend = FrontendConfig(
        c=None if c_raw == "auto" else float(c_raw),
        neighbor_radius=cp.getfloat("frontend", "neighbor_radius"),
        n_thr=cp.getfloat("frontend", "n_thr"),
        e_thr=cp.getfloat("frontend", "e_thr"),
        min_cluster_size=cp.getint("frontend", "min_cluster_size"),
        stitch_tail=cp.getint("frontend", "stitch_tail"),
        window_size_n=cp.getint("frontend", "window_events"),
    )
    weights = ResidualWeights(
        sigma_line_px=cp.getfloat("backend", "sigma_line_px"),
        sigma_attraction=cp.getfloat("backend", "sigma_attraction"),
        sigma_repulsion_px=cp.getfloat("backend", "sigma_repulsion_px"),
        sigma_bias_accel_rw=cp.getfloat("backend", "sigma_bias_accel_rw"),
        sigma_bias_gyro_rw=cp.getfloat("backend", "sigma_bias_gyro_rw"),
    )
    imu_noise = ImuNoise(
        accel_density=cp.getfloat("imu", "accel_noise_density"),
        gyro_density=cp.getfloat("imu", "gyro_noise_density"),
    )
    world = WorldModel(_vec3(cp.get("imu", "gravity")))
    sim = SimConfig(
        imu_rate=cp.getfloat("sim", "imu_rate"),
        contrast_step_px=cp.getfloat("sim", "contrast_step_px"),
        edge_sample_spacing_px=cp.getfloat("sim", "edge_sample_spacing_px"),
        max_sweep_step_px=cp.getfloat("sim", "max_sweep_step_px"),
        accel_noise_density=cp.getfloat("sim", "accel_noise_density"),
        gyro_noise_density=cp.getfloat("sim", "gyro_noise_density"),
        accel_bias_const=cp.getfloat("sim", "accel_bias_const"),
        gyro_bias_const=cp.getfloat("sim", "gyro_bias_const"),
        accel_bias_rw=cp.getfloat("sim", "accel_bias_rw"),
        gyro_bias_rw=cp.getfloat("sim", "gyro_bias_rw"),
        event_jitter_px=cp.getfloat("sim", "event_jitter_px"),
        event_time_jitter_s=cp.getfloat("sim", "event_time_jitter_s"),
        spurious_rate=cp.getfloat("sim", "spurious_rate"),
    )
    return RunConfig(
        frontend=frontend,
        weights=weights,
        imu_noise=imu_noise,
        world=world,
        sim=sim,
        sim_duration_s=cp.getfloat("sim", "duration_s"),
        sim_seed=cp.getint("sim", "seed"),
        nominal_depth_m=cp.getfloat("backend", "nominal_depth_m"),
        min_track_events=cp.getint("backend", "min_track_events"),
        batch_cutoff_s=cp.getfloat("backend", "batch_cutoff_s"),
        sliding_window=cp.getint("backend", "sliding_window"),
        mode=cp.get("backend", "mode").strip(),
        groundtruth_rate_hz=cp.getfloat("sim", "groundtruth_rate_hz"),
    )
