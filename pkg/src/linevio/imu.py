"""Inertial preintegration with arbitrary-timestamp queries.

Raw IMU samples over a window [t_start, t_end] are integrated once with the
bias priors using a midpoint rule on linearly interpolated measurements.
Per-sample partial integrals are cached so that a query at any interior
timestamp costs a binary search plus a single partial step.  First-order
bias-correction Jacobians are accumulated alongside, which is what the
optimizer consumes instead of re-integrating.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientCoverage, NonMonotoneTimestamps, OutOfWindow
from .geometry import hat, so3_exp, so3_right_jacobian

_EDGE_GAP_SLACK = 1.000001


@dataclass(frozen=True)
class ImuSample:
    """One accelerometer + gyroscope reading (proper acceleration, rad/s)."""

    t: float
    accel: np.ndarray
    gyro: np.ndarray


@dataclass
class ImuData:
    """Column-array view of an IMU stream; timestamps strictly increasing."""

    ts: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray

    def __post_init__(self):
        self.ts = np.asarray(self.ts, dtype=float)
        self.accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        if not (len(self.ts) == len(self.accel) == len(self.gyro)):
            raise ValueError("mismatched IMU column lengths")
        if len(self.ts) >= 2 and np.any(np.diff(self.ts) <= 0):
            raise NonMonotoneTimestamps("IMU timestamps must be strictly increasing")

    @classmethod
    def from_samples(cls, samples) -> "ImuData":
        samples = list(samples)
        return cls(
            np.array([s.t for s in samples]),
            np.array([s.accel for s in samples]),
            np.array([s.gyro for s in samples]),
        )

    def __len__(self) -> int:
        return len(self.ts)

    def slice(self, t0: float, t1: float, pad: int = 2) -> "ImuData":
        """Samples covering [t0, t1] with a little margin on both sides."""
        lo = max(0, int(np.searchsorted(self.ts, t0, side="right")) - pad)
        hi = min(len(self.ts), int(np.searchsorted(self.ts, t1, side="left")) + pad)
        return ImuData(self.ts[lo:hi], self.accel[lo:hi], self.gyro[lo:hi])


@dataclass(frozen=True)
class BiasState:
    """Bias priors used at integration time plus estimated corrections."""

    accel_prior: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_prior: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_correction: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_correction: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("accel_prior", "gyro_prior", "accel_correction", "gyro_correction"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))

    @property
    def accel_effective(self) -> np.ndarray:
        return self.accel_prior + self.accel_correction

    @property
    def gyro_effective(self) -> np.ndarray:
        return self.gyro_prior + self.gyro_correction


@dataclass(frozen=True)
class WorldModel:
    """Fixed world-frame gravity vector."""

    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))

    def __post_init__(self):
        object.__setattr__(self, "gravity", np.asarray(self.gravity, dtype=float).reshape(3))


@dataclass(frozen=True)
class ImuNoise:
    """White-noise densities (per sqrt-Hz); defaults sized for a DAVIS-class IMU."""

    accel_density: float = 2e-2
    gyro_density: float = 2e-3


@dataclass
class SegmentQuery:
    """Bias-prior deltas and correction Jacobians at query times (batched)."""

    dt: np.ndarray
    delta_p: np.ndarray
    delta_v: np.ndarray
    delta_rot: np.ndarray
    j_p_ba: np.ndarray
    j_p_bg: np.ndarray
    j_v_ba: np.ndarray
    j_v_bg: np.ndarray
    j_r_bg: np.ndarray


class PreintegratedSegment:
    """Preintegrated inertial increments over one window, queryable in time.

    Immutable after construction; concurrent read queries are safe.
    """

    def __init__(self, t_start, t_end, knot_ts, knots, signal_ts, accel0, gyro0, covariance, bias_prior):
        self.t_start = float(t_start)
        self.t_end = float(t_end)
        self._knot_ts = knot_ts
        (self._rot, self._vel, self._pos,
         self._j_r_bg, self._j_v_ba, self._j_v_bg, self._j_p_ba, self._j_p_bg) = knots
        self._sig_ts = signal_ts
        self._accel0 = accel0
        self._gyro0 = gyro0
        self.covariance = covariance
        self.bias_prior = bias_prior
        self._end_query = None

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    def _interp(self, ts):
        a = np.stack([np.interp(ts, self._sig_ts, self._accel0[:, i]) for i in range(3)], axis=-1)
        g = np.stack([np.interp(ts, self._sig_ts, self._gyro0[:, i]) for i in range(3)], axis=-1)
        return a, g

    def query(self, ts) -> SegmentQuery:
        """Deltas + bias Jacobians at times inside the window (scalar or array)."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        slack = 1e-9 + 1e-12 * max(abs(self.t_start), abs(self.t_end))
        if np.any(ts < self.t_start - slack) or np.any(ts > self.t_end + slack):
            bad = ts[(ts < self.t_start - slack) | (ts > self.t_end + slack)][0]
            raise OutOfWindow(
                f"query t={bad:.6f} outside [{self.t_start:.6f}, {self.t_end:.6f}]"
            )
        ts = np.clip(ts, self.t_start, self.t_end)
        idx = np.clip(np.searchsorted(self._knot_ts, ts, side="right") - 1, 0, len(self._knot_ts) - 2)
        t_k = self._knot_ts[idx]
        dt = ts - t_k
        a_mid, w_mid = self._interp(t_k + 0.5 * dt)

        exp_full = so3_exp(w_mid * dt[:, None])
        exp_half = so3_exp(w_mid * (0.5 * dt)[:, None])
        jr_full = so3_right_jacobian(w_mid * dt[:, None])
        jr_half = so3_right_jacobian(w_mid * (0.5 * dt)[:, None])

        rot_k = self._rot[idx]
        rot_half = rot_k @ exp_half
        acc_rot = np.einsum("nij,nj->ni", rot_half, a_mid)

        delta_rot = rot_k @ exp_full
        delta_v = self._vel[idx] + acc_rot * dt[:, None]
        delta_p = self._pos[idx] + self._vel[idx] * dt[:, None] + 0.5 * acc_rot * dt[:, None] ** 2

        exp_full_t = np.swapaxes(exp_full, -1, -2)
        exp_half_t = np.swapaxes(exp_half, -1, -2)
        j_r = exp_full_t @ self._j_r_bg[idx] - jr_full * dt[:, None, None]
        j_half = exp_half_t @ self._j_r_bg[idx] - jr_half * (0.5 * dt)[:, None, None]
        coupling = rot_half @ hat(a_mid) @ j_half
        j_v_ba = self._j_v_ba[idx] - rot_half * dt[:, None, None]
        j_v_bg = self._j_v_bg[idx] - coupling * dt[:, None, None]
        j_p_ba = self._j_p_ba[idx] + self._j_v_ba[idx] * dt[:, None, None] - 0.5 * rot_half * (dt**2)[:, None, None]
        j_p_bg = self._j_p_bg[idx] + self._j_v_bg[idx] * dt[:, None, None] - 0.5 * coupling * (dt**2)[:, None, None]

        return SegmentQuery(
            dt=ts - self.t_start,
            delta_p=delta_p,
            delta_v=delta_v,
            delta_rot=delta_rot,
            j_p_ba=j_p_ba,
            j_p_bg=j_p_bg,
            j_v_ba=j_v_ba,
            j_v_bg=j_v_bg,
            j_r_bg=j_r,
        )

    def query_end(self) -> SegmentQuery:
        """Cached query at the window end (used by the inter-node residual)."""
        if self._end_query is None:
            self._end_query = self.query(self.t_end)
        return self._end_query

    def delta_p(self, t) -> np.ndarray:
        return self.query(t).delta_p[0]

    def delta_v(self, t) -> np.ndarray:
        return self.query(t).delta_v[0]

    def delta_rot(self, t) -> np.ndarray:
        return self.query(t).delta_rot[0]


def apply_bias_correction(q: SegmentQuery, correction: BiasState):
    """First-order corrected (delta_p, delta_v, delta_rot), batched."""
    ca = correction.accel_correction
    cg = correction.gyro_correction
    dp = q.delta_p + q.j_p_ba @ ca + q.j_p_bg @ cg
    dv = q.delta_v + q.j_v_ba @ ca + q.j_v_bg @ cg
    drot = q.delta_rot @ so3_exp(q.j_r_bg @ cg)
    return dp, dv, drot


def query_corrected(seg: PreintegratedSegment, t: float, correction: BiasState):
    """Deltas at time t with the first-order bias correction applied."""
    q = seg.query(t)
    dp, dv, drot = apply_bias_correction(q, correction)
    return dp[0], dv[0], drot[0]


def preintegrate(samples, t_start: float, t_end: float,
                 bias_prior: BiasState | None = None,
                 noise: ImuNoise | None = None) -> PreintegratedSegment:
    """Integrate IMU samples over [t_start, t_end] into a queryable segment.

    The samples must cover the window up to at most one sample period of
    slack at each end (edge values are held constant over such gaps).
    """
    if t_end <= t_start:
        raise ValueError("window must have positive duration")
    data = samples if isinstance(samples, ImuData) else ImuData.from_samples(samples)
    if len(data) < 2:
        raise InsufficientCoverage("need at least 2 IMU samples")
    period = float(np.median(np.diff(data.ts)))
    if data.ts[0] > t_start + period * _EDGE_GAP_SLACK or data.ts[-1] < t_end - period * _EDGE_GAP_SLACK:
        raise InsufficientCoverage(
            f"samples span [{data.ts[0]:.6f}, {data.ts[-1]:.6f}] but window is "
            f"[{t_start:.6f}, {t_end:.6f}] (allowed edge gap {period:.6f})"
        )
    bias_prior = bias_prior or BiasState()
    noise = noise or ImuNoise()

    accel0 = data.accel - bias_prior.accel_prior
    gyro0 = data.gyro - bias_prior.gyro_prior

    inner = (data.ts > t_start) & (data.ts < t_end)
    knot_ts = np.concatenate([[t_start], data.ts[inner], [t_end]])
    n_steps = len(knot_ts) - 1
    dts = np.diff(knot_ts)
    mids = knot_ts[:-1] + 0.5 * dts
    a_mid = np.stack([np.interp(mids, data.ts, accel0[:, i]) for i in range(3)], axis=-1)
    w_mid = np.stack([np.interp(mids, data.ts, gyro0[:, i]) for i in range(3)], axis=-1)

    exp_full = so3_exp(w_mid * dts[:, None])
    exp_half = so3_exp(w_mid * (0.5 * dts)[:, None])
    jr_full = so3_right_jacobian(w_mid * dts[:, None])
    jr_half = so3_right_jacobian(w_mid * (0.5 * dts)[:, None])
    hat_a = hat(a_mid)

    n = n_steps + 1
    rot = np.empty((n, 3, 3))
    vel = np.empty((n, 3))
    pos = np.empty((n, 3))
    j_r_bg = np.empty((n, 3, 3))
    j_v_ba = np.empty((n, 3, 3))
    j_v_bg = np.empty((n, 3, 3))
    j_p_ba = np.empty((n, 3, 3))
    j_p_bg = np.empty((n, 3, 3))
    rot[0] = np.eye(3)
    vel[0] = 0.0
    pos[0] = 0.0
    for arr in (j_r_bg, j_v_ba, j_v_bg, j_p_ba, j_p_bg):
        arr[0] = 0.0

    cov = np.zeros((9, 9))
    var_a = noise.accel_density**2
    var_g = noise.gyro_density**2
    amat = np.eye(9)
    bmat = np.zeros((9, 6))

    for k in range(n_steps):
        dt = dts[k]
        rot_half = rot[k] @ exp_half[k]
        acc_rot = rot_half @ a_mid[k]
        coupling_half = rot_half @ hat_a[k]

        pos[k + 1] = pos[k] + vel[k] * dt + 0.5 * acc_rot * dt * dt
        vel[k + 1] = vel[k] + acc_rot * dt
        rot[k + 1] = rot[k] @ exp_full[k]

        j_half = exp_half[k].T @ j_r_bg[k] - jr_half[k] * (0.5 * dt)
        coupling = coupling_half @ j_half
        j_p_ba[k + 1] = j_p_ba[k] + j_v_ba[k] * dt - 0.5 * rot_half * dt * dt
        j_p_bg[k + 1] = j_p_bg[k] + j_v_bg[k] * dt - 0.5 * coupling * dt * dt
        j_v_ba[k + 1] = j_v_ba[k] - rot_half * dt
        j_v_bg[k + 1] = j_v_bg[k] - coupling * dt
        j_r_bg[k + 1] = exp_full[k].T @ j_r_bg[k] - jr_full[k] * dt

        # Error-state propagation in (p, v, phi) order.
        amat[0:3, 3:6] = np.eye(3) * dt
        amat[0:3, 6:9] = -0.5 * coupling_half * dt * dt
        amat[3:6, 6:9] = -coupling_half * dt
        amat[6:9, 6:9] = exp_full[k].T
        bmat[0:3, 0:3] = 0.5 * rot_half * dt * dt
        bmat[3:6, 0:3] = rot_half * dt
        bmat[6:9, 3:6] = jr_full[k] * dt
        cov = amat @ cov @ amat.T
        cov[0:3, 0:3] += bmat[0:3, 0:3] @ bmat[0:3, 0:3].T * (var_a / dt)
        cov[0:3, 3:6] += bmat[0:3, 0:3] @ bmat[3:6, 0:3].T * (var_a / dt)
        cov[3:6, 0:3] += bmat[3:6, 0:3] @ bmat[0:3, 0:3].T * (var_a / dt)
        cov[3:6, 3:6] += bmat[3:6, 0:3] @ bmat[3:6, 0:3].T * (var_a / dt)
        cov[6:9, 6:9] += bmat[6:9, 3:6] @ bmat[6:9, 3:6].T * (var_g / dt)
        amat[0:3, 3:6] = 0.0
        amat[0:3, 6:9] = 0.0
        amat[3:6, 6:9] = 0.0

    cov = 0.5 * (cov + cov.T)
    return PreintegratedSegment(
        t_start,
        t_end,
        knot_ts,
        (rot, vel, pos, j_r_bg, j_v_ba, j_v_bg, j_p_ba, j_p_bg),
        data.ts,
        accel0,
        gyro0,
        cov,
        bias_prior,
    )


def propagate_state(node, seg: PreintegratedSegment, t: float,
                    correction: BiasState | None = None,
                    world: WorldModel | None = None):
    """World-frame (position, velocity, rotation) at time t inside the window.

    `node` provides .timestamp, .rotation, .position, .velocity at the window
    start; the gravity terms use (t - timestamp) directly.
    """
    world = world or WorldModel()
    correction = correction or BiasState()
    if abs(node.timestamp - seg.t_start) > 1e-9 + 1e-12 * abs(seg.t_start):
        raise ValueError("node timestamp does not match segment start")
    dp, dv, drot = query_corrected(seg, t, correction)
    dt = t - node.timestamp
    g = world.gravity
    pos = node.position + dt * node.velocity + 0.5 * dt * dt * g + node.rotation @ dp
    vel = node.velocity + dt * g + node.rotation @ dv
    rot = node.rotation @ drot
    return pos, vel, rot
