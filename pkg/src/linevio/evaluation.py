"""Trajectory alignment and error metrics.

Alignment is 4-DoF (translation plus rotation about the gravity axis) over
the first K time-associated pose pairs; overall errors are RMS of the
translation norm and of the geodesic rotation angle.  The segment-based
relative metric cuts sub-trajectories at fixed fractions of the
ground-truth path length, aligns each at its start pose, and reports the
end-point error distributions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientOverlap, SegmentTooLong
from .geometry import Transform, so3_exp, so3_log

DEFAULT_TIME_TOLERANCE = 0.005
DEFAULT_FIRST_K = 50
DEFAULT_T_MAX = 40.0
SEGMENT_FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5)


@dataclass(frozen=True)
class TrajectorySample:
    t: float
    pose: Transform
    velocity: np.ndarray | None = None


def _as_arrays(traj):
    """(ts, rotations, positions) from a list of TrajectorySample."""
    ts = np.array([s.t for s in traj], dtype=float)
    rots = np.stack([s.pose.rotation for s in traj]) if traj else np.zeros((0, 3, 3))
    poss = np.stack([s.pose.translation for s in traj]) if traj else np.zeros((0, 3))
    if len(ts) >= 2 and np.any(np.diff(ts) < 0):
        raise ValueError("trajectory samples must be time-sorted")
    return ts, rots, poss


def associate_times(t_est, t_ref, tolerance: float = DEFAULT_TIME_TOLERANCE):
    """Nearest-neighbor index pairs (i_est, i_ref) within the tolerance."""
    t_est = np.asarray(t_est, dtype=float)
    t_ref = np.asarray(t_ref, dtype=float)
    if len(t_est) == 0 or len(t_ref) == 0:
        return np.empty((0, 2), dtype=np.int64)
    idx = np.searchsorted(t_ref, t_est)
    idx = np.clip(idx, 1, len(t_ref) - 1)
    left = t_ref[idx - 1]
    right = t_ref[idx]
    nearest = np.where(np.abs(t_est - left) <= np.abs(t_est - right), idx - 1, idx)
    ok = np.abs(t_est - t_ref[nearest]) <= tolerance
    return np.column_stack([np.flatnonzero(ok), nearest[ok]])


def _gravity_basis(gravity_axis) -> np.ndarray:
    """Orthonormal basis whose third column is the (unit) gravity axis."""
    axis = np.asarray(gravity_axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0])
    if abs(axis @ helper) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    b1 = np.cross(axis, helper)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(axis, b1)
    return np.column_stack([b1, b2, axis])


def _yaw_rotation(psi: float, basis: np.ndarray) -> np.ndarray:
    return basis @ so3_exp(np.array([0.0, 0.0, psi])) @ basis.T


def align_posyaw(estimate, ground_truth, first_k: int = DEFAULT_FIRST_K,
                 gravity_axis=(0.0, 0.0, 1.0),
                 tolerance: float = DEFAULT_TIME_TOLERANCE) -> Transform:
    """Closed-form yaw + translation aligning the estimate onto the truth.

    Uses the first `first_k` time-associated pairs; raises
    InsufficientOverlap when fewer pairs exist.
    """
    t_e, _, p_e = _as_arrays(estimate)
    t_g, _, p_g = _as_arrays(ground_truth)
    pairs = associate_times(t_e, t_g, tolerance)
    if len(pairs) < first_k:
        raise InsufficientOverlap(
            f"only {len(pairs)} associated pairs, need {first_k}"
        )
    pairs = pairs[:first_k]
    basis = _gravity_basis(gravity_axis)
    pe = p_e[pairs[:, 0]] @ basis
    pg = p_g[pairs[:, 1]] @ basis
    me = pe.mean(axis=0)
    mg = pg.mean(axis=0)
    c = (pe - me).T @ (pg - mg)
    psi = float(np.arctan2(c[0, 1] - c[1, 0], c[0, 0] + c[1, 1]))
    rot = _yaw_rotation(psi, basis)
    trans = p_g[pairs[:, 1]].mean(axis=0) - rot @ p_e[pairs[:, 0]].mean(axis=0)
    return Transform(rot, trans)


def align_se3(estimate, ground_truth, first_k: int = DEFAULT_FIRST_K,
              tolerance: float = DEFAULT_TIME_TOLERANCE) -> Transform:
    """Full 6-DoF least-squares alignment (no scale); not the default."""
    t_e, _, p_e = _as_arrays(estimate)
    t_g, _, p_g = _as_arrays(ground_truth)
    pairs = associate_times(t_e, t_g, tolerance)
    if len(pairs) < first_k:
        raise InsufficientOverlap(f"only {len(pairs)} associated pairs, need {first_k}")
    pairs = pairs[:first_k]
    pe = p_e[pairs[:, 0]]
    pg = p_g[pairs[:, 1]]
    c = (pe - pe.mean(axis=0)).T @ (pg - pg.mean(axis=0))
    u, _, vt = np.linalg.svd(c)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    trans = pg.mean(axis=0) - rot @ pe.mean(axis=0)
    return Transform(rot, trans)


def apply_alignment(alignment: Transform, trajectory):
    return [
        TrajectorySample(
            s.t,
            Transform(alignment.rotation @ s.pose.rotation,
                      alignment.apply(s.pose.translation)),
            None if s.velocity is None else alignment.rotation @ s.velocity,
        )
        for s in trajectory
    ]


def rmse(estimate_aligned, ground_truth, t_max: float = np.inf,
         tolerance: float = DEFAULT_TIME_TOLERANCE):
    """(translation RMSE in meters, rotation RMSE in degrees).

    Pairs later than `t_max` after the ground-truth start are excluded.
    """
    t_e, r_e, p_e = _as_arrays(estimate_aligned)
    t_g, r_g, p_g = _as_arrays(ground_truth)
    pairs = associate_times(t_e, t_g, tolerance)
    if len(pairs) == 0:
        raise InsufficientOverlap("no associated pairs")
    keep = t_g[pairs[:, 1]] - t_g[0] <= t_max
    pairs = pairs[keep]
    if len(pairs) == 0:
        raise InsufficientOverlap("no associated pairs below t_max")
    dp = p_e[pairs[:, 0]] - p_g[pairs[:, 1]]
    e_t = float(np.sqrt(np.mean(np.sum(dp * dp, axis=1))))
    angles = np.array([
        np.linalg.norm(so3_log(r_g[j].T @ r_e[i])) for i, j in pairs
    ])
    e_r = float(np.degrees(np.sqrt(np.mean(angles**2))))
    return e_t, e_r


def _start_alignment(rot_g, pos_g, rot_e, pos_e, basis):
    """Yaw + translation matching one estimate pose onto one truth pose."""
    rel = rot_g @ rot_e.T
    relb = basis.T @ rel @ basis
    psi = float(np.arctan2(relb[1, 0] - relb[0, 1], relb[0, 0] + relb[1, 1]))
    rot = _yaw_rotation(psi, basis)
    trans = pos_g - rot @ pos_e
    return rot, trans


@dataclass
class SegmentErrors:
    fraction: float
    length_m: float
    trans_errors: np.ndarray
    rot_errors_deg: np.ndarray

    @property
    def median_trans(self) -> float:
        return float(np.median(self.trans_errors))

    @property
    def median_rot_deg(self) -> float:
        return float(np.median(self.rot_errors_deg))

    def quartiles_trans(self):
        return tuple(np.percentile(self.trans_errors, [25, 50, 75]))

    def quartiles_rot(self):
        return tuple(np.percentile(self.rot_errors_deg, [25, 50, 75]))


def segment_errors(estimate, ground_truth, fractions=SEGMENT_FRACTIONS,
                   gravity_axis=(0.0, 0.0, 1.0),
                   tolerance: float = DEFAULT_TIME_TOLERANCE) -> list[SegmentErrors]:
    """Relative errors over sub-trajectories of fixed path-length fractions.

    Segment lengths are measured along the ground-truth arc (not in sample
    counts); each segment is aligned at its start with a 4-DoF transform and
    the end-point translation/rotation errors are collected over all starts.
    """
    t_e, r_e, p_e = _as_arrays(estimate)
    t_g, r_g, p_g = _as_arrays(ground_truth)
    pairs = associate_times(t_e, t_g, tolerance)
    if len(pairs) < 2:
        raise InsufficientOverlap("need at least two associated pairs")
    ge = pairs[:, 0]
    gg = pairs[:, 1]
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p_g[gg], axis=0), axis=1))])
    total = float(arc[-1])
    basis = _gravity_basis(gravity_axis)
    out = []
    for frac in fractions:
        seg_len = frac * total
        if seg_len > total:
            raise SegmentTooLong(f"fraction {frac} exceeds the available path")
        terr, rerr = [], []
        ends = np.searchsorted(arc, arc + seg_len, side="left")
        for i0 in range(len(pairs)):
            i1 = int(ends[i0])
            if i1 >= len(pairs):
                break
            rot, trans = _start_alignment(
                r_g[gg[i0]], p_g[gg[i0]], r_e[ge[i0]], p_e[ge[i0]], basis
            )
            p_end = rot @ p_e[ge[i1]] + trans
            r_end = rot @ r_e[ge[i1]]
            terr.append(np.linalg.norm(p_end - p_g[gg[i1]]))
            rerr.append(np.degrees(np.linalg.norm(so3_log(r_g[gg[i1]].T @ r_end))))
        if not terr:
            raise SegmentTooLong(f"fraction {frac}: no segment fits the overlap")
        out.append(SegmentErrors(frac, seg_len, np.array(terr), np.array(rerr)))
    return out
