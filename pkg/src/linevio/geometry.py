"""Rotation-manifold maps, rigid transforms, and pinhole camera geometry.

Conventions: a rotation matrix R_a^b maps frame-b vectors into frame a; a
pose (R, p) places the body in its parent frame.  Manifold increments are
right-multiplicative axis-angle on rotations and additive on translations.
All vector helpers broadcast over leading batch dimensions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDepth

SMALL_ANGLE = 1e-8
MIN_DEPTH = 1e-6


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector, batched over leading dims."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def vee(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def so3_exp(w) -> np.ndarray:
    """Axis-angle (radians) to rotation matrix via Rodrigues.

    Falls back to the second-order Taylor series below the small-angle
    cutoff so the map is smooth through zero.
    """
    w = np.asarray(w, dtype=float)
    theta2 = np.sum(w * w, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / safe**2)
    W = hat(w)
    eye = np.broadcast_to(np.eye(3), W.shape)
    return eye + a[..., None, None] * W + b[..., None, None] * (W @ W)


def so3_log(rot: np.ndarray) -> np.ndarray:
    """Rotation matrix to axis-angle with angle in [0, pi].

    Rejects matrices whose orthonormality defect exceeds 1e-6.  Stable both
    near the identity and near half-turn rotations.
    """
    rot = np.asarray(rot, dtype=float)
    if rot.shape != (3, 3):
        raise ValueError(f"expected 3x3 rotation, got shape {rot.shape}")
    defect = np.abs(rot.T @ rot - np.eye(3)).max()
    if defect > 1e-6 or not np.isclose(np.linalg.det(rot), 1.0, atol=1e-5):
        raise ValueError(f"matrix is not a rotation (defect {defect:.2e})")
    cos_angle = np.clip(0.5 * (np.trace(rot) - 1.0), -1.0, 1.0)
    angle = np.arccos(cos_angle)
    if angle < SMALL_ANGLE:
        return vee(0.5 * (rot - rot.T))
    if np.pi - angle < 1e-6:
        # Axis from the dominant diagonal of (R + I) / 2.
        sym = 0.5 * (rot + np.eye(3))
        idx = int(np.argmax(np.diagonal(sym)))
        axis = np.zeros(3)
        axis[idx] = np.sqrt(max(sym[idx, idx], 0.0))
        for j in range(3):
            if j != idx:
                axis[j] = sym[idx, j] / axis[idx]
        axis /= np.linalg.norm(axis)
        # Pin the sign with the off-diagonal antisymmetric part, which may
        # be tiny but is still the best orientation witness near pi.
        w = vee(0.5 * (rot - rot.T))
        if np.dot(w, axis) < 0.0:
            axis = -axis
        return axis * angle
    scale = angle / (2.0 * np.sin(angle))
    return scale * np.array(
        [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
    )


def so3_right_jacobian(w) -> np.ndarray:
    """Right Jacobian of so3_exp, batched."""
    w = np.asarray(w, dtype=float)
    theta2 = np.sum(w * w, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / safe**2)
    c = np.where(small, 1.0 / 6.0 - theta2 / 120.0, (theta - np.sin(theta)) / safe**3)
    W = hat(w)
    eye = np.broadcast_to(np.eye(3), W.shape)
    return eye - b[..., None, None] * W + c[..., None, None] * (W @ W)


def so3_right_jacobian_inv(w) -> np.ndarray:
    """Inverse right Jacobian, batched; valid for angles below pi."""
    w = np.asarray(w, dtype=float)
    theta2 = np.sum(w * w, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    # d = 1/theta^2 - cot(theta/2) / (2 theta), series below the cutoff.
    d = np.where(
        small,
        1.0 / 12.0 + theta2 / 720.0,
        1.0 / safe**2 - np.cos(safe / 2.0) / (2.0 * safe * np.sin(safe / 2.0)),
    )
    W = hat(w)
    eye = np.broadcast_to(np.eye(3), W.shape)
    return eye + 0.5 * W + d[..., None, None] * (W @ W)


def quat_to_rot(q_xyzw) -> np.ndarray:
    """Unit quaternion (x, y, z, w) to rotation matrix."""
    x, y, z, w = np.asarray(q_xyzw, dtype=float)
    n = x * x + y * y + z * z + w * w
    if n < 1e-12:
        raise ValueError("zero-norm quaternion")
    s = 2.0 / n
    return np.array(
        [
            [1 - s * (y * y + z * z), s * (x * y - z * w), s * (x * z + y * w)],
            [s * (x * y + z * w), 1 - s * (x * x + z * z), s * (y * z - x * w)],
            [s * (x * z - y * w), s * (y * z + x * w), 1 - s * (x * x + y * y)],
        ]
    )


def rot_to_quat(rot: np.ndarray) -> np.ndarray:
    """Rotation matrix to quaternion (x, y, z, w) with w >= 0."""
    rot = np.asarray(rot, dtype=float)
    t = np.trace(rot)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        w = 0.25 * s
        x = (rot[2, 1] - rot[1, 2]) / s
        y = (rot[0, 2] - rot[2, 0]) / s
        z = (rot[1, 0] - rot[0, 1]) / s
    else:
        i = int(np.argmax(np.diagonal(rot)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(rot[i, i] - rot[j, j] - rot[k, k] + 1.0, 0.0)) * 2.0
        q = np.zeros(4)
        q[i] = 0.25 * s
        q[3] = (rot[k, j] - rot[j, k]) / s
        q[j] = (rot[j, i] + rot[i, j]) / s
        q[k] = (rot[k, i] + rot[i, k]) / s
        x, y, z, w = q
    q = np.array([x, y, z, w])
    if w < 0:
        q = -q
    return q / np.linalg.norm(q)


def _freeze(obj, name, value, shape):
    arr = np.array(value, dtype=float).reshape(shape)
    arr.setflags(write=False)
    object.__setattr__(obj, name, arr)


@dataclass(frozen=True, eq=False)
class Transform:
    """Rigid transform (R, p); immutable, safe to share across threads."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        _freeze(self, "rotation", self.rotation, (3, 3))
        _freeze(self, "translation", self.translation, (3,))
        defect = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if defect > 1e-6:
            raise ValueError(f"rotation block not orthonormal (defect {defect:.2e})")

    @classmethod
    def identity(cls) -> "Transform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quat(cls, q_xyzw, translation) -> "Transform":
        return cls(quat_to_rot(q_xyzw), translation)

    @classmethod
    def from_matrix(cls, mat) -> "Transform":
        mat = np.asarray(mat, dtype=float)
        if mat.shape != (4, 4) or np.abs(mat[3] - [0, 0, 0, 1]).max() > 1e-9:
            raise ValueError("expected homogeneous 4x4 matrix")
        return cls(mat[:3, :3], mat[:3, 3])

    def compose(self, other: "Transform") -> "Transform":
        return Transform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Transform":
        rot_t = self.rotation.T
        return Transform(rot_t, -rot_t @ self.translation)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def quat(self) -> np.ndarray:
        return rot_to_quat(self.rotation)


@dataclass(frozen=True, eq=False)
class Line3:
    """3D line landmark held by two world-frame endpoints."""

    point_a: np.ndarray
    point_b: np.ndarray

    def __post_init__(self):
        _freeze(self, "point_a", self.point_a, (3,))
        _freeze(self, "point_b", self.point_b, (3,))
        if self.length < 1e-9:
            raise ValueError("line endpoints are (nearly) coincident")

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.point_b - self.point_a))

    @property
    def direction(self) -> np.ndarray:
        d = self.point_b - self.point_a
        return d / np.linalg.norm(d)


@dataclass(frozen=True)
class Event:
    """Single asynchronous camera event; polarity is parsed but unused."""

    t: float
    x: float
    y: float
    polarity: int = 0


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics with optional radial-tangential distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the sensor")

    @property
    def has_distortion(self) -> bool:
        return any(abs(k) > 0 for k in (self.k1, self.k2, self.p1, self.p2))

    def distort(self, xn, yn):
        r2 = xn * xn + yn * yn
        radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
        xd = xn * radial + 2 * self.p1 * xn * yn + self.p2 * (r2 + 2 * xn * xn)
        yd = yn * radial + self.p1 * (r2 + 2 * yn * yn) + 2 * self.p2 * xn * yn
        return xd, yd

    def undistort(self, xd, yd, iterations: int = 12):
        # Fixed-point inversion; exact when distortion-free.
        xn, yn = xd, yd
        if not self.has_distortion:
            return xn, yn
        for _ in range(iterations):
            xt, yt = self.distort(xn, yn)
            xn = xn - (xt - xd)
            yn = yn - (yt - yd)
        return xn, yn

    def project_camera(self, p_c):
        """Project camera-frame points; returns (pixels, depths) unmasked."""
        p_c = np.asarray(p_c, dtype=float)
        z = p_c[..., 2]
        safe_z = np.where(np.abs(z) < 1e-300, 1.0, z)
        xn = p_c[..., 0] / safe_z
        yn = p_c[..., 1] / safe_z
        xd, yd = self.distort(xn, yn)
        uv = np.stack([self.fx * xd + self.cx, self.fy * yd + self.cy], axis=-1)
        return uv, z

    def project_camera_jacobian(self, p_c) -> np.ndarray:
        """d(pixel)/d(camera point), batched (..., 2, 3)."""
        p_c = np.asarray(p_c, dtype=float)
        x, y, z = p_c[..., 0], p_c[..., 1], p_c[..., 2]
        inv_z = 1.0 / z
        xn = x * inv_z
        yn = y * inv_z
        # d(xn, yn)/d p_c
        dnorm = np.zeros(p_c.shape[:-1] + (2, 3))
        dnorm[..., 0, 0] = inv_z
        dnorm[..., 0, 2] = -xn * inv_z
        dnorm[..., 1, 1] = inv_z
        dnorm[..., 1, 2] = -yn * inv_z
        if self.has_distortion:
            r2 = xn * xn + yn * yn
            radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
            dr = self.k1 + 2.0 * self.k2 * r2
            ddist = np.empty(p_c.shape[:-1] + (2, 2))
            ddist[..., 0, 0] = radial + 2 * xn * xn * dr + 2 * self.p1 * yn + 6 * self.p2 * xn
            ddist[..., 0, 1] = 2 * xn * yn * dr + 2 * self.p1 * xn + 2 * self.p2 * yn
            ddist[..., 1, 0] = 2 * xn * yn * dr + 2 * self.p1 * xn + 2 * self.p2 * yn
            ddist[..., 1, 1] = radial + 2 * yn * yn * dr + 6 * self.p1 * yn + 2 * self.p2 * xn
            dnorm = ddist @ dnorm
        focal = np.array([[self.fx, 0.0], [0.0, self.fy]])
        return focal @ dnorm

    def project(self, p_c) -> np.ndarray:
        """Single camera-frame point to pixels; raises on bad depth."""
        p_c = np.asarray(p_c, dtype=float)
        if p_c[2] <= MIN_DEPTH:
            raise NonPositiveDepth(f"camera-frame depth {p_c[2]:.3e} <= {MIN_DEPTH}")
        uv, _ = self.project_camera(p_c)
        return uv

    def unproject(self, uv, depth: float) -> np.ndarray:
        """Pixel + depth to a camera-frame point (approximate if distorted)."""
        if depth <= 0:
            raise ValueError("depth must be positive")
        uv = np.asarray(uv, dtype=float)
        xd = (uv[..., 0] - self.cx) / self.fx
        yd = (uv[..., 1] - self.cy) / self.fy
        xn, yn = self.undistort(xd, yd)
        return np.stack([xn * depth, yn * depth, np.broadcast_to(depth, np.shape(xn))], axis=-1)

    def contains(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (
            (uv[..., 0] >= 0)
            & (uv[..., 0] < self.width)
            & (uv[..., 1] >= 0)
            & (uv[..., 1] < self.height)
        )


def world_to_camera(extrinsics: Transform, pose_w_i: Transform, point_w) -> np.ndarray:
    """World point into the camera frame at the given body pose."""
    return extrinsics.inverse().apply(pose_w_i.inverse().apply(point_w))


def project(camera: CameraModel, extrinsics: Transform, pose_w_i: Transform, point_w) -> np.ndarray:
    """Project a world point through body pose and camera extrinsics.

    Raises NonPositiveDepth when the point sits behind or on the camera; the
    caller is expected to drop the corresponding residual.
    """
    return camera.project(world_to_camera(extrinsics, pose_w_i, point_w))


def project_with_jacobians(
    camera: CameraModel,
    extrinsics: Transform,
    rot_w: np.ndarray,
    pos_w: np.ndarray,
    point_w: np.ndarray,
):
    """Batched projection of one world point seen from many body poses.

    `rot_w` is (..., 3, 3), `pos_w` is (..., 3).  Returns pixels (..., 2), a
    validity mask (depth > MIN_DEPTH), and Jacobians w.r.t. the body-pose
    rotation (right increment), body position, and the world point, each
    shaped (..., 2, 3).
    """
    rot_ic = extrinsics.rotation
    p_ic = extrinsics.translation
    rel = point_w - pos_w
    p_i = np.einsum("...ji,...j->...i", rot_w, rel)
    p_c = (p_i - p_ic) @ rot_ic
    valid = p_c[..., 2] > MIN_DEPTH
    p_c_safe = np.where(valid[..., None], p_c, np.array([0.0, 0.0, 1.0]))
    uv, _ = camera.project_camera(p_c_safe)
    duv_dpc = camera.project_camera_jacobian(p_c_safe)
    duv_dpi = duv_dpc @ rot_ic.T
    # p_i = R^T (l - p): right-perturbing R gives d p_i / d theta = hat(p_i).
    duv_dtheta = duv_dpi @ hat(p_i)
    rot_w_t = np.swapaxes(rot_w, -1, -2)
    duv_dl = duv_dpi @ rot_w_t
    duv_dp = -duv_dl
    return uv, valid, duv_dtheta, duv_dp, duv_dl
