import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from linevio.errors import NonPositiveDepth
from linevio.geometry import (
    CameraModel,
    Line3,
    Transform,
    hat,
    project,
    project_with_jacobians,
    quat_to_rot,
    rot_to_quat,
    so3_exp,
    so3_log,
    so3_right_jacobian,
    so3_right_jacobian_inv,
    vee,
)

unit_floats = st.floats(-1.0, 1.0, allow_nan=False)


def random_rotation(rng):
    w = rng.normal(size=3)
    return so3_exp(w / np.linalg.norm(w) * rng.uniform(0, np.pi - 1e-6))


def test_exp_zero_is_identity():
    assert np.allclose(so3_exp([0.0, 0.0, 0.0]), np.eye(3))


def test_exp_quarter_turn_about_z():
    rot = so3_exp([0.0, 0.0, np.pi / 2])
    assert np.allclose(rot @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-12)


def test_log_identity():
    assert np.allclose(so3_log(np.eye(3)), 0.0)


def test_log_half_turn():
    assert np.allclose(so3_log(np.diag([1.0, -1.0, -1.0])), [np.pi, 0, 0], atol=1e-9)


def test_log_rejects_non_orthonormal():
    bad = np.eye(3)
    bad[0, 1] = 1e-3
    with pytest.raises(ValueError):
        so3_log(bad)


@given(st.lists(unit_floats, min_size=3, max_size=3), st.floats(1e-12, 3.1))
def test_exp_log_round_trip(direction, angle):
    d = np.asarray(direction)
    if np.linalg.norm(d) < 1e-3:
        d = np.array([1.0, 0.0, 0.0])
    w = d / np.linalg.norm(d) * angle
    assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-8)


def test_log_exp_round_trip_many_rotations():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        rot = random_rotation(rng)
        assert np.allclose(so3_exp(so3_log(rot)), rot, atol=1e-9)


def test_small_angle_round_trip():
    w = np.array([3e-9, -2e-9, 1e-9])
    assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-15)


def test_hat_vee():
    v = np.array([1.0, -2.0, 3.0])
    m = hat(v)
    assert np.allclose(m, -m.T)
    assert np.allclose(vee(m), v)
    assert np.allclose(m @ [0, 0, 1], np.cross(v, [0, 0, 1]))


def test_right_jacobian_consistency():
    rng = np.random.default_rng(3)
    w = rng.normal(size=3) * 0.7
    dw = rng.normal(size=3) * 1e-7
    lhs = so3_exp(w + dw)
    rhs = so3_exp(w) @ so3_exp(so3_right_jacobian(w) @ dw)
    assert np.allclose(lhs, rhs, atol=1e-13)
    assert np.allclose(
        so3_right_jacobian(w) @ so3_right_jacobian_inv(w), np.eye(3), atol=1e-12
    )


def test_quaternion_round_trip():
    rng = np.random.default_rng(9)
    for _ in range(200):
        rot = random_rotation(rng)
        assert np.allclose(quat_to_rot(rot_to_quat(rot)), rot, atol=1e-12)


class TestTransform:
    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            t = Transform(random_rotation(rng), rng.normal(size=3))
            ident = t.compose(t.inverse())
            assert np.abs(ident.rotation - np.eye(3)).max() < 1e-9
            assert np.abs(ident.translation).max() < 1e-9

    def test_inverse_closed_form(self):
        rng = np.random.default_rng(1)
        t = Transform(random_rotation(rng), rng.normal(size=3))
        inv = t.inverse()
        assert np.abs(inv.rotation - t.rotation.T).max() < 1e-12
        assert np.abs(inv.translation + t.rotation.T @ t.translation).max() < 1e-12

    def test_compose_matches_pointwise_application(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            t1 = Transform(random_rotation(rng), rng.normal(size=3))
            t2 = Transform(random_rotation(rng), rng.normal(size=3))
            pts = rng.normal(size=(7, 3))
            assert np.allclose(
                t1.compose(t2).apply(pts), t1.apply(t2.apply(pts)), atol=1e-9
            )

    def test_matrix_round_trip(self):
        rng = np.random.default_rng(3)
        t = Transform(random_rotation(rng), rng.normal(size=3))
        back = Transform.from_matrix(t.matrix())
        assert np.allclose(back.rotation, t.rotation)
        assert np.allclose(back.translation, t.translation)

    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            Transform(np.eye(3) + 1e-3, np.zeros(3))


class TestCameraModel:
    def test_optical_axis(self):
        cam = CameraModel(200, 200, 120, 90, 240, 180)
        uv = project(cam, Transform.identity(), Transform.identity(), [0, 0, 1.0])
        assert np.allclose(uv, [120, 90])

    def test_hand_computed_projection(self):
        cam = CameraModel(200, 200, 120, 90, 240, 180)
        uv = project(cam, Transform.identity(), Transform.identity(), [0.5, 0, 1.0])
        assert np.allclose(uv, [220, 90])

    def test_zero_depth_raises(self):
        cam = CameraModel(200, 200, 120, 90, 240, 180)
        with pytest.raises(NonPositiveDepth):
            project(cam, Transform.identity(), Transform.identity(), [0.1, 0.1, 0.0])

    def test_validation(self):
        with pytest.raises(ValueError):
            CameraModel(-1, 200, 120, 90, 240, 180)
        with pytest.raises(ValueError):
            CameraModel(200, 200, 400, 90, 240, 180)

    @pytest.mark.parametrize("depth", [0.2, 1.0, 7.5])
    def test_project_unproject_round_trip(self, depth):
        cam = CameraModel(200.0, 190.0, 120.0, 90.0, 240, 180)
        rng = np.random.default_rng(5)
        for _ in range(100):
            uv = rng.uniform([0, 0], [cam.width, cam.height])
            back, _ = cam.project_camera(cam.unproject(uv, depth))
            assert np.abs(back - uv).max() < 1e-6

    def test_distorted_round_trip_approximate(self):
        cam = CameraModel(200, 200, 120, 90, 240, 180, k1=-0.2, k2=0.05, p1=1e-3, p2=-5e-4)
        uv = np.array([150.0, 60.0])
        back, _ = cam.project_camera(cam.unproject(uv, 2.0))
        assert np.abs(back - uv).max() < 1e-6


def test_projection_jacobians_match_finite_differences(rig):
    camera, extrinsics = rig
    rng = np.random.default_rng(11)
    h = 1e-6
    for _ in range(50):
        rot = random_rotation(rng)[None]
        pos = rng.normal(size=(1, 3)) * 0.1
        point = np.array([2.0, 0, 0]) + rng.normal(size=3) * 0.3
        uv0, valid, j_th, j_p, j_l = project_with_jacobians(camera, extrinsics, rot, pos, point)
        if not valid[0]:
            continue

        def uv_at(rot_, pos_, point_):
            out, ok, *_ = project_with_jacobians(camera, extrinsics, rot_, pos_, point_)
            assert ok[0]
            return out[0]

        for k in range(3):
            d = np.zeros(3)
            d[k] = h
            fd = (uv_at(rot @ so3_exp(d), pos, point) - uv_at(rot @ so3_exp(-d), pos, point)) / (2 * h)
            assert np.abs(j_th[0][:, k] - fd).max() <= 1e-5 * max(1.0, np.abs(fd).max())
            fd = (uv_at(rot, pos + d, point) - uv_at(rot, pos - d, point)) / (2 * h)
            assert np.abs(j_p[0][:, k] - fd).max() <= 1e-5 * max(1.0, np.abs(fd).max())
            fd = (uv_at(rot, pos, point + d) - uv_at(rot, pos, point - d)) / (2 * h)
            assert np.abs(j_l[0][:, k] - fd).max() <= 1e-5 * max(1.0, np.abs(fd).max())


def test_line3_validation():
    with pytest.raises(ValueError):
        Line3(np.zeros(3), np.zeros(3))
    line = Line3([0, 0, 0], [0, 0, 2.0])
    assert line.length == pytest.approx(2.0)
    assert np.allclose(line.direction, [0, 0, 1])
