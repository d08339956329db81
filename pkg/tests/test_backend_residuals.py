import numpy as np
import pytest

from linevio.backend.problem import Association, NavStateNode, ResidualWeights, initialize_line
from linevio.backend.residuals import (
    NodeArrays,
    attraction_terms,
    bias_terms,
    event_block_terms,
    imu_terms,
    residual_attraction,
    residual_bias,
    residual_event_to_line,
    residual_imu,
    residual_repulsion,
)
from linevio.errors import DegenerateCluster, DegenerateProjection, NonPositiveDepth
from linevio.geometry import CameraModel, Event, Line3, Transform, so3_exp
from linevio.imu import BiasState, WorldModel, preintegrate, propagate_state
from linevio.sim import SimConfig, generate_imu


@pytest.fixture(scope="module")
def plain_cam():
    return CameraModel(200.0, 200.0, 120.0, 90.0, 240, 180)


@pytest.fixture(scope="module")
def still_segment():
    # hovering body: accelerometer reads -g, so propagation stays put
    ts = np.linspace(0.0, 0.5, 501)
    from linevio.imu import ImuData

    accel = np.tile([0.0, 0.0, 9.81], (501, 1))
    return preintegrate(ImuData(ts, accel, np.zeros((501, 3))), 0.0, 0.5)


def make_nodes():
    n0 = NavStateNode(0.0, np.eye(3), np.zeros(3), np.zeros(3))
    n1 = NavStateNode(0.5, np.eye(3), np.zeros(3), np.zeros(3))
    return [n0, n1]


class TestEventToLine:
    """Planar setup: identity pose/extrinsics, line along x at depth 1."""

    def _fixture(self, plain_cam, still_segment, event_xy):
        nodes = make_nodes()
        lines = {0: Line3([-0.3, 0.0, 1.0], [0.3, 0.0, 1.0])}
        assoc = Association(Event(0.2, *event_xy), 0, 0)
        return assoc, nodes, lines, still_segment, plain_cam, Transform.identity()

    def test_event_on_line_is_zero(self, plain_cam, still_segment):
        # the projected line is v = 90; any u works
        args = self._fixture(plain_cam, still_segment, (100.0, 90.0))
        assert residual_event_to_line(*args) == pytest.approx(0.0, abs=1e-12)

    def test_three_pixels_off(self, plain_cam, still_segment):
        args = self._fixture(plain_cam, still_segment, (100.0, 93.0))
        assert residual_event_to_line(*args) == pytest.approx(3.0, abs=1e-9)

    def test_depth_error(self, plain_cam, still_segment):
        nodes = make_nodes()
        lines = {0: Line3([-0.3, 0.0, -1.0], [0.3, 0.0, -1.0])}
        assoc = Association(Event(0.2, 100.0, 90.0), 0, 0)
        with pytest.raises(NonPositiveDepth):
            residual_event_to_line(assoc, nodes, lines, still_segment, plain_cam, Transform.identity())

    def test_degenerate_projection(self, plain_cam, still_segment):
        nodes = make_nodes()
        # both endpoints on one viewing ray project to the same pixel
        lines = {0: Line3([0.1, 0.1, 1.0], [0.2, 0.2, 2.0])}
        assoc = Association(Event(0.2, 100.0, 90.0), 0, 0)
        with pytest.raises(DegenerateProjection):
            residual_event_to_line(assoc, nodes, lines, still_segment, plain_cam, Transform.identity())


class TestRepulsion:
    def _fixture(self, plain_cam, still_segment, event_xy):
        nodes = make_nodes()
        lines = {0: Line3([-0.3, 0.0, 1.0], [0.3, 0.0, 1.0])}
        # projected segment: u from 60 to 180 at v=90
        assoc = Association(Event(0.2, *event_xy), 0, 0)
        return assoc, nodes, lines, still_segment, plain_cam, Transform.identity()

    def test_interior_event_is_zero(self, plain_cam, still_segment):
        args = self._fixture(plain_cam, still_segment, (100.0, 92.0))
        assert residual_repulsion(*args) == 0.0

    def test_event_beyond_far_extremity(self, plain_cam, still_segment):
        args = self._fixture(plain_cam, still_segment, (182.0, 90.0))
        r = residual_repulsion(*args)
        assert abs(r) == pytest.approx(2.0, abs=1e-9)

    def test_event_before_near_extremity_is_negative(self, plain_cam, still_segment):
        args = self._fixture(plain_cam, still_segment, (57.0, 90.0))
        assert residual_repulsion(*args) == pytest.approx(-3.0, abs=1e-9)


class TestAttraction:
    def test_sqrt_of_pixel_gap(self, plain_cam):
        node = NavStateNode(0.0, np.eye(3), np.zeros(3), np.zeros(3))
        # endpoints 25 px apart horizontally at depth 1: 0.125 m apart
        line = Line3([-0.0625, 0.0, 1.0], [0.0625, 0.0, 1.0])
        r = residual_attraction(line, node, plain_cam, Transform.identity())
        assert r == pytest.approx(5.0, abs=1e-9)

    def test_coincident_projections_give_zero(self, plain_cam):
        node = NavStateNode(0.0, np.eye(3), np.zeros(3), np.zeros(3))
        line_pts = np.array([[0.1, 0.0, 1.0], [0.2, 0.0, 2.0]])  # same ray
        r, valid, *_ = attraction_terms(
            plain_cam, Transform.identity(), NodeArrays.from_node(node), line_pts, want_jac=False
        )
        assert r == pytest.approx(0.0, abs=1e-6)

    def test_behind_camera_raises(self, plain_cam):
        node = NavStateNode(0.0, np.eye(3), np.zeros(3), np.zeros(3))
        line = Line3([-0.1, 0.0, -1.0], [0.1, 0.0, -1.0])
        with pytest.raises(NonPositiveDepth):
            residual_attraction(line, node, plain_cam, Transform.identity())


class TestImuResidual:
    def test_zero_by_construction(self, small_traj):
        cfg = SimConfig(imu_rate=2000.0)
        data, _, _ = generate_imu(small_traj, cfg, seed=0)
        seg = preintegrate(data, 0.2, 0.5)
        world = WorldModel()
        n0 = NavStateNode(0.2, small_traj.rotation(0.2), small_traj.position(0.2),
                          small_traj.velocity(0.2))
        pos, vel, rot = propagate_state(n0, seg, 0.5, world=world)
        n1 = NavStateNode(0.5, rot, pos, vel)
        r = residual_imu(n0, n1, seg, world)
        assert np.abs(r).max() < 1e-10

    def test_position_perturbation_is_linear(self, small_traj):
        cfg = SimConfig(imu_rate=2000.0)
        data, _, _ = generate_imu(small_traj, cfg, seed=0)
        seg = preintegrate(data, 0.2, 0.5)
        world = WorldModel()
        n0 = NavStateNode(0.2, small_traj.rotation(0.2), small_traj.position(0.2),
                          small_traj.velocity(0.2))
        pos, vel, rot = propagate_state(n0, seg, 0.5, world=world)
        n1 = NavStateNode(0.5, rot, pos, vel)
        r0 = residual_imu(n0, n1, seg, world)
        delta = np.array([0.01, -0.02, 0.005])
        n1b = NavStateNode(0.5, rot, pos + delta, vel)
        r1 = residual_imu(n0, n1b, seg, world)
        assert np.allclose(r1[0:3] - r0[0:3], n0.rotation.T @ delta, atol=1e-12)
        assert np.allclose(r1[3:], r0[3:])


class TestBiasResidual:
    def test_equal_effective_biases_vanish(self):
        b = BiasState(accel_prior=[0.1, 0, 0], accel_correction=[0.01, 0, 0])
        n0 = NavStateNode(0.0, np.eye(3), np.zeros(3), np.zeros(3), b)
        n1 = NavStateNode(0.5, np.eye(3), np.zeros(3), np.zeros(3), b)
        assert np.allclose(residual_bias(n0, n1), 0.0)

    def test_additive_form(self):
        n0 = NavStateNode(0.0, np.eye(3), np.zeros(3), np.zeros(3), BiasState())
        n1 = NavStateNode(0.5, np.eye(3), np.zeros(3), np.zeros(3),
                          BiasState(accel_correction=[1e-3, 0, 0]))
        r = residual_bias(n0, n1)
        assert np.allclose(r, [1e-3, 0, 0, 0, 0, 0])

    def test_whitened_residual_scales_with_sqrt_dtau(self):
        w = ResidualWeights()
        n0 = NavStateNode(0.0, np.eye(3), np.zeros(3), np.zeros(3))
        nodes = {
            dtau: NavStateNode(dtau, np.eye(3), np.zeros(3), np.zeros(3),
                               BiasState(gyro_correction=[0, 0, 2e-4]))
            for dtau in (0.25, 0.5)
        }
        def whitened(dtau):
            r, _, _ = bias_terms(NodeArrays.from_node(n0), NodeArrays.from_node(nodes[dtau]),
                                 n0.bias, nodes[dtau].bias)
            inv = np.concatenate([
                np.full(3, 1.0 / (w.sigma_bias_accel_rw * np.sqrt(dtau))),
                np.full(3, 1.0 / (w.sigma_bias_gyro_rw * np.sqrt(dtau))),
            ])
            return r * inv

        ratio = np.linalg.norm(whitened(0.5)) / np.linalg.norm(whitened(0.25))
        assert ratio == pytest.approx(1.0 / np.sqrt(2.0), rel=1e-12)


class TestJacobians:
    """Spot checks here; the exhaustive 500-config sweep is in acceptance."""

    def test_event_and_repulsion_jacobians(self, small_problem, rig):
        camera, extrinsics = rig
        prob = small_problem
        rng = np.random.default_rng(4)
        h = 1e-6
        checked_rep = 0
        for trial in range(10):
            block = prob.blocks[rng.integers(len(prob.blocks))]
            seg = prob.segments[block.window_id]
            i = int(rng.integers(len(block)))
            q = seg.query(block.ts[i:i + 1])
            node = NodeArrays.from_node(prob.nodes[block.window_id])
            node = NodeArrays(
                node.rotation @ so3_exp(rng.normal(size=3) * 0.02),
                node.position + rng.normal(size=3) * 0.03,
                node.velocity + rng.normal(size=3) * 0.05,
                rng.normal(size=3) * 0.01,
                rng.normal(size=3) * 0.005,
            )
            line_pts = prob.lines[block.line_id] + rng.normal(size=(2, 3)) * 0.05
            uv = block.uv[i:i + 1]
            terms = event_block_terms(camera, extrinsics, prob.world.gravity, node, q, uv,
                                      line_pts, want_jac=True)
            if not terms.valid[0]:
                continue
            if terms.r_rep[0] != 0.0:
                checked_rep += 1
            for k in range(6):
                d = np.zeros((2, 3))
                d.flat[k] = h
                tp = event_block_terms(camera, extrinsics, prob.world.gravity, node, q, uv,
                                       line_pts + d, want_jac=False)
                tm = event_block_terms(camera, extrinsics, prob.world.gravity, node, q, uv,
                                       line_pts - d, want_jac=False)
                fd = (tp.r_line[0] - tm.r_line[0]) / (2 * h)
                an = np.concatenate([terms.j_line_la[0], terms.j_line_lb[0]])[k]
                assert abs(an - fd) <= 1e-5 * max(1.0, abs(an), abs(fd))
                fd = (tp.r_rep[0] - tm.r_rep[0]) / (2 * h)
                an = np.concatenate([terms.j_rep_la[0], terms.j_rep_lb[0]])[k]
                assert abs(an - fd) <= 1e-5 * max(1.0, abs(an), abs(fd))

    def test_imu_jacobians(self, small_problem):
        prob = small_problem
        rng = np.random.default_rng(5)
        h = 1e-6
        m = 0
        seg = prob.segments[m]
        world = prob.world

        def perturbed(node, dx):
            return NodeArrays(
                node.rotation @ so3_exp(dx[0:3]),
                node.position + dx[3:6],
                node.velocity + dx[6:9],
                node.ba + dx[9:12],
                node.bg + dx[12:15],
            )

        n0 = NodeArrays.from_node(prob.nodes[m])
        n1 = NodeArrays.from_node(prob.nodes[m + 1])
        n0 = perturbed(n0, rng.normal(size=15) * 0.02)
        n1 = perturbed(n1, rng.normal(size=15) * 0.02)
        t0, t1 = prob.nodes[m].timestamp, prob.nodes[m + 1].timestamp
        qe = seg.query_end()
        _, j0, j1 = imu_terms(n0, n1, t0, t1, qe, world.gravity)
        for k in range(15):
            dx = np.zeros(15)
            dx[k] = h
            rp, _, _ = imu_terms(perturbed(n0, dx), n1, t0, t1, qe, world.gravity, want_jac=False)
            rm, _, _ = imu_terms(perturbed(n0, -dx), n1, t0, t1, qe, world.gravity, want_jac=False)
            fd = (rp - rm) / (2 * h)
            assert np.abs(j0[:, k] - fd).max() <= 1e-5 * max(1.0, np.abs(fd).max())
            rp, _, _ = imu_terms(n0, perturbed(n1, dx), t0, t1, qe, world.gravity, want_jac=False)
            rm, _, _ = imu_terms(n0, perturbed(n1, -dx), t0, t1, qe, world.gravity, want_jac=False)
            fd = (rp - rm) / (2 * h)
            assert np.abs(j1[:, k] - fd).max() <= 1e-5 * max(1.0, np.abs(fd).max())


class TestInitializeLine:
    def test_perfect_cluster_endpoints(self, plain_cam):
        node = NavStateNode(0.0, np.eye(3), np.zeros(3), np.zeros(3))
        u = np.linspace(80, 160, 50)
        events = np.column_stack([u, np.full(50, 90.0)])
        line = initialize_line(events, node, plain_cam, Transform.identity(), 1.0)
        ends_u = sorted([plain_cam.project_camera(p)[0][0] for p in (line.point_a, line.point_b)])
        assert ends_u[0] == pytest.approx(80.0, abs=1e-9)
        assert ends_u[1] == pytest.approx(160.0, abs=1e-9)

    def test_true_depth_recovers_line(self, small_problem, rig):
        camera, extrinsics = rig
        prob = small_problem
        block = max(prob.blocks, key=len)
        if block.window_id != 0:
            block = next(b for b in prob.blocks if b.window_id == 0 and b.line_id == block.line_id)
        node = prob.nodes[block.window_id]
        true_pts = prob.lines[block.line_id]
        depth_a = extrinsics.inverse().apply(node.pose().inverse().apply(true_pts[0]))[2]
        depth_b = extrinsics.inverse().apply(node.pose().inverse().apply(true_pts[1]))[2]
        depth = 0.5 * (depth_a + depth_b)
        line = initialize_line(block.uv, node, camera, extrinsics, float(depth))
        # endpoints lie near the true infinite line
        d = true_pts[1] - true_pts[0]
        d = d / np.linalg.norm(d)
        for p in (line.point_a, line.point_b):
            off = (p - true_pts[0]) - ((p - true_pts[0]) @ d) * d
            assert np.linalg.norm(off) < 5e-3

    def test_vertical_cluster(self, plain_cam):
        node = NavStateNode(0.0, np.eye(3), np.zeros(3), np.zeros(3))
        v = np.linspace(20, 150, 60)
        events = np.column_stack([np.full(60, 120.0), v])
        line = initialize_line(events, node, plain_cam, Transform.identity(), 2.0)
        assert line.length > 0.5

    def test_degenerate_cluster(self, plain_cam):
        node = NavStateNode(0.0, np.eye(3), np.zeros(3), np.zeros(3))
        events = np.tile([100.0, 90.0], (40, 1))
        with pytest.raises(DegenerateCluster):
            initialize_line(events, node, plain_cam, Transform.identity(), 1.0)
