import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linevio.frontend import (
    EventClusterer,
    FrontendConfig,
    PlanarNormal,
    build_points,
    cluster_labels,
    emit_associations,
    estimate_normals,
    grow_clusters,
    neighbor_pairs,
    stitch_windows,
)
from linevio.sim import SimConfig, default_rig, default_trajectory, generate_events, sparse_scene


def cfg(**kw):
    base = dict(c=0.01, min_cluster_size=30)
    base.update(kw)
    return FrontendConfig(**base)


def synthetic_plane_points(n_y=40, n_t=40, x=50.0, vx=0.0, dt=0.02, c=0.01):
    """Events from a vertical line, optionally translating in x."""
    ys, ts = np.meshgrid(np.arange(n_y, dtype=float) * 1.2,
                         np.arange(n_t, dtype=float) * dt)
    ts = ts.ravel()
    xy = np.column_stack([x + vx * ts, ys.ravel()])
    return build_points(xy, ts, c, 0.0), xy, ts


class TestEstimateNormals:
    def test_static_vertical_line(self):
        points, _, _ = synthetic_plane_points()
        normals, valid = estimate_normals(points, cfg())
        interior = valid.copy()
        assert interior.sum() > 0.5 * len(points)
        assert np.allclose(np.abs(normals[interior, 0]), 1.0, atol=1e-9)
        assert np.allclose(normals[interior, 1], 0.0, atol=1e-9)

    def test_translating_line_keeps_xy_normal(self):
        # motion tilts the plane only along the time axis
        points, _, _ = synthetic_plane_points(vx=30.0)
        normals, valid = estimate_normals(points, cfg())
        assert valid.sum() > 0.4 * len(points)
        angles = np.degrees(np.arccos(np.clip(np.abs(normals[valid, 0]), -1, 1)))
        assert np.max(angles) < 2.0

    def test_isolated_point_has_no_normal(self):
        points = np.array([[10.0, 10.0, 0.0], [100.0, 100.0, 50.0]])
        normals, valid = estimate_normals(points, cfg())
        assert not valid.any()

    def test_unit_norm(self):
        points, _, _ = synthetic_plane_points(vx=12.0)
        normals, valid = estimate_normals(points, cfg())
        assert np.allclose(np.linalg.norm(normals[valid], axis=1), 1.0, atol=1e-9)

    def test_planar_normal_type_validates(self):
        with pytest.raises(ValueError):
            PlanarNormal(np.array([1.0, 1.0]))
        PlanarNormal(np.array([1.0, 0.0]))


def two_lines_events(separation=40.0, n_y=50, n_t=60, noise=0, seed=0, c=0.01):
    rng = np.random.default_rng(seed)
    p1, xy1, t1 = synthetic_plane_points(n_y=n_y, n_t=n_t, x=50.0, vx=20.0, c=c)
    p2, xy2, t2 = synthetic_plane_points(n_y=n_y, n_t=n_t, x=50.0 + separation, vx=20.0, c=c)
    labels = np.concatenate([np.zeros(len(p1)), np.ones(len(p2))]).astype(int)
    pts = np.vstack([p1, p2])
    if noise:
        t_max = max(t1.max(), t2.max())
        noise_xy = rng.uniform([0, 0], [180, 60], (noise, 2))
        noise_t = rng.uniform(0, t_max, noise)
        pts = np.vstack([pts, build_points(noise_xy, noise_t, c, 0.0)])
        labels = np.concatenate([labels, np.full(noise, -1)])
    return pts, labels


class TestGrowClusters:
    def test_two_parallel_lines_two_clusters(self):
        pts, labels = two_lines_events()
        normals, valid = estimate_normals(pts, cfg())
        clusters = grow_clusters(pts, normals, valid, cfg())
        assert len(clusters) == 2
        for cl in clusters:
            true = labels[cl.event_indices]
            majority = np.bincount(true).argmax()
            # precision and recall per line
            assert np.mean(true == majority) >= 0.99
            assert (true == majority).sum() >= 0.99 * (labels == majority).sum()

    def test_single_line_with_noise(self):
        pts, labels = two_lines_events(separation=1000.0, noise=300, seed=2)
        keep = pts[:, 0] < 500
        pts, labels = pts[keep], labels[keep]
        normals, valid = estimate_normals(pts, cfg())
        clusters = grow_clusters(pts, normals, valid, cfg())
        assert len(clusters) == 1
        cl = clusters[0]
        true = labels[cl.event_indices]
        line_events = (labels == 0).sum()
        assert (true == 0).sum() >= 0.95 * line_events
        assert np.mean(true == -1) <= 0.01

    def test_empty_window(self):
        pts = np.zeros((0, 3))
        normals, valid = estimate_normals(pts, cfg())
        assert grow_clusters(pts, normals, valid, cfg()) == []

    def test_partition_property(self):
        pts, _ = two_lines_events(noise=100, seed=5)
        normals, valid = estimate_normals(pts, cfg())
        clusters = grow_clusters(pts, normals, valid, cfg())
        seen = np.concatenate([cl.event_indices for cl in clusters])
        assert len(seen) == len(np.unique(seen))

    def test_determinism(self):
        pts, _ = two_lines_events(noise=200, seed=7)
        normals, valid = estimate_normals(pts, cfg())
        a = grow_clusters(pts, normals, valid, cfg())
        b = grow_clusters(pts, normals, valid, cfg())
        assert len(a) == len(b)
        for ca, cb in zip(a, b):
            assert np.array_equal(ca.event_indices, cb.event_indices)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_clustering_is_a_partition(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform([0, 0, 0], [60, 60, 20], (rng.integers(5, 300), 3))
    config = cfg(min_cluster_size=3)
    normals, valid = estimate_normals(pts, config)
    clusters = grow_clusters(pts, normals, valid, config)
    seen = set()
    for cl in clusters:
        for idx in cl.event_indices:
            assert idx not in seen
            seen.add(idx)


class TestStitching:
    @staticmethod
    def _stream(duration=1.0, seed=0, n_lines=4):
        cam, ext = default_rig()
        scene = sparse_scene(n_lines)
        traj = default_trajectory(duration)
        sim_cfg = SimConfig(edge_sample_spacing_px=1.5, contrast_step_px=0.5)
        return generate_events(scene, traj, cam, ext, sim_cfg, seed=seed)

    def test_track_survives_boundary(self):
        ev = self._stream()
        n = len(ev) // 2
        clusterer = EventClusterer(cfg(stitch_tail=2000))
        r0 = clusterer.process_window(ev.ts[:n], ev.xy[:n], 0)
        r1 = clusterer.process_window(ev.ts[n:2 * n], ev.xy[n:2 * n], 1)
        tracks0 = {cl.track_id for cl in r0.clusters}
        tracks1 = {cl.track_id for cl in r1.clusters}
        assert tracks0 & tracks1, (tracks0, tracks1)

    def test_gap_resets_track(self):
        # a line that vanishes for a full window and returns gets a new id
        ev = self._stream()
        n = len(ev) // 3
        clusterer = EventClusterer(cfg(stitch_tail=500))
        r0 = clusterer.process_window(ev.ts[:n], ev.xy[:n], 0)
        # fabricate an unrelated middle window far away in space/time
        rng = np.random.default_rng(3)
        fake_ts = np.linspace(ev.ts[n], ev.ts[2 * n], 3000)
        fake_xy = rng.uniform([200, 150], [239, 179], (3000, 2))
        clusterer.process_window(fake_ts, fake_xy, 1)
        r2 = clusterer.process_window(ev.ts[2 * n:], ev.xy[2 * n:], 2)
        tracks0 = {cl.track_id for cl in r0.clusters}
        tracks2 = {cl.track_id for cl in r2.clusters}
        assert not (tracks0 & tracks2)

    def test_disjoint_supports_get_fresh_ids(self):
        clusterer = EventClusterer(cfg(min_cluster_size=20, stitch_tail=100))
        p1, xy1, t1 = synthetic_plane_points(n_y=30, n_t=30, x=20.0, vx=20.0)
        r0 = clusterer.process_window(t1, xy1, 0)
        p2, xy2, t2 = synthetic_plane_points(n_y=30, n_t=30, x=150.0, vx=20.0)
        r1 = clusterer.process_window(t2 + t1.max() + 0.02, xy2, 1)
        ids0 = {cl.track_id for cl in r0.clusters}
        ids1 = {cl.track_id for cl in r1.clusters}
        assert ids0 and ids1 and not ids0 & ids1


class TestAssociations:
    def test_one_association_per_clustered_event(self):
        pts, _ = two_lines_events()
        clusterer = EventClusterer(cfg())
        ts = pts[:, 2] * 0.01
        order = np.argsort(ts, kind="stable")
        result = clusterer.process_window(ts[order], pts[order, :2], 0)
        idx, a_ts, ax, ay, tracks = emit_associations(result)
        n_clustered = sum(len(cl.event_indices) for cl in result.clusters)
        assert len(idx) == n_clustered
        assert len(np.unique(idx)) == len(idx)
        assert len(np.unique(tracks)) == len(result.clusters) or len(
            {cl.track_id for cl in result.clusters}
        ) < len(result.clusters)

    def test_empty_result(self):
        clusterer = EventClusterer(cfg())
        result = clusterer.process_window(np.array([0.0]), np.array([[1.0, 1.0]]), 0)
        idx, *_ = emit_associations(result)
        assert len(idx) == 0
