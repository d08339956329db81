"""Spatio-temporal clustering of the event stream into per-line segments.

Events are embedded as points (x, y, t/c); events triggered by one physical
line then lie on a locally planar patch.  Per-point surface normals come
from the eigenvector of the neighborhood covariance with smallest
eigenvalue; region growing joins neighboring points whose x-y normals are
colinear and whose image-space point-to-line distance is small.  Cross-
window association appends the tail of each window to the next one and
reuses the same criteria.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

MIN_NEIGHBORS = 5
XY_NORMAL_FLOOR = 1e-3


@dataclass(frozen=True)
class SpatioTemporalPoint:
    """Event embedded in the (x, y, t/c) volume."""

    x: float
    y: float
    z: float
    event_index: int


@dataclass(frozen=True)
class PlanarNormal:
    """Unit x-y component of a local surface normal."""

    n: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.n, dtype=float).reshape(2)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("planar normal must be unit length")
        object.__setattr__(self, "n", n)


@dataclass
class Cluster:
    """Events of one window attributed to a single line track."""

    event_indices: np.ndarray
    window_id: int
    track_id: int = -1


@dataclass
class FrontendConfig:
    """Clustering thresholds; `c` is seconds per pixel-equivalent.

    A `c` of None auto-calibrates on the first window so its time span maps
    to about 40 pixel-equivalents.
    """

    c: float | None = None
    neighbor_radius: float = 3.0
    n_thr: float = 0.95
    e_thr: float = 1.5
    min_cluster_size: int = 30
    stitch_tail: int = 2000
    window_size_n: int = 200_000

    def __post_init__(self):
        if self.c is not None and self.c <= 0:
            raise ValueError("c must be positive")
        for name in ("neighbor_radius", "n_thr", "e_thr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.n_thr < 1:
            raise ValueError("n_thr must be below 1")


def build_points(xy: np.ndarray, ts: np.ndarray, c: float, t0: float) -> np.ndarray:
    """Stack events into (x, y, (t - t0)/c) rows."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    z = (np.asarray(ts, dtype=float) - t0) / c
    return np.column_stack([xy, z])


def neighbor_pairs(points: np.ndarray, radius: float) -> np.ndarray:
    """Unordered index pairs (i < j) within `radius`, via a KD-tree."""
    if len(points) == 0:
        return np.empty((0, 2), dtype=np.int64)
    tree = cKDTree(points)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    return pairs.astype(np.int64).reshape(-1, 2)


def estimate_normals(points: np.ndarray, cfg: FrontendConfig,
                     pairs: np.ndarray | None = None):
    """Per-point x-y normals (unit rows) plus a validity mask.

    A point needs at least MIN_NEIGHBORS neighbors inside neighbor_radius;
    the 3D normal is the smallest-eigenvalue eigenvector of the neighborhood
    covariance, projected to x-y and normalized.  Points whose x-y component
    nearly vanishes are marked absent.
    """
    n = len(points)
    normals = np.full((n, 2), np.nan)
    if n == 0:
        return normals, np.zeros(0, dtype=bool)
    if pairs is None:
        pairs = neighbor_pairs(points, cfg.neighbor_radius)
    counts = (
        np.bincount(pairs[:, 0], minlength=n) + np.bincount(pairs[:, 1], minlength=n)
    )
    has_enough = counts >= MIN_NEIGHBORS
    # Moment sums over each neighborhood (neighbors + the point itself).
    src = np.concatenate([pairs[:, 0], pairs[:, 1]])
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
    s1 = np.empty((n, 3))
    for a in range(3):
        s1[:, a] = np.bincount(src, weights=points[dst, a], minlength=n)
    s1 += points
    s2 = np.empty((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            acc = np.bincount(src, weights=points[dst, a] * points[dst, b], minlength=n)
            acc = acc.astype(float) + points[:, a] * points[:, b]
            s2[:, a, b] = acc
            s2[:, b, a] = acc
    m = (counts + 1).astype(float)
    mean = s1 / m[:, None]
    cov = s2 / m[:, None, None] - mean[:, :, None] * mean[:, None, :]

    idx = np.flatnonzero(has_enough)
    if len(idx):
        _, vecs = np.linalg.eigh(cov[idx])
        nrm3 = vecs[:, :, 0]
        nxy = nrm3[:, :2]
        mag = np.linalg.norm(nxy, axis=1)
        ok = mag >= XY_NORMAL_FLOOR
        normals[idx[ok]] = nxy[ok] / mag[ok, None]
    valid = np.isfinite(normals[:, 0])
    return normals, valid


def _similarity_edges(points, normals, valid, pairs, cfg):
    """Pairs that satisfy the colinearity + point-to-line criteria."""
    if len(pairs) == 0:
        return pairs
    i, j = pairs[:, 0], pairs[:, 1]
    mask = valid[i] & valid[j]
    ni, nj = normals[i], normals[j]
    dot = np.abs(np.einsum("ka,ka->k", ni, nj))
    mask &= dot > cfg.n_thr
    dxy = points[j, :2] - points[i, :2]
    di = np.abs(np.einsum("ka,ka->k", ni, dxy))
    dj = np.abs(np.einsum("ka,ka->k", nj, dxy))
    mask &= (di < cfg.e_thr) | (dj < cfg.e_thr)
    return pairs[mask]


def _component_labels(n: int, edges: np.ndarray) -> np.ndarray:
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    graph = sparse.coo_matrix(
        (np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n)
    )
    _, labels = connected_components(graph, directed=False)
    return labels


def grow_clusters(points: np.ndarray, normals: np.ndarray, valid: np.ndarray,
                  cfg: FrontendConfig, window_id: int = 0,
                  pairs: np.ndarray | None = None) -> list[Cluster]:
    """Maximal connected components under the similarity criteria.

    Components smaller than min_cluster_size are discarded.  The result is a
    partition: every event index appears in at most one cluster, and the
    cluster order is deterministic (sorted by first member index).
    """
    n = len(points)
    if n == 0:
        return []
    if pairs is None:
        pairs = neighbor_pairs(points, cfg.neighbor_radius)
    edges = _similarity_edges(points, normals, valid, pairs, cfg)
    labels = _component_labels(n, edges)
    order = np.argsort(labels, kind="stable")
    sorted_labels = labels[order]
    boundaries = np.flatnonzero(np.diff(sorted_labels)) + 1
    groups = np.split(order, boundaries)
    clusters = []
    for members in groups:
        if len(members) >= cfg.min_cluster_size:
            clusters.append(Cluster(np.sort(members), window_id))
    clusters.sort(key=lambda cl: int(cl.event_indices[0]))
    return clusters


def cluster_labels(n: int, clusters: list[Cluster]) -> np.ndarray:
    """Per-point cluster index (-1 for unclustered)."""
    labels = np.full(n, -1, dtype=np.int64)
    for k, cl in enumerate(clusters):
        labels[cl.event_indices] = k
    return labels


def stitch_windows(prev_tail_points: np.ndarray, prev_tail_tracks: np.ndarray,
                   next_points: np.ndarray, next_clusters: list[Cluster],
                   cfg: FrontendConfig) -> list[int]:
    """Track ids for each next-window cluster, -1 where no link was found.

    Region growing runs over the concatenation (tail + next window); a next
    cluster inherits the track of any previous cluster it connects to.  When
    several previous tracks connect to one cluster the oldest id wins and
    the merge is logged (past states are never merged).
    """
    if len(prev_tail_points) == 0 or not next_clusters:
        return [-1] * len(next_clusters)
    joint = np.vstack([prev_tail_points, next_points])
    pairs = neighbor_pairs(joint, cfg.neighbor_radius)
    normals, valid = estimate_normals(joint, cfg, pairs=pairs)
    edges = _similarity_edges(joint, normals, valid, pairs, cfg)
    labels = _component_labels(len(joint), edges)
    n_tail = len(prev_tail_points)
    next_labels = cluster_labels(len(next_points), next_clusters)

    assigned = [-1] * len(next_clusters)
    for comp in np.unique(labels):
        members = np.flatnonzero(labels == comp)
        tail_members = members[members < n_tail]
        next_members = members[members >= n_tail] - n_tail
        if len(tail_members) == 0 or len(next_members) == 0:
            continue
        tracks = np.unique(prev_tail_tracks[tail_members])
        tracks = tracks[tracks >= 0]
        if len(tracks) == 0:
            continue
        if len(tracks) > 1:
            log.info("stitch: tracks %s connect to one component; keeping %d",
                     tracks.tolist(), int(tracks.min()))
        track = int(tracks.min())
        for ci in np.unique(next_labels[next_members]):
            if ci < 0:
                continue
            if assigned[ci] >= 0 and assigned[ci] != track:
                older = min(assigned[ci], track)
                log.info("stitch: cluster %d reached by tracks %d and %d; keeping %d",
                         ci, assigned[ci], track, older)
                assigned[ci] = older
            else:
                assigned[ci] = track
    return assigned


@dataclass
class WindowResult:
    window_id: int
    t_first: float
    clusters: list[Cluster]
    event_ts: np.ndarray
    event_xy: np.ndarray


class EventClusterer:
    """Stateful per-window driver: clusters, stitches, assigns track ids."""

    def __init__(self, cfg: FrontendConfig):
        self.cfg = cfg
        self.c = cfg.c
        self._next_track = 0
        self._tail_raw: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def process_window(self, ts: np.ndarray, xy: np.ndarray, window_id: int) -> WindowResult:
        ts = np.asarray(ts, dtype=float)
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        if self.c is None:
            span = float(ts[-1] - ts[0]) if len(ts) > 1 else 1e-3
            self.c = max(span, 1e-9) / 40.0
            log.info("auto time normalization c=%.6g s per pixel-equivalent", self.c)
        t0 = float(ts[0]) if len(ts) else 0.0
        points = build_points(xy, ts, self.c, t0)
        pairs = neighbor_pairs(points, self.cfg.neighbor_radius)
        normals, valid = estimate_normals(points, self.cfg, pairs=pairs)
        clusters = grow_clusters(points, normals, valid, self.cfg, window_id, pairs=pairs)

        if self._tail_raw is not None and clusters:
            tail_ts, tail_xy, tail_tracks = self._tail_raw
            tail_points = build_points(tail_xy, tail_ts, self.c, t0)
            assigned = stitch_windows(tail_points, tail_tracks, points, clusters, self.cfg)
        else:
            assigned = [-1] * len(clusters)
        for cl, track in zip(clusters, assigned):
            if track >= 0:
                cl.track_id = track
            else:
                cl.track_id = self._next_track
                self._next_track += 1

        # Tail for the next window: trailing events with their track labels.
        k = min(self.cfg.stitch_tail, len(ts))
        if k > 0:
            labels = cluster_labels(len(ts), clusters)
            tracks = np.full(len(ts), -1, dtype=np.int64)
            for ci, cl in enumerate(clusters):
                tracks[labels == ci] = cl.track_id
            sl = slice(len(ts) - k, len(ts))
            self._tail_raw = (ts[sl].copy(), xy[sl].copy(), tracks[sl].copy())
        else:
            self._tail_raw = None
        return WindowResult(window_id, t0, clusters, ts, xy)


def emit_associations(result: WindowResult):
    """One (event, t, line_id) record per clustered event of the window.

    Returns parallel arrays (event_index, t, x, y, line_id); unclustered
    events produce nothing.
    """
    idx_parts, track_parts = [], []
    for cl in result.clusters:
        idx_parts.append(cl.event_indices)
        track_parts.append(np.full(len(cl.event_indices), cl.track_id, dtype=np.int64))
    if not idx_parts:
        empty = np.empty(0)
        return empty.astype(np.int64), empty, empty, empty, empty.astype(np.int64)
    idx = np.concatenate(idx_parts)
    tracks = np.concatenate(track_parts)
    order = np.argsort(idx, kind="stable")
    idx, tracks = idx[order], tracks[order]
    return (
        idx,
        result.event_ts[idx],
        result.event_xy[idx, 0],
        result.event_xy[idx, 1],
        tracks,
    )
