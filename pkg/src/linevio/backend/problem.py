"""State containers for the batch estimation problem."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateCluster
from ..geometry import CameraModel, Event, Line3, Transform
from ..imu import BiasState, PreintegratedSegment, WorldModel


@dataclass
class NavStateNode:
    """Per-window navigation state at the window-start timestamp."""

    timestamp: float
    rotation: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    bias: BiasState = field(default_factory=BiasState)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)
        defect = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if defect > 1e-6:
            raise ValueError(f"node rotation not orthonormal (defect {defect:.2e})")

    def pose(self) -> Transform:
        return Transform(self.rotation, self.position)


@dataclass(frozen=True)
class Association:
    """One event attributed to one line landmark."""

    event: Event
    line_id: int
    window_id: int

    @property
    def t(self) -> float:
        return self.event.t


@dataclass
class AssociationBlock:
    """All associations of one (window, line) pair, as column arrays."""

    window_id: int
    line_id: int
    ts: np.ndarray
    uv: np.ndarray
    event_index: np.ndarray

    def __post_init__(self):
        self.ts = np.asarray(self.ts, dtype=float)
        self.uv = np.asarray(self.uv, dtype=float).reshape(-1, 2)
        self.event_index = np.asarray(self.event_index, dtype=np.int64)
        self._query = None

    def __len__(self) -> int:
        return len(self.ts)

    def query(self, segment: PreintegratedSegment):
        """Cached per-event segment query (bias-prior deltas + Jacobians)."""
        if self._query is None:
            self._query = segment.query(self.ts)
        return self._query


@dataclass(frozen=True)
class ResidualWeights:
    """Whitening scales for the scalar residual families and the bias walk.

    The attraction scale is deliberately weak: the term only disciplines the
    otherwise-unconstrained extremity sliding, and its pull biases the whole
    estimate, so it gets just enough weight to do that job.
    """

    sigma_line_px: float = 1.0
    sigma_attraction: float = 50.0
    sigma_repulsion_px: float = 1.0
    sigma_bias_accel_rw: float = 1e-3
    sigma_bias_gyro_rw: float = 1e-4

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


class Problem:
    """Nodes, line landmarks, associations, and preintegrated segments.

    `segments[m]` spans from node m's timestamp to node m+1's (the last one
    covers the trailing events of the final window).  Line endpoints are
    held as mutable (2, 3) arrays keyed by line id.
    """

    def __init__(self, camera: CameraModel, extrinsics: Transform,
                 weights: ResidualWeights | None = None,
                 world: WorldModel | None = None):
        self.camera = camera
        self.extrinsics = extrinsics
        self.weights = weights or ResidualWeights()
        self.world = world or WorldModel()
        self.nodes: list[NavStateNode] = []
        self.segments: list[PreintegratedSegment] = []
        self.lines: dict[int, np.ndarray] = {}
        self.line_first_window: dict[int, int] = {}
        self.blocks: list[AssociationBlock] = []

    @property
    def n_associations(self) -> int:
        return sum(len(b) for b in self.blocks)

    def line_ids(self) -> list[int]:
        return sorted(self.lines)

    def add_node(self, node: NavStateNode, segment: PreintegratedSegment):
        if self.nodes and node.timestamp <= self.nodes[-1].timestamp:
            raise ValueError("node timestamps must be strictly increasing")
        self.nodes.append(node)
        self.segments.append(segment)

    def set_line(self, line_id: int, line: Line3 | np.ndarray, first_window: int | None = None):
        pts = line if isinstance(line, np.ndarray) else np.stack([line.point_a, line.point_b])
        self.lines[line_id] = np.array(pts, dtype=float).reshape(2, 3)
        if first_window is not None:
            self.line_first_window.setdefault(line_id, first_window)

    def get_line(self, line_id: int) -> Line3:
        pts = self.lines[line_id]
        return Line3(pts[0], pts[1])

    def add_block(self, block: AssociationBlock):
        if block.line_id not in self.lines:
            raise ValueError(f"unknown line id {block.line_id}")
        if not 0 <= block.window_id < len(self.nodes):
            raise ValueError(f"window id {block.window_id} has no node")
        self.line_first_window.setdefault(block.line_id, block.window_id)
        self.blocks.append(block)

    def add_associations(self, associations):
        """Group Association records into per-(window, line) blocks."""
        grouped: dict[tuple[int, int], list[Association]] = {}
        for a in associations:
            grouped.setdefault((a.window_id, a.line_id), []).append(a)
        for (w, l), items in sorted(grouped.items()):
            self.add_block(
                AssociationBlock(
                    window_id=w,
                    line_id=l,
                    ts=np.array([a.event.t for a in items]),
                    uv=np.array([[a.event.x, a.event.y] for a in items]),
                    event_index=np.arange(len(items)),
                )
            )

    def validate(self):
        for b in self.blocks:
            if b.line_id not in self.lines:
                raise ValueError(f"block references unknown line {b.line_id}")
            if not 0 <= b.window_id < len(self.nodes):
                raise ValueError(f"block references unknown window {b.window_id}")
        if len(self.segments) != len(self.nodes):
            raise ValueError("need one segment per node")
        for m, (node, seg) in enumerate(zip(self.nodes, self.segments)):
            if abs(node.timestamp - seg.t_start) > 1e-9:
                raise ValueError(f"segment {m} does not start at its node timestamp")


def initialize_line(events_xy: np.ndarray, node: NavStateNode, camera: CameraModel,
                    extrinsics: Transform, nominal_depth: float) -> Line3:
    """Bootstrap a 3D line from one cluster of events.

    Total-least-squares 2D line fit in the image, extreme projections of the
    events onto that line as endpoints, both unprojected at the nominal
    depth using the node pose.
    """
    events_xy = np.asarray(events_xy, dtype=float).reshape(-1, 2)
    if len(events_xy) < 2:
        raise DegenerateCluster("need at least two events to fit a line")
    centroid = events_xy.mean(axis=0)
    centered = events_xy - centroid
    cov = centered.T @ centered / len(events_xy)
    evals, evecs = np.linalg.eigh(cov)
    if evals[-1] < 1e-12:
        raise DegenerateCluster("cluster has no spatial extent")
    direction = evecs[:, -1]
    s = centered @ direction
    q_a = centroid + s.min() * direction
    q_b = centroid + s.max() * direction
    pose_w_c = node.pose().compose(extrinsics)
    p_a = pose_w_c.apply(camera.unproject(q_a, nominal_depth))
    p_b = pose_w_c.apply(camera.unproject(q_b, nominal_depth))
    return Line3(p_a, p_b)
