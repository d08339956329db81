"""The five residual families and their analytic Jacobians.

Batched `*_terms` functions are what the solver consumes; the scalar
`residual_*` functions implement the public per-item contracts (raising on
degenerate inputs instead of masking).

Per-node state increments are 15-dimensional in the order
[rotation (right increment), position, velocity, accel-bias correction,
gyro-bias correction].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateProjection, NonPositiveDepth
from ..geometry import (
    hat,
    project_with_jacobians,
    so3_exp,
    so3_log,
    so3_right_jacobian,
    so3_right_jacobian_inv,
)
from ..imu import BiasState, SegmentQuery, WorldModel

MIN_PROJECTED_LENGTH = 1e-6

# Node increment layout.
S_ROT = slice(0, 3)
S_POS = slice(3, 6)
S_VEL = slice(6, 9)
S_BA = slice(9, 12)
S_BG = slice(12, 15)


@dataclass
class NodeArrays:
    """Plain-array view of one node's state."""

    rotation: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    ba: np.ndarray
    bg: np.ndarray

    @classmethod
    def from_node(cls, node) -> "NodeArrays":
        return cls(
            np.asarray(node.rotation, dtype=float),
            np.asarray(node.position, dtype=float),
            np.asarray(node.velocity, dtype=float),
            np.asarray(node.bias.accel_correction, dtype=float),
            np.asarray(node.bias.gyro_correction, dtype=float),
        )


@dataclass
class EventTerms:
    """Batched event-to-line and repulsion residuals for one block."""

    r_line: np.ndarray
    r_rep: np.ndarray
    valid: np.ndarray
    j_line_node: np.ndarray | None = None
    j_line_la: np.ndarray | None = None
    j_line_lb: np.ndarray | None = None
    j_rep_node: np.ndarray | None = None
    j_rep_la: np.ndarray | None = None
    j_rep_lb: np.ndarray | None = None


def _propagated_poses(node: NodeArrays, q: SegmentQuery, gravity, want_jac):
    """Per-event body poses from the window node plus pose-chain partials."""
    dp_c = q.delta_p + q.j_p_ba @ node.ba + q.j_p_bg @ node.bg
    zeta = q.j_r_bg @ node.bg
    drot_c = q.delta_rot @ so3_exp(zeta)
    rot_t = node.rotation @ drot_c
    dt = q.dt
    pos_t = (
        node.position
        + dt[:, None] * node.velocity
        + 0.5 * (dt**2)[:, None] * gravity
        + np.einsum("ij,nj->ni", node.rotation, dp_c)
    )
    chains = None
    if want_jac:
        chains = {
            "dtheta_dthetam": np.swapaxes(drot_c, -1, -2),
            "dpos_dthetam": -node.rotation @ hat(dp_c),
            "dpos_dba": node.rotation @ q.j_p_ba,
            "dpos_dbg": node.rotation @ q.j_p_bg,
            "dtheta_dbg": so3_right_jacobian(zeta) @ q.j_r_bg,
            "dt": dt,
        }
    return rot_t, pos_t, chains


def _node_pixel_chain(duv_dtheta, duv_dpos, chains):
    """Assemble d(pixel)/d(node state) (n, 2, 15) from projection partials."""
    n = duv_dtheta.shape[0]
    out = np.zeros((n, 2, 15))
    out[:, :, S_ROT] = duv_dtheta @ chains["dtheta_dthetam"] + duv_dpos @ chains["dpos_dthetam"]
    out[:, :, S_POS] = duv_dpos
    out[:, :, S_VEL] = duv_dpos * chains["dt"][:, None, None]
    out[:, :, S_BA] = duv_dpos @ chains["dpos_dba"]
    out[:, :, S_BG] = duv_dtheta @ chains["dtheta_dbg"] + duv_dpos @ chains["dpos_dbg"]
    return out


def event_block_terms(camera, extrinsics, gravity, node: NodeArrays,
                      q: SegmentQuery, uv_events: np.ndarray, line_pts: np.ndarray,
                      want_jac: bool = True) -> EventTerms:
    """Event-to-line distances and repulsion values for one (window, line).

    The line residual is the signed perpendicular pixel distance (its square
    is the cost term; the public contract reports the magnitude).  The
    repulsion residual is the signed distance along the projected line to
    the closest extremity, zero for events projecting inside the segment.
    """
    rot_t, pos_t, chains = _propagated_poses(node, q, gravity, want_jac)
    uv_a, ok_a, ja_th, ja_p, ja_l = project_with_jacobians(
        camera, extrinsics, rot_t, pos_t, line_pts[0]
    )
    uv_b, ok_b, jb_th, jb_p, jb_l = project_with_jacobians(
        camera, extrinsics, rot_t, pos_t, line_pts[1]
    )
    w = uv_b - uv_a
    length = np.linalg.norm(w, axis=1)
    valid = ok_a & ok_b & (length > MIN_PROJECTED_LENGTH)
    length = np.where(valid, length, 1.0)

    u = uv_events - uv_a
    cross = u[:, 0] * w[:, 1] - u[:, 1] * w[:, 0]
    r_line = np.where(valid, cross / length, 0.0)

    along = np.einsum("nk,nk->n", u, w) / length
    below = along < 0.0
    beyond = along > length
    r_rep = np.where(valid & below, along, 0.0)
    r_rep = np.where(valid & beyond, length - along, r_rep)

    terms = EventTerms(r_line=r_line, r_rep=r_rep, valid=valid)
    if not want_jac:
        return terms

    inv_len = 1.0 / length
    w_over_l3 = w * (inv_len**3)[:, None]
    # Signed perpendicular distance: gradients w.r.t. the two projections.
    dcross_dda = np.column_stack([u[:, 1] - w[:, 1], w[:, 0] - u[:, 0]])
    dcross_ddb = np.column_stack([-u[:, 1], u[:, 0]])
    g_line_a = dcross_dda * inv_len[:, None] + cross[:, None] * w_over_l3
    g_line_b = dcross_ddb * inv_len[:, None] - cross[:, None] * w_over_l3
    # Along-line coordinate and segment length.
    dalong_dda = -(w + u) * inv_len[:, None] + along[:, None] * w_over_l3 * length[:, None]
    dalong_ddb = u * inv_len[:, None] - along[:, None] * w_over_l3 * length[:, None]
    dlen_dda = -w * inv_len[:, None]
    dlen_ddb = w * inv_len[:, None]
    g_rep_a = np.where(
        below[:, None], dalong_dda, np.where(beyond[:, None], dlen_dda - dalong_dda, 0.0)
    )
    g_rep_b = np.where(
        below[:, None], dalong_ddb, np.where(beyond[:, None], dlen_ddb - dalong_ddb, 0.0)
    )

    juv_a = _node_pixel_chain(ja_th, ja_p, chains)
    juv_b = _node_pixel_chain(jb_th, jb_p, chains)
    terms.j_line_node = np.einsum("nk,nkj->nj", g_line_a, juv_a) + np.einsum(
        "nk,nkj->nj", g_line_b, juv_b
    )
    terms.j_line_la = np.einsum("nk,nkj->nj", g_line_a, ja_l)
    terms.j_line_lb = np.einsum("nk,nkj->nj", g_line_b, jb_l)
    terms.j_rep_node = np.einsum("nk,nkj->nj", g_rep_a, juv_a) + np.einsum(
        "nk,nkj->nj", g_rep_b, juv_b
    )
    terms.j_rep_la = np.einsum("nk,nkj->nj", g_rep_a, ja_l)
    terms.j_rep_lb = np.einsum("nk,nkj->nj", g_rep_b, jb_l)
    return terms


def attraction_terms(camera, extrinsics, node: NodeArrays, line_pts: np.ndarray,
                     want_jac: bool = True):
    """Square-root pixel gap between the projected extremities at the node.

    Uses the node pose directly (the window-start time of the first
    observation); returns (value, valid, j_node(15,), j_la(3,), j_lb(3,)).
    """
    rot = node.rotation[None]
    pos = node.position[None]
    uv_a, ok_a, ja_th, ja_p, ja_l = project_with_jacobians(camera, extrinsics, rot, pos, line_pts[0])
    uv_b, ok_b, jb_th, jb_p, jb_l = project_with_jacobians(camera, extrinsics, rot, pos, line_pts[1])
    w = (uv_b - uv_a)[0]
    length = float(np.linalg.norm(w))
    valid = bool(ok_a[0] and ok_b[0])
    r = np.sqrt(max(length, 0.0))
    if not want_jac:
        return r, valid, None, None, None
    if length < MIN_PROJECTED_LENGTH:
        # Residual is ~0 and the gradient blows up; treat as inactive.
        return r, False, None, None, None
    dr_dlen = 0.5 / r
    g_a = dr_dlen * (-w / length)
    g_b = dr_dlen * (w / length)
    j_node = np.zeros(15)
    j_node[S_ROT] = g_a @ ja_th[0] + g_b @ jb_th[0]
    j_node[S_POS] = g_a @ ja_p[0] + g_b @ jb_p[0]
    j_la = g_a @ ja_l[0]
    j_lb = g_b @ jb_l[0]
    return r, valid, j_node, j_la, j_lb


def imu_terms(node0: NodeArrays, node1: NodeArrays, t0: float, t1: float,
              end_query: SegmentQuery, gravity, want_jac: bool = True):
    """Preintegration residual (position, velocity, rotation) plus Jacobians."""
    dtau = t1 - t0
    jp_ba = end_query.j_p_ba[0]
    jp_bg = end_query.j_p_bg[0]
    jv_ba = end_query.j_v_ba[0]
    jv_bg = end_query.j_v_bg[0]
    jr_bg = end_query.j_r_bg[0]
    dp_c = end_query.delta_p[0] + jp_ba @ node0.ba + jp_bg @ node0.bg
    dv_c = end_query.delta_v[0] + jv_ba @ node0.ba + jv_bg @ node0.bg
    zeta = jr_bg @ node0.bg
    drot_c = end_query.delta_rot[0] @ so3_exp(zeta)

    rot0_t = node0.rotation.T
    x = node1.position - node0.position - dtau * node0.velocity - 0.5 * dtau * dtau * gravity
    y = node1.velocity - node0.velocity - dtau * gravity
    r_p = rot0_t @ x - dp_c
    r_v = rot0_t @ y - dv_c
    err_rot = drot_c.T @ rot0_t @ node1.rotation
    r_r = so3_log(err_rot)
    residual = np.concatenate([r_p, r_v, r_r])
    if not want_jac:
        return residual, None, None

    jr_inv = so3_right_jacobian_inv(r_r)
    jl_inv = jr_inv.T
    j0 = np.zeros((9, 15))
    j0[0:3, S_ROT] = hat(rot0_t @ x)
    j0[0:3, S_POS] = -rot0_t
    j0[0:3, S_VEL] = -dtau * rot0_t
    j0[0:3, S_BA] = -jp_ba
    j0[0:3, S_BG] = -jp_bg
    j0[3:6, S_ROT] = hat(rot0_t @ y)
    j0[3:6, S_VEL] = -rot0_t
    j0[3:6, S_BA] = -jv_ba
    j0[3:6, S_BG] = -jv_bg
    j0[6:9, S_ROT] = -jl_inv @ drot_c.T
    j0[6:9, S_BG] = -jl_inv @ (so3_right_jacobian(zeta) @ jr_bg)
    j1 = np.zeros((9, 15))
    j1[0:3, S_POS] = rot0_t
    j1[3:6, S_VEL] = rot0_t
    j1[6:9, S_ROT] = jr_inv
    return residual, j0, j1


def bias_terms(node0: NodeArrays, node1: NodeArrays,
               prior0: BiasState, prior1: BiasState):
    """Raw bias random-walk residual (accel stacked over gyro)."""
    r = np.concatenate(
        [
            prior1.accel_prior + node1.ba - prior0.accel_prior - node0.ba,
            prior1.gyro_prior + node1.bg - prior0.gyro_prior - node0.bg,
        ]
    )
    j0 = np.zeros((6, 15))
    j0[0:3, S_BA] = -np.eye(3)
    j0[3:6, S_BG] = -np.eye(3)
    j1 = np.zeros((6, 15))
    j1[0:3, S_BA] = np.eye(3)
    j1[3:6, S_BG] = np.eye(3)
    return r, j0, j1


# --- scalar public contracts -------------------------------------------------


def _single_event_terms(assoc, nodes, lines, seg, camera, extrinsics, world):
    world = world or WorldModel()
    node = NodeArrays.from_node(nodes[assoc.window_id])
    line = lines[assoc.line_id]
    line_pts = (
        line if isinstance(line, np.ndarray) else np.stack([line.point_a, line.point_b])
    )
    q = seg.query(np.array([assoc.t]))
    uv = np.array([[assoc.event.x, assoc.event.y]])
    rot_t, pos_t, _ = _propagated_poses(node, q, world.gravity, want_jac=False)
    uv_a, ok_a, *_ = project_with_jacobians(camera, extrinsics, rot_t, pos_t, line_pts[0])
    uv_b, ok_b, *_ = project_with_jacobians(camera, extrinsics, rot_t, pos_t, line_pts[1])
    if not (ok_a[0] and ok_b[0]):
        raise NonPositiveDepth("line extremity behind or on the camera at event time")
    if np.linalg.norm(uv_b[0] - uv_a[0]) <= MIN_PROJECTED_LENGTH:
        raise DegenerateProjection("line extremities project to the same pixel")
    return event_block_terms(camera, extrinsics, world.gravity, node, q, uv, line_pts,
                             want_jac=False)


def residual_event_to_line(assoc, nodes, lines, seg, camera, extrinsics, world=None) -> float:
    """Unsigned perpendicular pixel distance from the event to the projected line."""
    terms = _single_event_terms(assoc, nodes, lines, seg, camera, extrinsics, world)
    return float(abs(terms.r_line[0]))


def residual_repulsion(assoc, nodes, lines, seg, camera, extrinsics, world=None) -> float:
    """Signed along-line distance to the closest extremity (0 inside)."""
    terms = _single_event_terms(assoc, nodes, lines, seg, camera, extrinsics, world)
    return float(terms.r_rep[0])


def residual_attraction(line, node, camera, extrinsics) -> float:
    """Square root of the projected extremity gap at the node timestamp."""
    line_pts = (
        line if isinstance(line, np.ndarray) else np.stack([line.point_a, line.point_b])
    )
    r, valid, *_ = attraction_terms(
        camera, extrinsics, NodeArrays.from_node(node), line_pts, want_jac=False
    )
    if not valid:
        raise NonPositiveDepth("line extremity behind or on the camera at window start")
    return float(r)


def residual_imu(node0, node1, seg, world=None) -> np.ndarray:
    """Raw 9-vector (position, velocity, rotation) preintegration residual."""
    world = world or WorldModel()
    end_q = seg.query(np.array([seg.t_end]))
    r, _, _ = imu_terms(
        NodeArrays.from_node(node0),
        NodeArrays.from_node(node1),
        node0.timestamp,
        node1.timestamp,
        end_q,
        world.gravity,
        want_jac=False,
    )
    return r


def residual_bias(node0, node1) -> np.ndarray:
    """Raw 6-vector bias random-walk residual between consecutive windows."""
    r, _, _ = bias_terms(
        NodeArrays.from_node(node0),
        NodeArrays.from_node(node1),
        node0.bias,
        node1.bias,
    )
    return r
