"""Levenberg-Marquardt minimization of the whitened residual sum.

Line landmarks are eliminated first via a per-line Schur complement so the
reduced system stays at 15 states per window node.  Full-batch mode fixes
the first node's rotation and position as the gauge; sliding mode keeps the
newest W nodes free, value-freezes the node exiting the window (residuals
touching it are retained), and drops residuals that involve only older
frozen state.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from ..errors import RankDeficient, SolverDiverged
from ..geometry import so3_exp
from ..imu import BiasState
from .problem import Problem
from .residuals import (
    NodeArrays,
    attraction_terms,
    bias_terms,
    event_block_terms,
    imu_terms,
)

log = logging.getLogger(__name__)


@dataclass
class SolveSchedule:
    """full: optimize everything; sliding: only the newest `window` nodes."""

    mode: str = "full"
    window: int = 30

    def __post_init__(self):
        if self.mode not in ("full", "sliding"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")


@dataclass
class SolverOptions:
    max_iterations: int = 100
    cost_rel_tol: float = 1e-8
    grad_tol: float = 1e-10
    init_lambda: float = 1e-4
    max_consecutive_rejects: int = 10
    enable_attraction: bool = True
    enable_repulsion: bool = True
    robust_loss: str | None = None
    huber_scale_px: float = 2.0


@dataclass
class IterationRecord:
    iteration: int
    cost: float
    grad_norm: float
    step_norm: float
    lam: float
    accepted: bool
    n_dropped: int
    n_evaluated: int


@dataclass
class ConvergenceReport:
    status: str
    final_cost: float
    final_data_cost: float = np.inf
    iterations: list[IterationRecord] = field(default_factory=list)
    n_dropped: int = 0
    n_evaluated: int = 0
    n_skipped: int = 0
    frozen_nodes: list[int] = field(default_factory=list)
    anchor_node: int | None = None
    message: str = ""

    def iteration_dicts(self) -> list[dict]:
        return [asdict(it) for it in self.iterations]


class _State:
    """Mutable copy of the optimizable state as flat arrays."""

    def __init__(self, problem: Problem, active_lines: list[int]):
        m = len(problem.nodes)
        self.rot = np.stack([n.rotation for n in problem.nodes]) if m else np.zeros((0, 3, 3))
        self.pos = np.stack([n.position for n in problem.nodes]) if m else np.zeros((0, 3))
        self.vel = np.stack([n.velocity for n in problem.nodes]) if m else np.zeros((0, 3))
        self.ba = np.stack([n.bias.accel_correction for n in problem.nodes]) if m else np.zeros((0, 3))
        self.bg = np.stack([n.bias.gyro_correction for n in problem.nodes]) if m else np.zeros((0, 3))
        self.line_pts = np.stack([problem.lines[l] for l in active_lines]) if active_lines else np.zeros((0, 2, 3))

    def copy(self) -> "_State":
        out = object.__new__(_State)
        for name in ("rot", "pos", "vel", "ba", "bg", "line_pts"):
            setattr(out, name, getattr(self, name).copy())
        return out

    def node(self, m: int) -> NodeArrays:
        return NodeArrays(self.rot[m], self.pos[m], self.vel[m], self.ba[m], self.bg[m])

    def apply_step(self, delta_nodes: np.ndarray, delta_lines: np.ndarray) -> "_State":
        out = self.copy()
        d = delta_nodes.reshape(-1, 15)
        out.rot = self.rot @ so3_exp(d[:, 0:3])
        out.pos = self.pos + d[:, 3:6]
        out.vel = self.vel + d[:, 6:9]
        out.ba = self.ba + d[:, 9:12]
        out.bg = self.bg + d[:, 12:15]
        out.line_pts = self.line_pts + delta_lines.reshape(-1, 2, 3)
        return out

    def write_back(self, problem: Problem, active_lines: list[int]):
        for m, node in enumerate(problem.nodes):
            node.rotation = self.rot[m]
            node.position = self.pos[m]
            node.velocity = self.vel[m]
            node.bias = BiasState(
                accel_prior=node.bias.accel_prior,
                gyro_prior=node.bias.gyro_prior,
                accel_correction=self.ba[m],
                gyro_correction=self.bg[m],
            )
        for slot, lid in enumerate(active_lines):
            problem.lines[lid] = self.line_pts[slot].copy()


@dataclass
class _Plan:
    """Which residuals participate and which dims are value-frozen."""

    anchor: int | None
    free_nodes: np.ndarray
    constrained_dims: np.ndarray
    active_lines: list[int]
    line_slot: dict[int, int]
    blocks: list
    n_skipped_assoc: int
    imu_pairs: list[int]


def _make_plan(problem: Problem, schedule: SolveSchedule) -> _Plan:
    m = len(problem.nodes)
    anchor = None
    free = np.ones(m, dtype=bool)
    if schedule.mode == "sliding":
        anchor_idx = m - 1 - schedule.window
        if anchor_idx >= 0:
            anchor = anchor_idx
            free[: anchor_idx + 1] = False
    if anchor is None:
        # Gauge: first node's rotation and position; velocity stays free.
        constrained = np.arange(6) if m else np.empty(0, dtype=np.int64)
        active_lines = sorted(problem.lines)
        blocks = list(problem.blocks)
        n_skipped = 0
        imu_pairs = list(range(m - 1))
    else:
        frozen_nodes = np.flatnonzero(~free)
        constrained = np.concatenate([15 * f + np.arange(15) for f in frozen_nodes])
        active_set = {b.line_id for b in problem.blocks if b.window_id >= anchor}
        active_lines = sorted(active_set)
        blocks = [b for b in problem.blocks if b.line_id in active_set]
        n_skipped = sum(len(b) for b in problem.blocks) - sum(len(b) for b in blocks)
        imu_pairs = list(range(anchor, m - 1))
    return _Plan(
        anchor=anchor,
        free_nodes=free,
        constrained_dims=np.asarray(constrained, dtype=np.int64),
        active_lines=active_lines,
        line_slot={l: i for i, l in enumerate(active_lines)},
        blocks=blocks,
        n_skipped_assoc=n_skipped,
        imu_pairs=imu_pairs,
    )


def _imu_whitener(segment) -> np.ndarray:
    cov = segment.covariance
    ridge = 1e-18 + 1e-12 * np.trace(cov) / 9.0
    lower = np.linalg.cholesky(cov + ridge * np.eye(9))
    return solve_triangular(lower, np.eye(9), lower=True)


def _huber_weights(r: np.ndarray, scale: float):
    absr = np.abs(r)
    w = np.where(absr <= scale, 1.0, scale / np.maximum(absr, 1e-300))
    rho = np.where(absr <= scale, r * r, 2.0 * scale * absr - scale * scale)
    return w, rho


@dataclass
class _Evaluation:
    cost: float
    data_cost: float
    n_dropped: int
    n_evaluated: int
    h_nn: np.ndarray | None = None
    g_n: np.ndarray | None = None
    h_ll: np.ndarray | None = None
    g_l: np.ndarray | None = None
    couplings: dict | None = None


def _evaluate(problem: Problem, plan: _Plan, state: _State,
              options: SolverOptions, whiteners: list[np.ndarray],
              want_jac: bool) -> _Evaluation:
    m_nodes = len(problem.nodes)
    n_lines = len(plan.active_lines)
    w = problem.weights
    gravity = problem.world.gravity
    inv_line = 1.0 / w.sigma_line_px
    inv_rep = 1.0 / w.sigma_repulsion_px
    inv_att = 1.0 / w.sigma_attraction

    cost = 0.0
    data_cost = 0.0  # event-to-line + inertial + bias; excludes the
    # attraction/repulsion pair, whose equilibrium cost is positive by design
    dropped = 0
    evaluated = 0
    h_nn = g_n = h_ll = g_l = couplings = None
    if want_jac:
        h_nn = np.zeros((15 * m_nodes, 15 * m_nodes))
        g_n = np.zeros(15 * m_nodes)
        h_ll = np.zeros((n_lines, 6, 6))
        g_l = np.zeros((n_lines, 6))
        couplings = {}

    robust = options.robust_loss == "huber"

    for block in plan.blocks:
        m = block.window_id
        slot = plan.line_slot[block.line_id]
        q = block.query(problem.segments[m])
        terms = event_block_terms(
            problem.camera,
            problem.extrinsics,
            gravity,
            state.node(m),
            q,
            block.uv,
            state.line_pts[slot],
            want_jac=want_jac,
        )
        v = terms.valid
        nv = int(v.sum())
        dropped += len(block) - nv
        evaluated += nv
        if nv == 0:
            continue
        r1 = terms.r_line[v] * inv_line
        rows = [(r1, inv_line, "line")]
        if options.enable_repulsion:
            rows.append((terms.r_rep[v] * inv_rep, inv_rep, "rep"))
        scale1 = np.ones(nv)
        scale2 = np.ones(nv)
        if robust:
            w1, rho1 = _huber_weights(r1, options.huber_scale_px / w.sigma_line_px)
            cost += float(rho1.sum())
            data_cost += float(rho1.sum())
            scale1 = np.sqrt(w1)
            if options.enable_repulsion:
                r2 = terms.r_rep[v] * inv_rep
                w2, rho2 = _huber_weights(r2, options.huber_scale_px / w.sigma_repulsion_px)
                cost += float(rho2.sum())
                scale2 = np.sqrt(w2)
        else:
            cost += float(r1 @ r1)
            data_cost += float(r1 @ r1)
            if options.enable_repulsion:
                r2 = terms.r_rep[v] * inv_rep
                cost += float(r2 @ r2)
        if not want_jac:
            continue
        jn1 = terms.j_line_node[v] * (inv_line * scale1)[:, None]
        jl1 = np.hstack([terms.j_line_la[v], terms.j_line_lb[v]]) * (inv_line * scale1)[:, None]
        rr1 = r1 * scale1
        jn = jn1
        jl = jl1
        rr_n = rr1
        if options.enable_repulsion:
            jn2 = terms.j_rep_node[v] * (inv_rep * scale2)[:, None]
            jl2 = np.hstack([terms.j_rep_la[v], terms.j_rep_lb[v]]) * (inv_rep * scale2)[:, None]
            rr2 = terms.r_rep[v] * inv_rep * scale2
            jn = np.vstack([jn1, jn2])
            jl = np.vstack([jl1, jl2])
            rr_n = np.concatenate([rr1, rr2])
        sl = slice(15 * m, 15 * m + 15)
        h_nn[sl, sl] += jn.T @ jn
        g_n[sl] += jn.T @ rr_n
        h_ll[slot] += jl.T @ jl
        g_l[slot] += jl.T @ rr_n
        key = (m, slot)
        coupling = jn.T @ jl
        if key in couplings:
            couplings[key] += coupling
        else:
            couplings[key] = coupling

    if options.enable_attraction:
        for lid in plan.active_lines:
            slot = plan.line_slot[lid]
            m0 = problem.line_first_window.get(lid, 0)
            r, valid, j_node, j_la, j_lb = attraction_terms(
                problem.camera,
                problem.extrinsics,
                state.node(m0),
                state.line_pts[slot],
                want_jac=want_jac,
            )
            if not valid:
                continue
            ra = r * inv_att
            cost += ra * ra
            if not want_jac:
                continue
            jn = (j_node * inv_att)[None]
            jl = np.concatenate([j_la, j_lb])[None] * inv_att
            sl = slice(15 * m0, 15 * m0 + 15)
            h_nn[sl, sl] += jn.T @ jn
            g_n[sl] += jn[0] * ra
            h_ll[slot] += jl.T @ jl
            g_l[slot] += jl[0] * ra
            key = (m0, slot)
            coupling = jn.T @ jl
            if key in couplings:
                couplings[key] += coupling
            else:
                couplings[key] = coupling

    for m in plan.imu_pairs:
        seg = problem.segments[m]
        n0 = problem.nodes[m]
        n1 = problem.nodes[m + 1]
        r, j0, j1 = imu_terms(
            state.node(m),
            state.node(m + 1),
            n0.timestamp,
            n1.timestamp,
            seg.query_end(),
            gravity,
            want_jac=want_jac,
        )
        white = whiteners[m]
        rw = white @ r
        cost += float(rw @ rw)
        data_cost += float(rw @ rw)
        dtau = n1.timestamp - n0.timestamp
        rb, jb0, jb1 = bias_terms(state.node(m), state.node(m + 1), n0.bias, n1.bias)
        inv_b = np.concatenate([
            np.full(3, 1.0 / (w.sigma_bias_accel_rw * np.sqrt(dtau))),
            np.full(3, 1.0 / (w.sigma_bias_gyro_rw * np.sqrt(dtau))),
        ])
        rbw = rb * inv_b
        cost += float(rbw @ rbw)
        data_cost += float(rbw @ rbw)
        if not want_jac:
            continue
        j0w = white @ j0
        j1w = white @ j1
        jb0w = jb0 * inv_b[:, None]
        jb1w = jb1 * inv_b[:, None]
        s0 = slice(15 * m, 15 * m + 15)
        s1 = slice(15 * (m + 1), 15 * (m + 1) + 15)
        h_nn[s0, s0] += j0w.T @ j0w + jb0w.T @ jb0w
        h_nn[s1, s1] += j1w.T @ j1w + jb1w.T @ jb1w
        cross = j0w.T @ j1w + jb0w.T @ jb1w
        h_nn[s0, s1] += cross
        h_nn[s1, s0] += cross.T
        g_n[s0] += j0w.T @ rw + jb0w.T @ rbw
        g_n[s1] += j1w.T @ rw + jb1w.T @ rbw

    if want_jac and len(plan.constrained_dims):
        c = plan.constrained_dims
        h_nn[c, :] = 0.0
        h_nn[:, c] = 0.0
        h_nn[c, c] = 1.0
        g_n[c] = 0.0
        for (m, slot), coupling in couplings.items():
            local = c[(c >= 15 * m) & (c < 15 * m + 15)] - 15 * m
            if len(local):
                coupling[local, :] = 0.0

    return _Evaluation(cost, data_cost, dropped, evaluated, h_nn, g_n, h_ll, g_l, couplings)


def _solve_step(ev: _Evaluation, plan: _Plan, lam: float):
    """Damped Gauss-Newton step via per-line Schur elimination.

    Additive (Levenberg) damping: the flat directions of the sqrt-gap
    attraction term need real regularization, which diagonal Marquardt
    scaling would borrow from the unrelated event-term diagonal.
    """
    h_nn = ev.h_nn + lam * np.eye(ev.h_nn.shape[0])
    n_lines = len(plan.active_lines)
    line_factors = []
    for slot in range(n_lines):
        if np.any(np.diag(ev.h_ll[slot]) <= 0.0):
            lid = plan.active_lines[slot]
            raise RankDeficient(
                f"line {lid} block has an unconstrained coordinate "
                f"(diag {np.diag(ev.h_ll[slot])})"
            )
        c = ev.h_ll[slot] + lam * np.eye(6)
        try:
            line_factors.append(cho_factor(c, lower=True))
        except np.linalg.LinAlgError as exc:
            lid = plan.active_lines[slot]
            raise RankDeficient(
                f"line {lid} block is singular (diag {np.diag(ev.h_ll[slot])})"
            ) from exc

    by_line: dict[int, list] = {slot: [] for slot in range(n_lines)}
    for (m, slot), coupling in (ev.couplings or {}).items():
        by_line[slot].append((m, coupling))

    h_red = h_nn.copy()
    rhs = -ev.g_n.copy()
    for slot in range(n_lines):
        factor = line_factors[slot]
        entries = by_line[slot]
        if not entries:
            continue
        xs = [(m, cho_solve(factor, coupling.T).T) for m, coupling in entries]
        for m_a, x_a in xs:
            rhs[15 * m_a:15 * m_a + 15] += x_a @ ev.g_l[slot]
            for m_b, coupling_b in entries:
                h_red[15 * m_a:15 * m_a + 15, 15 * m_b:15 * m_b + 15] -= x_a @ coupling_b.T
    try:
        red_factor = cho_factor(h_red, lower=True)
    except np.linalg.LinAlgError as exc:
        diag = np.diag(ev.h_nn)
        bad = np.flatnonzero(diag < 1e-12)
        nodes = sorted({int(d // 15) for d in bad})
        raise RankDeficient(
            f"reduced system is singular; unconstrained node blocks: {nodes}"
        ) from exc
    delta_n = cho_solve(red_factor, rhs)

    delta_l = np.zeros((n_lines, 6))
    for slot in range(n_lines):
        acc = -ev.g_l[slot].copy()
        for m, coupling in by_line[slot]:
            acc -= coupling.T @ delta_n[15 * m:15 * m + 15]
        delta_l[slot] = cho_solve(line_factors[slot], acc)

    # Model decrease of the damped step: -2 g.d - d^T H d with
    # (H + lam I) d = -g, hence d^T H d = -g.d - lam |d|^2.
    g_dot_d = float(ev.g_n @ delta_n) + float((ev.g_l * delta_l).sum())
    pred_decrease = -g_dot_d + lam * (float(delta_n @ delta_n) + float((delta_l**2).sum()))
    return delta_n, delta_l, pred_decrease


def solve(problem: Problem, schedule: SolveSchedule | None = None,
          options: SolverOptions | None = None) -> ConvergenceReport:
    """Minimize the whitened cost in place; returns the convergence report.

    Raises SolverDiverged after `max_consecutive_rejects` strictly
    cost-increasing trial steps and RankDeficient when a normal-equation
    factorization fails.
    """
    schedule = schedule or SolveSchedule()
    options = options or SolverOptions()
    problem.validate()
    plan = _make_plan(problem, schedule)
    whiteners = [_imu_whitener(s) for s in problem.segments]
    state = _State(problem, plan.active_lines)

    report = ConvergenceReport(
        status="max_iterations",
        final_cost=np.inf,
        n_skipped=plan.n_skipped_assoc,
        frozen_nodes=np.flatnonzero(~plan.free_nodes).tolist(),
        anchor_node=plan.anchor,
    )

    lam = options.init_lambda
    nu = 2.0
    rejects = 0
    ev = _evaluate(problem, plan, state, options, whiteners, want_jac=True)
    cost = ev.cost
    for it in range(options.max_iterations):
        free_dims = np.ones(len(ev.g_n), dtype=bool)
        free_dims[plan.constrained_dims] = False
        grad_norm = float(np.abs(ev.g_n[free_dims]).max()) if free_dims.any() else 0.0
        if grad_norm < options.grad_tol:
            report.iterations.append(IterationRecord(
                it, cost, grad_norm, 0.0, lam, True, ev.n_dropped, ev.n_evaluated))
            report.status = "converged_gradient"
            break

        accepted = False
        step_norm = 0.0
        trial_cost = cost
        while True:
            delta_n, delta_l, pred_decrease = _solve_step(ev, plan, lam)
            trial = state.apply_step(delta_n, delta_l)
            trial_ev = _evaluate(problem, plan, trial, options, whiteners, want_jac=False)
            step_norm = float(np.sqrt(delta_n @ delta_n + (delta_l**2).sum()))
            trial_cost = trial_ev.cost
            # A trial that drops more residuals lowers the cost spuriously;
            # treat it as a rejection so damping reins the step in.
            comparable = trial_ev.n_dropped <= ev.n_dropped
            if comparable and trial_cost <= cost * (1.0 + 1e-12):
                state = trial
                gain = (cost - trial_cost) / max(pred_decrease, 1e-300)
                lam = max(lam * max(1.0 / 3.0, 1.0 - (2.0 * gain - 1.0) ** 3), 1e-12)
                nu = 2.0
                rejects = 0
                accepted = True
                break
            lam *= nu
            nu *= 2.0
            rejects += 1
            if rejects >= options.max_consecutive_rejects:
                state.write_back(problem, plan.active_lines)
                report.iterations.append(IterationRecord(
                    it, cost, grad_norm, step_norm, lam, False, ev.n_dropped, ev.n_evaluated))
                report.final_cost = cost
                report.n_dropped = ev.n_dropped
                report.n_evaluated = ev.n_evaluated
                raise SolverDiverged(
                    f"{rejects} consecutive rejected steps at cost {cost:.6e}"
                )

        decrease = cost - trial_cost
        report.iterations.append(IterationRecord(
            it, trial_cost, grad_norm, step_norm, lam, accepted, ev.n_dropped, ev.n_evaluated))
        converged = decrease <= options.cost_rel_tol * max(cost, 1e-300)
        ev = _evaluate(problem, plan, state, options, whiteners, want_jac=True)
        cost = ev.cost
        if converged:
            report.status = "converged_cost"
            break

    state.write_back(problem, plan.active_lines)
    report.final_cost = cost
    report.final_data_cost = ev.data_cost
    report.n_dropped = ev.n_dropped
    report.n_evaluated = ev.n_evaluated
    if report.status == "max_iterations":
        log.warning("solver hit max iterations at cost %.6e", cost)
    return report


def dense_normal_equations(problem: Problem, schedule: SolveSchedule | None = None,
                           options: SolverOptions | None = None):
    """Assemble the (undamped) Gauss-Newton normal equations as dense arrays.

    Returns (H, g, meta) where node m occupies dims [15m, 15m+15) and active
    line with slot j occupies [15M + 6j, 15M + 6j + 6).  Meant for tests and
    diagnostics at small problem sizes.
    """
    schedule = schedule or SolveSchedule()
    options = options or SolverOptions()
    problem.validate()
    plan = _make_plan(problem, schedule)
    whiteners = [_imu_whitener(s) for s in problem.segments]
    state = _State(problem, plan.active_lines)
    ev = _evaluate(problem, plan, state, options, whiteners, want_jac=True)
    m = len(problem.nodes)
    n_lines = len(plan.active_lines)
    dim = 15 * m + 6 * n_lines
    h = np.zeros((dim, dim))
    g = np.zeros(dim)
    h[: 15 * m, : 15 * m] = ev.h_nn
    g[: 15 * m] = ev.g_n
    for slot in range(n_lines):
        sl = slice(15 * m + 6 * slot, 15 * m + 6 * slot + 6)
        h[sl, sl] = ev.h_ll[slot]
        g[sl] = ev.g_l[slot]
    for (node_m, slot), coupling in (ev.couplings or {}).items():
        rows = slice(15 * node_m, 15 * node_m + 15)
        cols = slice(15 * m + 6 * slot, 15 * m + 6 * slot + 6)
        h[rows, cols] += coupling
        h[cols, rows] += coupling.T
    meta = {
        "n_nodes": m,
        "active_lines": plan.active_lines,
        "line_offset": 15 * m,
        "cost": ev.cost,
        "n_dropped": ev.n_dropped,
        "n_evaluated": ev.n_evaluated,
    }
    return h, g, meta
