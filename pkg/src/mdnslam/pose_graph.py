"""Pose-graph back end: odometry and loop factors, weighted cost, and
Levenberg-Marquardt minimization.

States are 6-vectors ``[t, roll, pitch, yaw]`` updated additively, with
angles re-wrapped after each step.  Factor residuals are the relative pose
between the predicted and the current target state, so a factor is zero
exactly when its measurement predicts the target node.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .errors import DisconnectedGraphError, DivergenceError, InvalidArgumentError
from .geometry import Pose6, compose_rt, compose_vec, relative_vec, rt_to_vec, vec_to_rt, wrap_angle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackendConfig:
    """``varrho``/``rho`` scale the odometry/loop weights.

    With ``scale_mode="information"`` (default) the information matrix is
    multiplied by the scale; ``"covariance"`` multiplies the covariance instead.
    """

    varrho: float = 0.01
    rho: float = 3.0
    max_iterations: int = 100
    lm_lambda_init: float = 1e-4
    convergence_tol: float = 1e-10
    scale_mode: str = "information"
    jacobian_step: float = 1e-7

    def __post_init__(self):
        if not (self.varrho > 0 and self.rho > 0):
            raise InvalidArgumentError("varrho and rho must be positive")
        if self.scale_mode not in ("information", "covariance"):
            raise InvalidArgumentError(f"unknown scale_mode {self.scale_mode!r}")
        if self.max_iterations < 0:
            raise InvalidArgumentError("max_iterations must be >= 0")

    def weight(self, scale: float, cov):
        cov = np.asarray(cov, dtype=float)
        if self.scale_mode == "information":
            return scale / cov
        return 1.0 / (scale * cov)


def _as_vec(p):
    return p.to_vector() if isinstance(p, Pose6) else np.asarray(p, dtype=float).reshape(6)


@dataclass
class FactorGraph:
    """Nodes ``(N, 6)`` plus odometry factors ``(i, u, cov)`` and loop factors ``(i, j, c, cov)``.

    Covariances are diagonal 6-vectors.  Odometry factor ``i`` links nodes
    ``i`` and ``i + 1``.
    """

    nodes: np.ndarray
    odometry: list = field(default_factory=list)
    loops: list = field(default_factory=list)
    anchor: int = 0

    def __post_init__(self):
        self.nodes = np.array(self.nodes, dtype=float).reshape(-1, 6)
        self.odometry = [(int(i), _as_vec(u), np.asarray(c, dtype=float).reshape(6)) for i, u, c in self.odometry]
        self.loops = [(int(i), int(j), _as_vec(m), np.asarray(c, dtype=float).reshape(6)) for i, j, m, c in self.loops]
        n = len(self.nodes)
        if not 0 <= self.anchor < n:
            raise InvalidArgumentError(f"anchor {self.anchor} not in graph of {n} nodes")
        for i, _, c in self.odometry:
            if not 0 <= i < n - 1:
                raise InvalidArgumentError(f"odometry factor {i} -> {i + 1} out of range")
            if np.any(c <= 0):
                raise InvalidArgumentError("covariances must be positive")
        for i, j, _, c in self.loops:
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise InvalidArgumentError(f"loop factor ({i}, {j}) invalid")
            if np.any(c <= 0):
                raise InvalidArgumentError("covariances must be positive")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def with_nodes(self, nodes) -> "FactorGraph":
        return FactorGraph(nodes, self.odometry, self.loops, self.anchor)

    def packed(self, cfg: BackendConfig):
        """Arrays ``(src, dst, meas, weight, is_loop)`` over all factors."""
        src, dst, meas, w, is_loop = [], [], [], [], []
        for i, u, c in self.odometry:
            src.append(i), dst.append(i + 1), meas.append(u), w.append(cfg.weight(cfg.varrho, c)), is_loop.append(False)
        for i, j, m, c in self.loops:
            src.append(i), dst.append(j), meas.append(m), w.append(cfg.weight(cfg.rho, c)), is_loop.append(True)
        return (
            np.array(src, dtype=int),
            np.array(dst, dtype=int),
            np.array(meas, dtype=float).reshape(-1, 6),
            np.array(w, dtype=float).reshape(-1, 6),
            np.array(is_loop, dtype=bool),
        )


def factor_residual(pred_from: Pose6, measurement: Pose6, state_to: Pose6) -> np.ndarray:
    """``relative(pred_from (+) measurement, state_to)`` as ``[t, wrapped euler]``."""
    return relative_vec(compose_vec(_as_vec(pred_from), _as_vec(measurement)), _as_vec(state_to))


def _residuals(X, src, dst, meas):
    return relative_vec(compose_vec(X[src], meas), X[dst])


def factor_costs(graph: FactorGraph, cfg: BackendConfig = BackendConfig(), X=None) -> tuple:
    """Per-factor weighted squared residuals, split into (odometry, loops)."""
    X = graph.nodes if X is None else X
    src, dst, meas, w, is_loop = graph.packed(cfg)
    if len(src) == 0:
        return np.zeros(0), np.zeros(0)
    e = _residuals(X, src, dst, meas)
    c = np.sum(w * e * e, axis=1)
    return c[~is_loop], c[is_loop]


def total_cost(graph: FactorGraph, cfg: BackendConfig = BackendConfig(), X=None) -> float:
    """Sum of ``e^T W e`` over all factors at states ``X`` (default: the graph's nodes)."""
    odo, loop = factor_costs(graph, cfg, X)
    return float(odo.sum() + loop.sum())


def check_connected(graph: FactorGraph):
    n = graph.n_nodes
    src = [i for i, _, _ in graph.odometry] + [i for i, _, _, _ in graph.loops]
    dst = [i + 1 for i, _, _ in graph.odometry] + [j for _, j, _, _ in graph.loops]
    adj = sp.coo_matrix((np.ones(len(src)), (src, dst)), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    orphans = np.nonzero(labels != labels[graph.anchor])[0]
    if orphans.size:
        raise DisconnectedGraphError(orphans.tolist())


def numeric_jacobians(X, src, dst, meas, h: float = 1e-7):
    """Central-difference Jacobians of every factor residual w.r.t. its two nodes.

    Returns ``(J_src, J_dst)`` each of shape ``(F, 6, 6)``; all factors are
    perturbed together, one parameter column at a time.
    """
    F = len(src)
    J_src = np.empty((F, 6, 6))
    J_dst = np.empty((F, 6, 6))
    Xs, Xd = X[src], X[dst]
    pred = compose_vec(Xs, meas)
    for c in range(6):
        d = np.zeros(6)
        d[c] = h
        ep = relative_vec(compose_vec(Xs + d, meas), Xd)
        em = relative_vec(compose_vec(Xs - d, meas), Xd)
        J_src[:, :, c] = _diff(ep, em) / (2 * h)
        ep = relative_vec(pred, Xd + d)
        em = relative_vec(pred, Xd - d)
        J_dst[:, :, c] = _diff(ep, em) / (2 * h)
    return J_src, J_dst


def _diff(a, b):
    d = a - b
    d[:, 3:] = wrap_angle(d[:, 3:])
    return d


class OptimizeResult(NamedTuple):
    states: np.ndarray
    cost_trace: list
    status: str


def _normal_equations(X, src, dst, meas, w, n_nodes, h):
    e = _residuals(X, src, dst, meas)
    Js, Jd = numeric_jacobians(X, src, dst, meas, h)
    J = np.concatenate([Js, Jd], axis=2)  # (F, 6, 12)
    JW = J * w[:, :, None]
    blocks = np.einsum("fki,fkj->fij", JW, J)  # (F, 12, 12)
    grad = np.einsum("fki,fk->fi", JW, e)  # (F, 12)
    idx = np.concatenate([6 * src[:, None] + np.arange(6), 6 * dst[:, None] + np.arange(6)], axis=1)
    rows = np.broadcast_to(idx[:, :, None], blocks.shape).ravel()
    cols = np.broadcast_to(idx[:, None, :], blocks.shape).ravel()
    size = 6 * n_nodes
    H = sp.coo_matrix((blocks.ravel(), (rows, cols)), shape=(size, size)).tocsc()
    g = np.zeros(size)
    np.add.at(g, idx.ravel(), grad.ravel())
    return H, g


def optimize(graph: FactorGraph, cfg: BackendConfig = BackendConfig()) -> OptimizeResult:
    """Minimize the weighted pose-graph cost with Levenberg-Marquardt.

    The anchor node is held fixed.  Damping is Marquardt-style
    (``lambda * diag(H)``), multiplied by 10 after a rejected step and by 0.5
    after an accepted one.  Only strictly decreasing steps are accepted.
    """
    check_connected(graph)
    src, dst, meas, w, _ = graph.packed(cfg)
    X = graph.nodes.copy()
    n = graph.n_nodes
    cost = total_cost(graph, cfg, X)
    if not np.isfinite(cost):
        raise DivergenceError("initial cost is not finite")
    trace = [cost]
    if len(src) == 0 or n == 1:
        return OptimizeResult(X, trace, "no factors")
    free = np.setdiff1d(np.arange(6 * n), 6 * graph.anchor + np.arange(6))
    lam = cfg.lm_lambda_init
    status = "max iterations"
    for it in range(cfg.max_iterations):
        if cost == 0.0:
            status = "exact"
            break
        H, g = _normal_equations(X, src, dst, meas, w, n, cfg.jacobian_step)
        H = H[free][:, free]
        g = g[free]
        diag = H.diagonal()
        accepted = False
        while lam < 1e16:
            A = (H + sp.diags(lam * np.maximum(diag, 1e-12))).tocsc()
            try:
                step = -splu(A).solve(g)
            except RuntimeError:
                lam *= 10.0
                continue
            if not np.all(np.isfinite(step)):
                lam *= 10.0
                continue
            Xn = X.copy().ravel()
            Xn[free] += step
            Xn = Xn.reshape(-1, 6)
            Xn[:, 3:] = wrap_angle(Xn[:, 3:])
            new_cost = total_cost(graph, cfg, Xn)
            if not np.isfinite(new_cost):
                raise DivergenceError(f"non-finite cost at iteration {it + 1}")
            if new_cost < cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            status = "trust region collapsed"
            break
        rel = (cost - new_cost) / cost
        X, cost = Xn, new_cost
        trace.append(cost)
        lam = max(lam * 0.5, 1e-12)
        if rel < cfg.convergence_tol:
            status = "converged"
            break
        if np.linalg.norm(step) < 1e-14 * (np.linalg.norm(X) + 1e-14):
            status = "step too small"
            break
    log.debug("LM finished (%s) after %d accepted steps, cost %.6g", status, len(trace) - 1, cost)
    return OptimizeResult(X, trace, status)


def compose_dead_reckoning(odometry, x0=None) -> np.ndarray:
    """Cumulative composition of relative measurements from ``x0``; returns ``(M + 1, 6)``."""
    x0 = np.zeros(6) if x0 is None else _as_vec(x0)
    steps = [_as_vec(u) for u in odometry]
    R, t = vec_to_rt(x0)
    out = [x0.copy()]
    out[0][3:] = wrap_angle(out[0][3:])
    for u in steps:
        Ru, tu = vec_to_rt(u)
        R, t = compose_rt(R, t, Ru, tu)
        out.append(rt_to_vec(R, t))
    return np.array(out)


def build_graph(odometry, odometry_cov, loops=(), x0=None, initial=None) -> FactorGraph:
    """Graph initialized by dead reckoning (or ``initial``) with node 0 anchored.

    ``loops`` holds ``(i, j, measurement, cov)`` tuples.
    """
    nodes = compose_dead_reckoning(odometry, x0) if initial is None else initial
    odo = [(k, u, c) for k, (u, c) in enumerate(zip(odometry, odometry_cov))]
    return FactorGraph(nodes, odo, list(loops), anchor=0)
