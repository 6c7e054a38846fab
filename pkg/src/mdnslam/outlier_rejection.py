"""Pairwise sub-loop consistency checks for loop-closure proposals.

Two proposals ``a`` and ``b`` together with the odometry between their ends
form a closed cycle::

    a.i --loop a--> a.j --odometry--> b.j --loop b^-1--> b.i --odometry--> a.i

For true loops the composed cycle is the identity.  The residual is gated
with a chi-square test on its Mahalanobis norm, and proposals are kept or
rejected by their pass rate over a seeded sample of pairings.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .geometry import (
    Pose6,
    compose_rt,
    inverse_rt,
    matrix_to_euler,
    skew,
    vec_to_rt,
    wrap_angle,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LoopProposal:
    """Candidate loop: pose of frame ``j`` in frame ``i`` with diagonal covariance."""

    i: int
    j: int
    rel: Pose6
    cov: np.ndarray
    score: float = 0.0

    def __post_init__(self):
        cov = np.array(self.cov, dtype=float).reshape(6)
        if not self.i < self.j:
            raise InvalidArgumentError(f"loop proposal needs i < j, got ({self.i}, {self.j})")
        if np.any(cov <= 0):
            raise InvalidArgumentError("loop covariance entries must be positive")
        if not isinstance(self.rel, Pose6):
            object.__setattr__(self, "rel", Pose6.from_vector(self.rel))
        object.__setattr__(self, "i", int(self.i))
        object.__setattr__(self, "j", int(self.j))
        object.__setattr__(self, "cov", cov)


@dataclass(frozen=True)
class RejectionConfig:
    """``cov_model="propagated"`` pushes every covariance through the cycle
    with SE(3) adjoints; ``"sum"`` just adds the diagonal covariances."""

    chi2_threshold: float = 12.59
    pass_rate_threshold: float = 0.6
    max_pairings_per_proposal: int = 10
    seed: int = 0
    cov_model: str = "propagated"

    def __post_init__(self):
        if not self.chi2_threshold > 0:
            raise InvalidArgumentError("chi2_threshold must be positive")
        if not 0 < self.pass_rate_threshold <= 1:
            raise InvalidArgumentError("pass_rate_threshold must lie in (0, 1]")
        if self.max_pairings_per_proposal < 1:
            raise InvalidArgumentError("max_pairings_per_proposal must be >= 1")
        if self.cov_model not in ("propagated", "sum"):
            raise InvalidArgumentError(f"unknown cov_model {self.cov_model!r}")


def adjoint(R, t) -> np.ndarray:
    """SE(3) adjoint for ``[translation, rotation]`` ordered tangent vectors."""
    R = np.asarray(R, dtype=float)
    A = np.zeros(R.shape[:-2] + (6, 6))
    A[..., :3, :3] = R
    A[..., :3, 3:] = skew(t) @ R
    A[..., 3:, 3:] = R
    return A


class OdometryChain:
    """Relative odometry measurements with prefix data for O(1) segment queries.

    ``meas[k]`` is the pose of frame ``k + 1`` in frame ``k``; ``cov[k]`` its
    diagonal covariance (zeros if unknown).
    """

    def __init__(self, meas, cov=None):
        if isinstance(meas, OdometryChain):
            meas, cov = meas.meas, meas.cov if cov is None else cov
        m = np.array([p.to_vector() if isinstance(p, Pose6) else p for p in meas], dtype=float).reshape(-1, 6)
        self.meas = m
        self.cov = np.zeros_like(m) if cov is None else np.asarray(cov, dtype=float).reshape(-1, 6)
        n = len(m) + 1
        self.R = np.empty((n, 3, 3))
        self.t = np.empty((n, 3))
        self.R[0], self.t[0] = np.eye(3), np.zeros(3)
        Ru, tu = vec_to_rt(m)
        for k in range(len(m)):
            self.R[k + 1], self.t[k + 1] = compose_rt(self.R[k], self.t[k], Ru[k], tu[k])
        # G[k] = sum_{k' < k} Ad(D_{k'+1}) diag(cov_k') Ad(D_{k'+1})^T, all in frame 0
        A = adjoint(self.R[1:], self.t[1:])
        terms = np.einsum("kij,kj,klj->kil", A, self.cov, A)
        self.G = np.concatenate([np.zeros((1, 6, 6)), np.cumsum(terms, axis=0)])
        self.diag_cum = np.concatenate([np.zeros((1, 6)), np.cumsum(self.cov, axis=0)])

    @property
    def n_frames(self) -> int:
        return len(self.meas) + 1

    def segment(self, p: int, q: int):
        """Pose of frame ``q`` in frame ``p`` and its right-perturbation covariance."""
        n = self.n_frames
        if not (0 <= p < n and 0 <= q < n):
            raise InvalidArgumentError(f"segment {p}->{q} outside odometry of {n} frames")
        lo, hi = min(p, q), max(p, q)
        Ri, ti = inverse_rt(self.R[lo], self.t[lo])
        R, t = compose_rt(Ri, ti, self.R[hi], self.t[hi])  # forward lo -> hi
        A = adjoint(Ri, ti)
        left = A @ (self.G[hi] - self.G[lo]) @ A.T  # perturbation on the left of the segment
        if p <= q:
            Rinv, tinv = inverse_rt(R, t)
            B = adjoint(Rinv, tinv)
            return R, t, B @ left @ B.T
        # inverse of (Exp(xi) T) is T^-1 Exp(-xi): right covariance equals the left one
        Rinv, tinv = inverse_rt(R, t)
        return Rinv, tinv, left

    def segment_diag(self, p: int, q: int) -> np.ndarray:
        lo, hi = min(p, q), max(p, q)
        return self.diag_cum[hi] - self.diag_cum[lo]


def _chain(odom) -> OdometryChain:
    return odom if isinstance(odom, OdometryChain) else OdometryChain(odom)


def _canonical(a: LoopProposal, b: LoopProposal):
    return (a, b) if (a.i, a.j) <= (b.i, b.j) else (b, a)


def _cycle(a: LoopProposal, b: LoopProposal, chain: OdometryChain):
    """Composed cycle pose and the right-perturbation covariances of its four legs."""
    Ra, ta = a.rel.rotation(), a.rel.t
    Rb, tb = b.rel.rotation(), b.rel.t
    Rbi, tbi = inverse_rt(Rb, tb)
    R1, t1, S1 = chain.segment(a.j, b.j)
    R2, t2, S2 = chain.segment(b.i, a.i)
    legs = [(Ra, ta), (R1, t1), (Rbi, tbi), (R2, t2)]
    Ab = adjoint(Rb, tb)
    covs = [np.diag(a.cov), S1, Ab @ np.diag(b.cov) @ Ab.T, S2]
    return legs, covs


def cycle_residual(a: LoopProposal, b: LoopProposal, odom) -> np.ndarray:
    """6-vector ``[t, wrapped euler]`` of the composed sub-loop; zero when consistent.

    The pair is put in canonical order first, so the result does not depend
    on argument order.
    """
    a, b = _canonical(a, b)
    legs, _ = _cycle(a, b, _chain(odom))
    R, t = np.eye(3), np.zeros(3)
    for Rl, tl in legs:
        R, t = compose_rt(R, t, Rl, tl)
    return np.concatenate([t, matrix_to_euler(R, check_gimbal=False)])


def cycle_covariance(a: LoopProposal, b: LoopProposal, odom, model: str = "propagated") -> np.ndarray:
    """First-order covariance of :func:`cycle_residual`."""
    a, b = _canonical(a, b)
    chain = _chain(odom)
    if model == "sum":
        d = a.cov + b.cov + chain.segment_diag(a.j, b.j) + chain.segment_diag(b.i, a.i)
        return np.diag(d)
    legs, covs = _cycle(a, b, chain)
    # accumulate in the start frame, then move to the end frame
    R, t = np.eye(3), np.zeros(3)
    total = np.zeros((6, 6))
    for (Rl, tl), S in zip(legs, covs):
        R, t = compose_rt(R, t, Rl, tl)
        A = adjoint(R, t)
        total += A @ S @ A.T
    Ri, ti = inverse_rt(R, t)
    A = adjoint(Ri, ti)
    return A @ total @ A.T


def mahalanobis2(a: LoopProposal, b: LoopProposal, odom, model: str = "propagated") -> float:
    chain = _chain(odom)
    r = cycle_residual(a, b, chain)
    r[3:] = wrap_angle(r[3:])
    S = cycle_covariance(a, b, chain, model)
    return float(r @ np.linalg.solve(S, r))


def consistency_test(a: LoopProposal, b: LoopProposal, odom, cfg: RejectionConfig = RejectionConfig()) -> bool:
    return mahalanobis2(a, b, odom, cfg.cov_model) <= cfg.chi2_threshold


def pairing_schedule(n: int, cfg: RejectionConfig) -> list:
    """Unique unordered pairs: each proposal draws up to ``max_pairings`` distinct partners."""
    rng = np.random.default_rng(cfg.seed)
    pairs = set()
    m = min(cfg.max_pairings_per_proposal, n - 1)
    for p in range(n):
        others = np.delete(np.arange(n), p)
        for q in rng.choice(others, size=m, replace=False):
            pairs.add((min(p, int(q)), max(p, int(q))))
    return sorted(pairs)


def filter_proposals(proposals, odom, cfg: RejectionConfig = RejectionConfig()):
    """Split proposals into inliers and outliers by pairwise pass rate.

    All scheduled pairings are tested once.  Aggregation then repeatedly
    drops the proposal with the lowest pass rate while that rate is below
    the threshold, recomputing rates over pairings among the remaining
    proposals; a failed pairing therefore only counts against a proposal
    while its partner is still in the set.  Returns ``(inliers, outliers,
    pass_rates)`` with ``pass_rates`` aligned to ``proposals``.
    """
    proposals = list(proposals)
    n = len(proposals)
    if n == 0:
        return [], [], np.zeros(0)
    if n < 2:
        warnings.warn("fewer than two loop proposals; nothing to validate against", stacklevel=2)
        return proposals, [], np.ones(n)
    chain = _chain(odom)
    pairs = pairing_schedule(n, cfg)
    passed = np.zeros((n, n), dtype=bool)
    tested = np.zeros((n, n), dtype=bool)
    for p, q in pairs:
        ok = consistency_test(proposals[p], proposals[q], chain, cfg)
        tested[p, q] = tested[q, p] = True
        passed[p, q] = passed[q, p] = ok
    active = np.ones(n, dtype=bool)
    rates = np.zeros(n)
    while True:
        trials = (tested & active[None, :]).sum(axis=1)
        wins = (passed & active[None, :]).sum(axis=1)
        cur = np.where(trials > 0, wins / np.maximum(trials, 1), 0.0)
        rates[active] = cur[active]
        idx = np.nonzero(active)[0]
        worst = idx[np.argmin(cur[idx])]
        if cur[worst] >= cfg.pass_rate_threshold:
            break
        active[worst] = False
        if not active.any():
            break
    inliers = [proposals[k] for k in range(n) if active[k]]
    outliers = [proposals[k] for k in range(n) if not active[k]]
    log.debug("outlier rejection: %d inliers, %d outliers", len(inliers), len(outliers))
    return inliers, outliers, rates
