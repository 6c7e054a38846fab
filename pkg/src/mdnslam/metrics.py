"""Trajectory error metrics (ATE, RPE), Umeyama alignment, and
uncertainty/error correlation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import InvalidArgumentError, RankError
from .geometry import compose_rt, euler_to_matrix, inverse_rt, rotation_angle


@dataclass(frozen=True)
class AlignTransform:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return self.scale * p @ self.rotation.T + self.translation


def umeyama(src, dst, with_scale: bool = True) -> AlignTransform:
    """Least-squares similarity ``dst ~ s R src + t`` (Umeyama 1991)."""
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise InvalidArgumentError("point sets differ in size")
    n = len(src)
    if n < 3:
        raise RankError("need at least 3 point pairs")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = np.sum(xs * xs) / n
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv.size < 2 or sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise RankError("points are collinear or coincident")
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_s) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return AlignTransform(R, t, s)


def _traj(x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != 6:
        raise InvalidArgumentError("trajectories are (N, 6) arrays")
    return x


def ate(est, gt, align: bool = False, with_scale: bool = True) -> float:
    """RMS position error, optionally after Umeyama alignment of ``est`` onto ``gt``."""
    est, gt = _traj(est), _traj(gt)
    if len(est) != len(gt) or len(est) < 2:
        raise InvalidArgumentError("trajectories must have equal length >= 2")
    p = est[:, :3]
    if align:
        p = umeyama(p, gt[:, :3], with_scale).apply(p)
    return float(np.sqrt(np.mean(np.sum((p - gt[:, :3]) ** 2, axis=1))))


def relative_errors(est, gt, delta: int = 1):
    """Per-index error poses ``(R, t)`` between gt and estimated ``delta``-step motions."""
    est, gt = _traj(est), _traj(gt)
    if len(est) != len(gt):
        raise InvalidArgumentError("trajectories differ in length")
    if not 1 <= delta < len(gt):
        raise InvalidArgumentError("need 1 <= delta < length")
    Re, te = euler_to_matrix(est[:, 3:]), est[:, :3]
    Rg, tg = euler_to_matrix(gt[:, 3:]), gt[:, :3]
    Rgr, tgr = compose_rt(*inverse_rt(Rg[:-delta], tg[:-delta]), Rg[delta:], tg[delta:])
    Rer, ter = compose_rt(*inverse_rt(Re[:-delta], te[:-delta]), Re[delta:], te[delta:])
    return compose_rt(*inverse_rt(Rgr, tgr), Rer, ter)


def rpe(est, gt, delta: int = 1):
    """(translation RMS in m, rotation RMS in degrees) of relative pose errors."""
    R, t = relative_errors(est, gt, delta)
    tr = float(np.sqrt(np.mean(np.sum(t * t, axis=1))))
    rot = float(np.degrees(np.sqrt(np.mean(rotation_angle(R) ** 2))))
    return tr, rot


def uncertainty_correlation(errors, sigmas):
    """(Pearson r, Spearman rho) between error magnitudes and predicted sigmas."""
    e = np.asarray(errors, dtype=float).ravel()
    s = np.asarray(sigmas, dtype=float).ravel()
    if e.shape != s.shape or e.size < 3:
        raise InvalidArgumentError("need equal-length inputs with at least 3 entries")
    if np.ptp(e) == 0 or np.ptp(s) == 0:
        raise InvalidArgumentError("zero-variance input")
    return float(stats.pearsonr(e, s)[0]), float(stats.spearmanr(e, s)[0])


def gain_percent(odometry_ate: float, slam_ate: float) -> float:
    return 100.0 * (odometry_ate - slam_ate) / odometry_ate if odometry_ate > 0 else 0.0
