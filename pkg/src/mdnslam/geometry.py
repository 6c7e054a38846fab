"""6-DoF pose algebra on (translation, Euler angle) poses.

Rotations use the intrinsic Z-Y-X convention: ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``
with ``r = (roll, pitch, yaw)``.  Composition is carried out on rotation
matrices and converted back to Euler angles only at the boundary.

Besides the scalar :class:`Pose6` API there is a small set of batched helpers
working on ``(..., 6)`` arrays laid out as ``[tx, ty, tz, roll, pitch, yaw]``.
The pose graph optimizer and the outlier rejector use those directly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GimbalLockError, InvalidArgumentError

GIMBAL_MARGIN = 1e-6


def wrap_angle(a):
    """Wrap angles into (-pi, pi]. Idempotent."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    # mod maps the upper boundary onto -pi; move it to +pi
    return np.where(w <= -np.pi, np.pi, w)


def euler_to_matrix(r) -> np.ndarray:
    """Euler angles ``(..., 3)`` to rotation matrices ``(..., 3, 3)``."""
    r = np.asarray(r, dtype=float)
    cr, sr = np.cos(r[..., 0]), np.sin(r[..., 0])
    cp, sp = np.cos(r[..., 1]), np.sin(r[..., 1])
    cy, sy = np.cos(r[..., 2]), np.sin(r[..., 2])
    m = np.empty(r.shape[:-1] + (3, 3))
    m[..., 0, 0] = cy * cp
    m[..., 0, 1] = cy * sp * sr - sy * cr
    m[..., 0, 2] = cy * sp * cr + sy * sr
    m[..., 1, 0] = sy * cp
    m[..., 1, 1] = sy * sp * sr + cy * cr
    m[..., 1, 2] = sy * sp * cr - cy * sr
    m[..., 2, 0] = -sp
    m[..., 2, 1] = cp * sr
    m[..., 2, 2] = cp * cr
    return m


def matrix_to_euler(m, check_gimbal: bool = True) -> np.ndarray:
    """Rotation matrices ``(..., 3, 3)`` to Euler angles ``(..., 3)``.

    Raises GimbalLockError when any pitch lies within ``GIMBAL_MARGIN`` of
    +-pi/2, where roll and yaw are no longer separable.
    """
    m = np.asarray(m, dtype=float)
    pitch = np.arctan2(-m[..., 2, 0], np.hypot(m[..., 0, 0], m[..., 1, 0]))
    if check_gimbal and np.any(np.abs(pitch) > np.pi / 2 - GIMBAL_MARGIN):
        raise GimbalLockError("pitch within gimbal-lock band of +-pi/2")
    roll = np.arctan2(m[..., 2, 1], m[..., 2, 2])
    yaw = np.arctan2(m[..., 1, 0], m[..., 0, 0])
    return wrap_angle(np.stack([roll, pitch, yaw], axis=-1))


def euler_matrix_roundtrip(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if np.abs(wrap_angle(r[1])) > np.pi / 2 - GIMBAL_MARGIN:
        raise GimbalLockError("pitch within gimbal-lock band of +-pi/2")
    return matrix_to_euler(euler_to_matrix(r))


def rotation_angle(m) -> np.ndarray:
    """Geodesic angle (rad) of rotation matrices ``(..., 3, 3)``."""
    m = np.asarray(m, dtype=float)
    tr = m[..., 0, 0] + m[..., 1, 1] + m[..., 2, 2]
    v = np.stack(
        [m[..., 2, 1] - m[..., 1, 2], m[..., 0, 2] - m[..., 2, 0], m[..., 1, 0] - m[..., 0, 1]],
        axis=-1,
    )
    return np.arctan2(0.5 * np.linalg.norm(v, axis=-1), 0.5 * (tr - 1.0))


def skew(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    s = np.zeros(v.shape[:-1] + (3, 3))
    s[..., 0, 1], s[..., 0, 2] = -v[..., 2], v[..., 1]
    s[..., 1, 0], s[..., 1, 2] = v[..., 2], -v[..., 0]
    s[..., 2, 0], s[..., 2, 1] = -v[..., 1], v[..., 0]
    return s


# -- batched 6-vector helpers ------------------------------------------------

def vec_to_rt(v):
    v = np.asarray(v, dtype=float)
    return euler_to_matrix(v[..., 3:]), v[..., :3]


def rt_to_vec(R, t, check_gimbal: bool = True) -> np.ndarray:
    return np.concatenate([np.asarray(t, dtype=float), matrix_to_euler(R, check_gimbal)], axis=-1)


def compose_rt(Ra, ta, Rb, tb):
    R = Ra @ Rb
    t = ta + (Ra @ tb[..., None])[..., 0]
    return R, t


def inverse_rt(R, t):
    Rt = np.swapaxes(R, -1, -2)
    return Rt, -(Rt @ t[..., None])[..., 0]


def compose_vec(a, b) -> np.ndarray:
    """Batched ``a (+) b`` on ``(..., 6)`` arrays."""
    Ra, ta = vec_to_rt(a)
    Rb, tb = vec_to_rt(b)
    return rt_to_vec(*compose_rt(Ra, ta, Rb, tb))


def inverse_vec(p) -> np.ndarray:
    return rt_to_vec(*inverse_rt(*vec_to_rt(p)))


def relative_vec(a, b) -> np.ndarray:
    """Batched ``inverse(a) (+) b``: pose ``b`` expressed in frame ``a``."""
    Ra, ta = vec_to_rt(a)
    Rb, tb = vec_to_rt(b)
    Ri, ti = inverse_rt(Ra, ta)
    return rt_to_vec(*compose_rt(Ri, ti, Rb, tb))


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidArgumentError("pose contains non-finite values")


@dataclass(frozen=True, eq=False)
class Pose6:
    """Translation ``t`` (m) plus Euler angles ``r`` (rad), angles wrapped."""

    t: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        t = np.array(self.t, dtype=float).reshape(3)
        r = wrap_angle(np.array(self.r, dtype=float).reshape(3))
        t.flags.writeable = False
        r.flags.writeable = False
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "r", r)

    @classmethod
    def identity(cls) -> "Pose6":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, v) -> "Pose6":
        v = np.asarray(v, dtype=float).reshape(6)
        return cls(v[:3], v[3:])

    @classmethod
    def from_matrix(cls, R, t) -> "Pose6":
        return cls(t, matrix_to_euler(R))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.t, self.r])

    def rotation(self) -> np.ndarray:
        return euler_to_matrix(self.r)

    def isfinite(self) -> bool:
        return bool(np.all(np.isfinite(self.t)) and np.all(np.isfinite(self.r)))

    def allclose(self, other: "Pose6", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.t, other.t, rtol=0.0, atol=atol)
            and np.all(np.abs(wrap_angle(self.r - other.r)) <= atol)
        )

    def __matmul__(self, other: "Pose6") -> "Pose6":
        return compose(self, other)

    def __repr__(self):
        return f"Pose6(t={self.t.tolist()}, r={self.r.tolist()})"


def compose(a: Pose6, b: Pose6) -> Pose6:
    """Return ``a (+) b``: apply ``b`` in the frame of ``a``."""
    _check_finite(a.t, a.r, b.t, b.r)
    R, t = compose_rt(a.rotation(), a.t, b.rotation(), b.t)
    return Pose6.from_matrix(R, t)


def inverse(p: Pose6) -> Pose6:
    _check_finite(p.t, p.r)
    R, t = inverse_rt(p.rotation(), p.t)
    return Pose6.from_matrix(R, t)


def relative(a: Pose6, b: Pose6) -> Pose6:
    """Pose ``b`` expressed in the frame of ``a``."""
    _check_finite(a.t, a.r, b.t, b.r)
    Ri, ti = inverse_rt(a.rotation(), a.t)
    R, t = compose_rt(Ri, ti, b.rotation(), b.t)
    return Pose6.from_matrix(R, t)


def poses_to_array(poses) -> np.ndarray:
    return np.array([p.to_vector() for p in poses], dtype=float).reshape(-1, 6)


def array_to_poses(arr) -> list[Pose6]:
    return [Pose6.from_vector(v) for v in np.asarray(arr, dtype=float).reshape(-1, 6)]
