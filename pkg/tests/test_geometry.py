import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdnslam.errors import GimbalLockError, InvalidArgumentError
from mdnslam.geometry import (
    Pose6,
    compose,
    compose_vec,
    euler_matrix_roundtrip,
    euler_to_matrix,
    inverse,
    inverse_vec,
    matrix_to_euler,
    relative,
    relative_vec,
    rotation_angle,
    wrap_angle,
)

from helpers import poses, random_pose


def rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def homogeneous(p: Pose6):
    T = np.eye(4)
    T[:3, :3] = rz(p.r[2]) @ ry(p.r[1]) @ rx(p.r[0])
    T[:3, 3] = p.t
    return T


class TestEulerConvention:
    def test_matches_elementary_rotations(self, rng):
        for _ in range(50):
            r = rng.uniform(-np.pi, np.pi, 3)
            np.testing.assert_allclose(euler_to_matrix(r), rz(r[2]) @ ry(r[1]) @ rx(r[0]), atol=1e-14)

    def test_matrices_are_rotations(self, rng):
        R = euler_to_matrix(rng.uniform(-np.pi, np.pi, (200, 3)))
        np.testing.assert_allclose(np.swapaxes(R, 1, 2) @ R, np.broadcast_to(np.eye(3), R.shape), atol=1e-12)
        np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-12)

    def test_roundtrip_zero(self):
        np.testing.assert_array_equal(euler_matrix_roundtrip(np.zeros(3)), np.zeros(3))

    def test_roundtrip_small(self):
        np.testing.assert_allclose(euler_matrix_roundtrip([0.1, 0.2, 0.3]), [0.1, 0.2, 0.3], atol=1e-9)

    @given(st.floats(-np.pi, np.pi), st.floats(-np.pi / 2 + 1e-3, np.pi / 2 - 1e-3), st.floats(-np.pi, np.pi))
    def test_roundtrip_property(self, a, b, c):
        r = np.array([a, b, c])
        out = euler_matrix_roundtrip(r)
        assert np.all(np.abs(wrap_angle(out - r)) < 1e-9)

    @pytest.mark.parametrize("pitch", [np.pi / 2, -np.pi / 2, np.pi / 2 - 1e-7])
    def test_gimbal_lock(self, pitch):
        with pytest.raises(GimbalLockError):
            euler_matrix_roundtrip([0.0, pitch, 0.0])
        with pytest.raises(GimbalLockError):
            matrix_to_euler(euler_to_matrix([0.3, pitch, 0.1]))


class TestWrap:
    def test_range(self):
        a = np.linspace(-20, 20, 4001)
        w = wrap_angle(a)
        assert np.all(w > -np.pi) and np.all(w <= np.pi)
        np.testing.assert_allclose(np.cos(w), np.cos(a), atol=1e-12)
        np.testing.assert_allclose(np.sin(w), np.sin(a), atol=1e-12)

    def test_boundary(self):
        assert wrap_angle(np.pi) == np.pi
        assert wrap_angle(-np.pi) == np.pi
        assert wrap_angle(3 * np.pi) == pytest.approx(np.pi)

    @given(st.floats(-1e3, 1e3))
    def test_idempotent(self, a):
        w = wrap_angle(a)
        assert wrap_angle(w) == w


class TestCompose:
    def test_identity_left(self, rng):
        p = random_pose(rng)
        assert compose(Pose6.identity(), p).allclose(p, 1e-12)
        assert compose(p, Pose6.identity()).allclose(p, 1e-12)

    def test_pure_translations_add(self):
        out = compose(Pose6([1, 0, 0], [0, 0, 0]), Pose6([0, 2, 0], [0, 0, 0]))
        np.testing.assert_allclose(out.t, [1, 2, 0])
        np.testing.assert_allclose(out.r, 0)

    def test_yaw_quarter_turn(self):
        out = compose(Pose6(np.zeros(3), [0, 0, np.pi / 2]), Pose6([1, 0, 0], np.zeros(3)))
        np.testing.assert_allclose(out.t, [0, 1, 0], atol=1e-15)
        np.testing.assert_allclose(out.r, [0, 0, np.pi / 2], atol=1e-15)

    def test_matches_homogeneous_oracle(self, rng):
        for _ in range(100):
            a, b = random_pose(rng), random_pose(rng)
            T = homogeneous(a) @ homogeneous(b)
            c = compose(a, b)
            np.testing.assert_allclose(homogeneous(c), T, atol=1e-12)

    def test_operator(self, rng):
        a, b = random_pose(rng), random_pose(rng)
        assert (a @ b).allclose(compose(a, b), 0.0)

    @settings(max_examples=200)
    @given(poses, poses, poses)
    def test_associative(self, a, b, c):
        left = compose(compose(a, b), c)
        right = compose(a, compose(b, c))
        np.testing.assert_allclose(homogeneous(left), homogeneous(right), atol=1e-10)

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidArgumentError):
            compose(Pose6([np.nan, 0, 0], np.zeros(3)), Pose6.identity())
        with pytest.raises(InvalidArgumentError):
            inverse(Pose6([0, np.inf, 0], np.zeros(3)))

    def test_batched_matches_scalar(self, rng):
        a = [random_pose(rng) for _ in range(20)]
        b = [random_pose(rng) for _ in range(20)]
        av = np.array([p.to_vector() for p in a])
        bv = np.array([p.to_vector() for p in b])
        out = compose_vec(av, bv)
        for k in range(20):
            assert Pose6.from_vector(out[k]).allclose(compose(a[k], b[k]), 1e-12)


class TestInverseRelative:
    def test_identity(self):
        assert inverse(Pose6.identity()).allclose(Pose6.identity(), 0.0)

    def test_pure_translation(self):
        out = inverse(Pose6([3, 0, 0], np.zeros(3)))
        np.testing.assert_allclose(out.t, [-3, 0, 0])
        np.testing.assert_allclose(out.r, 0)

    def test_random_inverse(self, rng):
        for _ in range(100):
            p = random_pose(rng)
            e = compose(p, inverse(p))
            np.testing.assert_allclose(e.t, 0, atol=1e-12)
            np.testing.assert_allclose(e.r, 0, atol=1e-12)
            e = compose(inverse(p), p)
            np.testing.assert_allclose(e.to_vector(), 0, atol=1e-12)

    def test_inverse_vec(self, rng):
        p = random_pose(rng)
        assert Pose6.from_vector(inverse_vec(p.to_vector())).allclose(inverse(p), 1e-12)

    def test_relative_trivial(self, rng):
        p = random_pose(rng)
        assert relative(p, p).allclose(Pose6.identity(), 1e-12)
        assert relative(Pose6.identity(), p).allclose(p, 1e-12)

    @settings(max_examples=200)
    @given(poses, poses)
    def test_relative_roundtrip(self, a, b):
        back = compose(a, relative(a, b))
        np.testing.assert_allclose(homogeneous(back), homogeneous(b), atol=1e-10)

    def test_relative_vec(self, rng):
        a, b = random_pose(rng), random_pose(rng)
        assert Pose6.from_vector(relative_vec(a.to_vector(), b.to_vector())).allclose(relative(a, b), 1e-12)


class TestPose6:
    def test_angles_normalized(self):
        p = Pose6([0, 0, 0], [3 * np.pi, 0.0, -3 * np.pi])
        np.testing.assert_allclose(p.r, [np.pi, 0.0, np.pi])

    def test_immutable(self):
        p = Pose6.identity()
        with pytest.raises(ValueError):
            p.t[0] = 1.0

    def test_rotation_angle(self, rng):
        for _ in range(20):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            th = rng.uniform(0, np.pi - 1e-6)
            K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
            R = np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * K @ K
            assert rotation_angle(R) == pytest.approx(th, abs=1e-9)
