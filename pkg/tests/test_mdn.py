import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from mdnslam.errors import InvalidArgumentError
from mdnslam.geometry import Pose6
from mdnslam.mdn import (
    GmmParams,
    HuberConfig,
    MdnLossConfig,
    gmm_nll,
    gmm_nll_grad,
    huber,
    mdn_pose_loss,
    mixture_nll,
    mode_pose,
    sample_pose,
)

HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


def random_params(rng, K, D, spread=1.0):
    logits = rng.normal(size=K)
    a = np.exp(logits - logits.max())
    return GmmParams(a / a.sum(), rng.normal(0, spread, (K, D)), np.exp(rng.uniform(-0.7, 0.7, (K, D))))


def direct_nll(p: GmmParams, x):
    # plain density sum, no log-sum-exp
    dens = 0.0
    for k in range(p.K):
        dens += p.alphas[k] * np.prod(norm.pdf(x, p.mus[k], p.sigmas[k]))
    return -np.log(dens)


def nll_unconstrained(logits, mus, log_s, x):
    return float(mixture_nll(logits[None], mus[None], log_s[None], x[None])[0])


class TestNll:
    def test_standard_normal(self):
        p = GmmParams([1.0], [[0.0]], [[1.0]])
        assert gmm_nll(p, [0.0]) == pytest.approx(HALF_LOG_2PI, abs=1e-12)

    def test_identical_components(self, rng):
        p1 = random_params(rng, 1, 3)
        p2 = GmmParams([0.5, 0.5], np.vstack([p1.mus, p1.mus]), np.vstack([p1.sigmas, p1.sigmas]))
        x = rng.normal(size=3)
        assert gmm_nll(p2, x) == pytest.approx(gmm_nll(p1, x), abs=1e-12)

    def test_direct_density_oracle(self, rng):
        for _ in range(100):
            K, D = rng.integers(1, 11), rng.integers(1, 7)
            p = random_params(rng, K, D)
            x = rng.normal(size=D)
            ref = direct_nll(p, x)
            assert abs(gmm_nll(p, x) - ref) <= 1e-10 * max(abs(ref), 1.0)

    def test_far_target_stays_finite(self):
        p = GmmParams([0.5, 0.5], [[0.0], [1.0]], [[1e-3], [1e-3]])
        v = gmm_nll(p, [1e3])
        assert np.isfinite(v) and v > 1e10

    def test_dimension_mismatch(self, rng):
        with pytest.raises(InvalidArgumentError):
            gmm_nll(random_params(rng, 2, 3), np.zeros(2))

    @settings(max_examples=50)
    @given(st.integers(2, 6), st.integers(1, 4), st.integers(0, 2 ** 31))
    def test_permutation_invariant(self, K, D, seed):
        r = np.random.default_rng(seed)
        p = random_params(r, K, D)
        perm = r.permutation(K)
        q = GmmParams(p.alphas[perm], p.mus[perm], p.sigmas[perm])
        x = r.normal(size=D)
        assert gmm_nll(q, x) == pytest.approx(gmm_nll(p, x), rel=1e-12, abs=1e-12)

    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 3))
    def test_mean_toward_target_decreases(self, mu, target, sigma):
        if abs(mu - target) < 1e-6:
            return
        closer = mu + 0.5 * (target - mu)
        a = gmm_nll(GmmParams([1.0], [[mu]], [[sigma]]), [target])
        b = gmm_nll(GmmParams([1.0], [[closer]], [[sigma]]), [target])
        assert b < a

    def test_invalid_params(self):
        with pytest.raises(InvalidArgumentError):
            GmmParams([0.6, 0.6], [[0.0], [1.0]], [[1.0], [1.0]])
        with pytest.raises(InvalidArgumentError):
            GmmParams([1.0], [[0.0]], [[0.0]])

    def test_json_roundtrip(self, rng):
        p = random_params(rng, 3, 2)
        q = GmmParams.from_dict(p.to_dict())
        np.testing.assert_array_equal(q.mus, p.mus)
        np.testing.assert_array_equal(q.sigmas, p.sigmas)


class TestGradient:
    def test_stationary_at_mean(self, rng):
        p = GmmParams([1.0], [[0.3, -0.2]], [[0.5, 2.0]])
        g = gmm_nll_grad(p, [0.3, -0.2])
        np.testing.assert_array_equal(g.mus, 0.0)

    def test_symmetric_pair(self):
        p = GmmParams([0.5, 0.5], [[-1.0], [1.0]], [[0.7], [0.7]])
        g = gmm_nll_grad(p, [0.0])
        assert g.logits[0] == pytest.approx(g.logits[1], abs=1e-15)

    @pytest.mark.parametrize("K", [1, 5, 10])
    @pytest.mark.parametrize("D", [1, 3, 6])
    def test_finite_differences(self, K, D):
        rng = np.random.default_rng(K * 10 + D)
        h = 1e-5
        for _ in range(100 // 9 + 1):
            logits = rng.normal(size=K)
            mus = rng.normal(size=(K, D))
            log_s = rng.uniform(-0.5, 0.5, (K, D))
            x = rng.normal(size=D)
            _, g = mixture_nll(logits[None], mus[None], log_s[None], x[None], with_grad=True)
            for arr, grad in ((logits, g.logits[0]), (mus, g.mus[0]), (log_s, g.log_sigmas[0])):
                flat = arr.reshape(-1)
                for i in range(flat.size):
                    old = flat[i]
                    flat[i] = old + h
                    up = nll_unconstrained(logits, mus, log_s, x)
                    flat[i] = old - h
                    dn = nll_unconstrained(logits, mus, log_s, x)
                    flat[i] = old
                    fd = (up - dn) / (2 * h)
                    an = grad.reshape(-1)[i]
                    assert abs(an - fd) <= 1e-4 * max(abs(fd), 1e-3)

    def test_logit_gradient_sums_to_zero(self, rng):
        g = gmm_nll_grad(random_params(rng, 4, 2), rng.normal(size=2))
        assert g.logits.sum() == pytest.approx(0.0, abs=1e-14)


class TestPoseExtraction:
    def test_collapsed_sample(self, rng):
        t = GmmParams([1.0], [[1.0, 2.0, 3.0]], [[1e-12] * 3])
        r = GmmParams([1.0], [[0.1, 0.2, 0.3]], [[1e-12] * 3])
        pose, var = sample_pose(t, r, rng)
        np.testing.assert_allclose(pose.t, [1, 2, 3], atol=1e-6)
        np.testing.assert_allclose(pose.r, [0.1, 0.2, 0.3], atol=1e-6)
        np.testing.assert_allclose(var, 1e-24)

    def test_sample_deterministic(self):
        t = GmmParams([0.3, 0.7], np.zeros((2, 3)), np.ones((2, 3)))
        a = sample_pose(t, t, np.random.default_rng(5))
        b = sample_pose(t, t, np.random.default_rng(5))
        np.testing.assert_array_equal(a[0].to_vector(), b[0].to_vector())
        np.testing.assert_array_equal(a[1], b[1])

    def test_component_frequencies(self):
        rng = np.random.default_rng(0)
        t = GmmParams([0.3, 0.7], [[0, 0, 0], [1, 1, 1]], [[1.0] * 3, [2.0] * 3])
        r = GmmParams([1.0], [[0.0] * 3], [[1.0] * 3])
        N = 100_000
        picks = np.array([sample_pose(t, r, rng)[1][0] for _ in range(N)])
        assert abs(np.mean(picks == 4.0) - 0.7) < 0.01

    def test_single_component_mean(self):
        rng = np.random.default_rng(1)
        mu = np.array([0.5, -1.0, 2.0])
        t = GmmParams([1.0], [mu], [[0.3, 0.3, 0.3]])
        N = 100_000
        draws = np.array([sample_pose(t, t, rng)[0].t for _ in range(N)])
        assert np.all(np.abs(draws.mean(axis=0) - mu) < 3 * 0.3 / np.sqrt(N))

    def test_mode_single(self):
        t = GmmParams([1.0], [[1.0, 2.0, 3.0]], [[0.1, 0.2, 0.3]])
        pose, var = mode_pose(t, t)
        np.testing.assert_allclose(pose.t, [1, 2, 3])
        np.testing.assert_allclose(var, [0.01, 0.04, 0.09] * 2)

    def test_mode_argmax_and_tie(self):
        mus = [[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]]
        sig = np.ones((2, 3))
        pose, _ = mode_pose(GmmParams([0.7, 0.3], mus, sig), GmmParams([0.3, 0.7], mus, sig))
        np.testing.assert_allclose(pose.t, 0.0)
        np.testing.assert_allclose(pose.r, 0.5)
        pose, _ = mode_pose(GmmParams([0.5, 0.5], mus, sig), GmmParams([0.5, 0.5], mus, sig))
        np.testing.assert_allclose(pose.to_vector(), 0.0)


class TestHuberAndPoseLoss:
    def test_branches(self):
        assert huber([0.5]) == pytest.approx(0.125)
        assert huber([2.0]) == pytest.approx(1.5)

    def test_continuity(self):
        for d in (0.3, 1.0, 4.0):
            cfg = HuberConfig(d)
            assert huber([d], cfg) == pytest.approx(0.5 * d * d)
            assert huber([d + 1e-9], cfg) == pytest.approx(huber([d], cfg), abs=1e-8)

    def test_elementwise_mean(self):
        assert huber([0.5, 2.0]) == pytest.approx((0.125 + 1.5) / 2)

    def test_delta_validated(self):
        with pytest.raises(InvalidArgumentError):
            HuberConfig(0.0)

    def test_beta_one_doubles(self):
        p = GmmParams([1.0], [[0.0] * 3], [[1.0] * 3])
        v = gmm_nll(p, np.zeros(3))
        assert mdn_pose_loss(p, p, Pose6.identity(), MdnLossConfig(beta=1.0)) == pytest.approx(2 * v)

    def test_tiny_beta(self, rng):
        t, r = random_params(rng, 2, 3), random_params(rng, 2, 3, spread=0.3)
        target = Pose6(rng.normal(size=3), rng.uniform(-0.5, 0.5, 3))
        loss = mdn_pose_loss(t, r, target, MdnLossConfig(beta=1e-9))
        assert loss == pytest.approx(gmm_nll(t, target.t), abs=1e-6)

    def test_compositional(self, rng):
        t, r = random_params(rng, 3, 3), random_params(rng, 3, 3, spread=0.3)
        target = Pose6(rng.normal(size=3), rng.uniform(-0.5, 0.5, 3))
        expect = gmm_nll(t, target.t) + 100 * gmm_nll(r, target.r)
        assert mdn_pose_loss(t, r, target) == pytest.approx(expect, rel=1e-12)

    def test_config_validation(self):
        with pytest.raises(InvalidArgumentError):
            MdnLossConfig(beta=0.0)
        with pytest.raises(InvalidArgumentError):
            MdnLossConfig(K=0)
