"""Gaussian-mixture output layer math for mixture density networks.

Everything is evaluated in log space.  The unconstrained parameterization
used for gradients is: softmax logits for the mixture weights, raw means, and
log standard deviations (``sigma = exp(s)``).  Covariances are diagonal.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidArgumentError
from .geometry import Pose6

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True, eq=False)
class GmmParams:
    """Mixture weights ``alphas (K,)``, means ``mus (K, D)``, stddevs ``sigmas (K, D)``."""

    alphas: np.ndarray
    mus: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        alphas = np.array(self.alphas, dtype=float).reshape(-1)
        mus = np.array(self.mus, dtype=float)
        if mus.ndim == 1:
            mus = mus.reshape(len(alphas), -1)
        sigmas = np.array(self.sigmas, dtype=float).reshape(mus.shape)
        if mus.shape[0] != alphas.shape[0]:
            raise InvalidArgumentError("alphas and mus disagree on component count")
        if np.any(alphas < 0) or abs(alphas.sum() - 1.0) > 1e-12:
            raise InvalidArgumentError("mixture weights must be non-negative and sum to 1")
        if not np.all(sigmas > 0):
            raise InvalidArgumentError("standard deviations must be strictly positive")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "mus", mus)
        object.__setattr__(self, "sigmas", sigmas)

    @property
    def K(self) -> int:
        return self.mus.shape[0]

    @property
    def D(self) -> int:
        return self.mus.shape[1]

    @classmethod
    def from_unconstrained(cls, logits, mus, log_sigmas) -> "GmmParams":
        logits = np.asarray(logits, dtype=float)
        alphas = np.exp(logits - logsumexp(logits))
        alphas = alphas / alphas.sum()
        return cls(alphas, mus, np.exp(log_sigmas))

    def to_dict(self) -> dict:
        return {"alphas": self.alphas.tolist(), "mus": self.mus.tolist(), "sigmas": self.sigmas.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GmmParams":
        return cls(d["alphas"], d["mus"], d["sigmas"])


@dataclass(frozen=True)
class MdnLossConfig:
    beta: float = 100.0
    K: int = 10

    def __post_init__(self):
        if not self.beta > 0:
            raise InvalidArgumentError("beta must be positive")
        if int(self.K) < 1:
            raise InvalidArgumentError("K must be at least 1")


@dataclass(frozen=True)
class HuberConfig:
    delta: float = 1.0

    def __post_init__(self):
        if not self.delta > 0:
            raise InvalidArgumentError("delta must be positive")


class MdnGrad(NamedTuple):
    logits: np.ndarray
    mus: np.ndarray
    log_sigmas: np.ndarray


def mixture_nll(logits, mus, log_sigmas, targets, with_grad: bool = False):
    """Batched mixture NLL in the unconstrained parameterization.

    Shapes: ``logits (N, K)``, ``mus``/``log_sigmas (N, K, D)``, ``targets (N, D)``.
    Returns ``nll (N,)`` and, if requested, an :class:`MdnGrad` of per-sample
    gradients with the input shapes.
    """
    logits = np.asarray(logits, dtype=float)
    mus = np.asarray(mus, dtype=float)
    log_sigmas = np.asarray(log_sigmas, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if targets.shape[-1] != mus.shape[-1] or mus.shape != log_sigmas.shape:
        raise InvalidArgumentError(
            f"dimension mismatch: target {targets.shape}, means {mus.shape}, log-sigmas {log_sigmas.shape}"
        )
    log_alpha = logits - logsumexp(logits, axis=-1, keepdims=True)
    z = (targets[:, None, :] - mus) * np.exp(-log_sigmas)
    log_comp = log_alpha + np.sum(-0.5 * LOG_2PI - log_sigmas - 0.5 * z * z, axis=-1)
    log_p = logsumexp(log_comp, axis=-1)
    nll = -log_p
    if not with_grad:
        return nll
    resp = np.exp(log_comp - log_p[:, None])
    g_logits = np.exp(log_alpha) - resp
    g_mus = -resp[..., None] * z * np.exp(-log_sigmas)
    g_log_sigmas = resp[..., None] * (1.0 - z * z)
    return nll, MdnGrad(g_logits, g_mus, g_log_sigmas)


def _check_target(params: GmmParams, target) -> np.ndarray:
    target = np.asarray(target, dtype=float).reshape(-1)
    if target.shape[0] != params.D:
        raise InvalidArgumentError(f"target has {target.shape[0]} dims, mixture has {params.D}")
    if not np.all(np.isfinite(target)):
        raise InvalidArgumentError("target must be finite")
    return target


def gmm_nll(params: GmmParams, target) -> float:
    """Negative log-likelihood of ``target`` under the diagonal mixture."""
    target = _check_target(params, target)
    with np.errstate(divide="ignore"):
        logits = np.log(params.alphas)
    return float(mixture_nll(logits[None], params.mus[None], np.log(params.sigmas)[None], target[None])[0])


def gmm_nll_grad(params: GmmParams, target) -> MdnGrad:
    """Gradient of :func:`gmm_nll` w.r.t. (logits, means, log-sigmas).

    Logits are taken as ``log(alphas)``; the gradient is the same for any
    logits that differ from those by a constant.
    """
    target = _check_target(params, target)
    with np.errstate(divide="ignore"):
        logits = np.log(params.alphas)
    _, g = mixture_nll(logits[None], params.mus[None], np.log(params.sigmas)[None], target[None], with_grad=True)
    return MdnGrad(g.logits[0], g.mus[0], g.log_sigmas[0])


def sample_pose(trans: GmmParams, rot: GmmParams, rng: np.random.Generator):
    """Draw a pose from independent translation/rotation mixtures.

    Returns ``(Pose6, variances)`` where ``variances`` is the 6-vector of the
    drawn components' per-axis variances.
    """
    kt = int(rng.choice(trans.K, p=trans.alphas))
    kr = int(rng.choice(rot.K, p=rot.alphas))
    t = trans.mus[kt] + trans.sigmas[kt] * rng.standard_normal(trans.D)
    r = rot.mus[kr] + rot.sigmas[kr] * rng.standard_normal(rot.D)
    var = np.concatenate([trans.sigmas[kt] ** 2, rot.sigmas[kr] ** 2])
    return Pose6(t, r), var


def mode_pose(trans: GmmParams, rot: GmmParams):
    """Mean and variances of the heaviest component (lowest index on ties)."""
    kt = int(np.argmax(trans.alphas))
    kr = int(np.argmax(rot.alphas))
    var = np.concatenate([trans.sigmas[kt] ** 2, rot.sigmas[kr] ** 2])
    return Pose6(trans.mus[kt], rot.mus[kr]), var


def huber(xi, cfg: HuberConfig = HuberConfig()) -> float:
    a = np.abs(np.asarray(xi, dtype=float))
    d = cfg.delta
    h = np.where(a <= d, 0.5 * a * a, d * (a - 0.5 * d))
    return float(np.mean(h))


def mdn_pose_loss(trans: GmmParams, rot: GmmParams, target: Pose6, cfg: MdnLossConfig = MdnLossConfig()) -> float:
    # raw Euler angles are used; targets are expected wrapped like the means
    return gmm_nll(trans, target.t) + cfg.beta * gmm_nll(rot, target.r)
