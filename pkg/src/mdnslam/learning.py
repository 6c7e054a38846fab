"""Small dense networks trained with SGD: an MDN pose regressor and a
triplet-loss embedding projector.

These are deliberately tiny (two tanh hidden layers of width 32) so that
training runs in seconds on a CPU with plain numpy.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, MiningError, TrainingError
from .mdn import GmmParams, MdnLossConfig, mixture_nll

log = logging.getLogger(__name__)

HIDDEN = (32, 32)


@dataclass
class DenseNet:
    """Fully connected net; tanh on hidden layers, identity on the output.

    ``layers`` holds ``(W, b)`` with ``W`` of shape ``(out, in)``.
    """

    layers: list

    def __post_init__(self):
        for k, (W, b) in enumerate(self.layers):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise InvalidArgumentError(f"layer {k}: bad shapes {W.shape}, {b.shape}")
            if k and W.shape[1] != self.layers[k - 1][0].shape[0]:
                raise InvalidArgumentError(f"layer {k} input width does not chain")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def copy(self) -> "DenseNet":
        return DenseNet([(W.copy(), b.copy()) for W, b in self.layers])

    def to_dict(self) -> dict:
        return {
            "activation": "tanh",
            "layers": [
                {"shape": list(W.shape), "weights": W.ravel().tolist(), "bias": b.tolist()}
                for W, b in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenseNet":
        return cls(
            [
                (np.array(l["weights"], dtype=float).reshape(l["shape"]), np.array(l["bias"], dtype=float))
                for l in d["layers"]
            ]
        )


def init_dense(sizes, rng: np.random.Generator) -> DenseNet:
    """Glorot-uniform weights, zero biases."""
    layers = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (n_in + n_out))
        layers.append((rng.uniform(-lim, lim, size=(n_out, n_in)), np.zeros(n_out)))
    return DenseNet(layers)


def _forward_cache(net: DenseNet, x):
    acts = [x]
    h = x
    last = len(net.layers) - 1
    for k, (W, b) in enumerate(net.layers):
        h = h @ W.T + b
        if k < last:
            h = np.tanh(h)
        acts.append(h)
    return acts


def _as_batch(net: DenseNet, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x[None] if single else x
    if x2.shape[-1] != net.in_dim:
        raise InvalidArgumentError(f"input width {x2.shape[-1]} != network input {net.in_dim}")
    return x2, single


def forward(net: DenseNet, x) -> np.ndarray:
    """Forward pass for a vector ``(in,)`` or a batch ``(N, in)``."""
    x2, single = _as_batch(net, x)
    out = _forward_cache(net, x2)[-1]
    return out[0] if single else out


def backward(net: DenseNet, x, upstream) -> list:
    """Gradients of ``<upstream, forward(net, x)>`` w.r.t. every ``(W, b)``.

    For a batch the inner product is summed over rows.
    """
    x2, single = _as_batch(net, x)
    g = np.asarray(upstream, dtype=float)
    g = g[None] if single else g
    if g.shape != (x2.shape[0], net.out_dim):
        raise InvalidArgumentError(f"upstream shape {g.shape} does not match output")
    acts = _forward_cache(net, x2)
    grads = [None] * len(net.layers)
    for k in range(len(net.layers) - 1, -1, -1):
        W, _ = net.layers[k]
        grads[k] = (g.T @ acts[k], g.sum(axis=0))
        if k:
            g = (g @ W) * (1.0 - acts[k] ** 2)
    return grads


# -- configs -----------------------------------------------------------------

@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.2
    adjacency_exclusion: int = 18

    def __post_init__(self):
        if not self.margin > 0:
            raise InvalidArgumentError("triplet margin must be positive")
        if self.adjacency_exclusion < 0:
            raise InvalidArgumentError("adjacency_exclusion must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.003
    epochs: int = 150
    batch_size: int = 32
    seed: int = 0
    lr_decay: float = 0.75
    decay_every: int = 25
    grad_clip: float = 10.0
    optimizer: str = "rmsprop"
    rms_decay: float = 0.9

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidArgumentError("learning_rate must be positive")
        if self.epochs < 1:
            raise InvalidArgumentError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        if not 0 < self.lr_decay <= 1:
            raise InvalidArgumentError("lr_decay must be in (0, 1]")
        if self.decay_every < 1:
            raise InvalidArgumentError("decay_every must be >= 1")
        if self.optimizer not in ("sgd", "rmsprop"):
            raise InvalidArgumentError(f"unknown optimizer {self.optimizer!r}")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** (epoch // self.decay_every)


@dataclass
class Normalizer:
    """Min-max scaling to [0, 1] followed by mean subtraction."""

    offset: np.ndarray
    scale: np.ndarray
    mean: np.ndarray

    @classmethod
    def fit(cls, x) -> "Normalizer":
        x = np.asarray(x, dtype=float)
        lo, hi = x.min(axis=0), x.max(axis=0)
        scale = np.where(hi - lo > 0, hi - lo, 1.0)
        return cls(lo, scale, ((x - lo) / scale).mean(axis=0))

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim), np.zeros(dim))

    def __call__(self, x):
        return (np.asarray(x, dtype=float) - self.offset) / self.scale - self.mean

    def to_dict(self):
        return {"offset": self.offset.tolist(), "scale": self.scale.tolist(), "mean": self.mean.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.array(d[k], dtype=float) for k in ("offset", "scale", "mean")))


class _Stepper:
    """Clipped SGD or RMSProp updates applied in place to a :class:`DenseNet`."""

    def __init__(self, net: DenseNet, cfg: TrainConfig):
        self.net = net
        self.cfg = cfg
        self.sq = [(np.zeros_like(W), np.zeros_like(b)) for W, b in net.layers]

    def step(self, grads, lr: float) -> bool:
        norm = np.sqrt(sum(float(np.sum(gW * gW) + np.sum(gb * gb)) for gW, gb in grads))
        if not np.isfinite(norm):
            return False
        if norm > self.cfg.grad_clip:
            grads = [(gW * (self.cfg.grad_clip / norm), gb * (self.cfg.grad_clip / norm)) for gW, gb in grads]
        if self.cfg.optimizer == "rmsprop":
            rho = self.cfg.rms_decay
            self.sq = [(rho * sW + (1 - rho) * gW * gW, rho * sb + (1 - rho) * gb * gb)
                       for (sW, sb), (gW, gb) in zip(self.sq, grads)]
            grads = [(gW / (np.sqrt(sW) + 1e-8), gb / (np.sqrt(sb) + 1e-8))
                     for (sW, sb), (gW, gb) in zip(self.sq, grads)]
        self.net.layers = [(W - lr * gW, b - lr * gb) for (W, b), (gW, gb) in zip(self.net.layers, grads)]
        return True


def write_curve(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for e, v in enumerate(curve):
            w.writerow([e, repr(float(v))])


# -- MDN regressor -------------------------------------------------------------

@dataclass
class MdnRegressor:
    """Dense trunk with one mixture head per target group.

    For 6-D pose targets the groups are translation (dims 0-2) and rotation
    (dims 3-5) with the rotation NLL weighted by ``beta``.  Any other target
    width is a single group.  Targets are standardized internally.
    """

    net: DenseNet
    K: int
    groups: list
    weights: list
    x_norm: Normalizer
    y_mean: np.ndarray
    y_std: np.ndarray
    loss_curve: list = field(default_factory=list)

    def _split(self, out):
        heads = []
        c = 0
        K = self.K
        for lo, hi in self.groups:
            d = hi - lo
            logits = out[:, c:c + K]
            c += K
            mus = out[:, c:c + K * d].reshape(-1, K, d)
            c += K * d
            log_s = out[:, c:c + K * d].reshape(-1, K, d)
            c += K * d
            heads.append((logits, mus, log_s))
        return heads

    def _loss_and_upstream(self, xn, yn, with_grad=True):
        out = forward(self.net, xn)
        total = np.zeros(len(xn))
        ups = []
        for (lo, hi), w, (logits, mus, log_s) in zip(self.groups, self.weights, self._split(out)):
            res = mixture_nll(logits, mus, log_s, yn[:, lo:hi], with_grad=with_grad)
            if with_grad:
                nll, g = res
                n = len(xn)
                ups.extend([w * g.logits, w * g.mus.reshape(n, -1), w * g.log_sigmas.reshape(n, -1)])
            else:
                nll = res
            total += w * nll
        return total, (np.concatenate(ups, axis=1) if with_grad else None)

    def _log_jacobian(self):
        return sum(w * float(np.sum(np.log(self.y_std[lo:hi]))) for (lo, hi), w in zip(self.groups, self.weights))

    def loss(self, features, targets) -> np.ndarray:
        """Per-sample weighted NLL in original target units."""
        xn = self.x_norm(features)
        yn = (np.asarray(targets, dtype=float) - self.y_mean) / self.y_std
        nll, _ = self._loss_and_upstream(xn, yn, with_grad=False)
        return nll + self._log_jacobian()

    def predict(self, features) -> list:
        """Per-sample list of :class:`GmmParams`, one per target group, in target units."""
        out = forward(self.net, self.x_norm(np.atleast_2d(features)))
        heads = self._split(out)
        result = []
        for n in range(out.shape[0]):
            row = []
            for (lo, hi), (logits, mus, log_s) in zip(self.groups, heads):
                m = mus[n] * self.y_std[lo:hi] + self.y_mean[lo:hi]
                s = np.exp(log_s[n]) * self.y_std[lo:hi]
                row.append(GmmParams.from_unconstrained(logits[n], m, np.log(s)))
            result.append(row)
        return result

    def predict_mode(self, features):
        """Means and variances of the dominant component per group, stacked to ``(N, D)``."""
        out = forward(self.net, self.x_norm(np.atleast_2d(features)))
        n = out.shape[0]
        mean = np.empty((n, len(self.y_mean)))
        var = np.empty_like(mean)
        rows = np.arange(n)
        for (lo, hi), (logits, mus, log_s) in zip(self.groups, self._split(out)):
            k = np.argmax(logits, axis=1)
            mean[:, lo:hi] = mus[rows, k] * self.y_std[lo:hi] + self.y_mean[lo:hi]
            var[:, lo:hi] = (np.exp(log_s[rows, k]) * self.y_std[lo:hi]) ** 2
        return mean, var

    def to_dict(self) -> dict:
        return {
            "kind": "mdn_regressor",
            "K": self.K,
            "groups": [list(g) for g in self.groups],
            "weights": list(self.weights),
            "x_norm": self.x_norm.to_dict(),
            "y_mean": self.y_mean.tolist(),
            "y_std": self.y_std.tolist(),
            "net": self.net.to_dict(),
        }

    @classmethod
    def from_dict(cls, d) -> "MdnRegressor":
        return cls(
            DenseNet.from_dict(d["net"]), d["K"], [tuple(g) for g in d["groups"]], d["weights"],
            Normalizer.from_dict(d["x_norm"]), np.array(d["y_mean"]), np.array(d["y_std"]),
        )


def train_mdn_regressor(features, targets, cfg: TrainConfig = TrainConfig(),
                        loss_cfg: MdnLossConfig = MdnLossConfig()) -> MdnRegressor:
    """Fit an MDN regressor by minibatch SGD on the (beta-weighted) mixture NLL.

    ``targets`` is ``(N, D)``; with ``D == 6`` the columns are (t, r) of a pose.
    ``loss_curve`` on the result holds the mean loss at epoch 0 (before any
    update) and after every epoch.
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if len(x) == 0 or len(x) != len(y):
        raise InvalidArgumentError("need a non-empty, aligned feature/target set")
    D = y.shape[1]
    K = int(loss_cfg.K)
    if D == 6:
        groups, weights = [(0, 3), (3, 6)], [1.0, float(loss_cfg.beta)]
    else:
        groups, weights = [(0, D)], [1.0]
    rng = np.random.default_rng(cfg.seed)
    out_dim = sum(K + 2 * K * (hi - lo) for lo, hi in groups)
    net = init_dense((x.shape[1],) + HIDDEN + (out_dim,), rng)
    y_mean = y.mean(axis=0)
    y_std = y.std(axis=0)
    y_std = np.where(y_std > 1e-12, y_std, 1.0)
    model = MdnRegressor(net, K, groups, weights, Normalizer.fit(x), y_mean, y_std)
    # spread the initial component means so the mixture is not symmetric
    W, b = model.net.layers[-1]
    b = b.copy()
    c = 0
    for lo, hi in groups:
        d = hi - lo
        c += K
        b[c:c + K * d] = np.repeat(np.linspace(-1.0, 1.0, K) if K > 1 else [0.0], d)
        c += 2 * K * d
    model.net.layers[-1] = (W, b)

    xn = model.x_norm(x)
    yn = (y - y_mean) / y_std
    wsum = sum(weights)
    curve = [float(np.mean(model.loss(x, y)))]
    n = len(xn)
    stepper = _Stepper(model.net, cfg)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch) / (wsum if cfg.optimizer == "sgd" else 1.0)
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            _, up = model._loss_and_upstream(xn[idx], yn[idx])
            grads = backward(model.net, xn[idx], up / len(idx))
            if not stepper.step(grads, lr):
                raise TrainingError(f"non-finite gradient at epoch {epoch + 1}", epoch + 1)
        epoch_loss = float(np.mean(model.loss(x, y)))
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"loss diverged at epoch {epoch + 1}", epoch + 1)
        curve.append(epoch_loss)
    model.loss_curve = curve
    log.debug("mdn training: loss %.4f -> %.4f", curve[0], curve[-1])
    return model


# -- embedding -------------------------------------------------------------------

def triplet_loss(a, p, n, cfg: TripletConfig = TripletConfig()) -> float:
    a, p, n = (np.asarray(v, dtype=float) for v in (a, p, n))
    if not a.shape == p.shape == n.shape:
        raise InvalidArgumentError("triplet members must have equal dimensions")
    return float(max(cfg.margin + np.sum((a - p) ** 2) - np.sum((a - n) ** 2), 0.0))


def triplet_loss_grad(a, p, n, cfg: TripletConfig = TripletConfig()):
    """Batched hinge loss and its subgradients w.r.t. (a, p, n); rows are triplets."""
    dap = np.sum((a - p) ** 2, axis=-1)
    dan = np.sum((a - n) ** 2, axis=-1)
    raw = cfg.margin + dap - dan
    active = (raw > 0).astype(float)[..., None]
    loss = np.maximum(raw, 0.0)
    return loss, 2.0 * (n - p) * active, -2.0 * (a - p) * active, 2.0 * (a - n) * active


@dataclass
class EmbeddingNet:
    """Dense projector whose forward pass ends in L2 normalization."""

    net: DenseNet
    x_norm: Normalizer
    loss_curve: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.net.out_dim

    def _raw(self, x):
        return forward(self.net, self.x_norm(np.atleast_2d(x)))

    def embed(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = self._raw(x)
        e = y / np.linalg.norm(y, axis=1, keepdims=True)
        return e[0] if x.ndim == 1 else e

    def _batch_loss(self, a, p, n, tcfg, with_grad=True):
        m = len(a)
        xn = self.x_norm(np.concatenate([a, p, n]))
        y = forward(self.net, xn)
        norm = np.linalg.norm(y, axis=1, keepdims=True)
        e = y / norm
        loss, ga, gp, gn = triplet_loss_grad(e[:m], e[m:2 * m], e[2 * m:], tcfg)
        if not with_grad:
            return loss, None
        g = np.concatenate([ga, gp, gn]) / m
        # through the normalization: (I - e e^T) / |y|
        g = (g - e * np.sum(e * g, axis=1, keepdims=True)) / norm
        return loss, backward(self.net, xn, g)

    def mean_loss(self, triplets, tcfg: TripletConfig = TripletConfig()) -> float:
        t = np.asarray(triplets, dtype=float)
        loss, _ = self._batch_loss(t[:, 0], t[:, 1], t[:, 2], tcfg, with_grad=False)
        return float(np.mean(loss))

    def to_dict(self) -> dict:
        return {"kind": "embedding", "x_norm": self.x_norm.to_dict(), "net": self.net.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "EmbeddingNet":
        return cls(DenseNet.from_dict(d["net"]), Normalizer.from_dict(d["x_norm"]))


def train_embedding(triplets, cfg: TrainConfig = TrainConfig(), tcfg: TripletConfig = TripletConfig(),
                    embedding_dim: int = 128, x_norm: Normalizer | None = None) -> EmbeddingNet:
    """Train a projector on ``triplets`` of shape ``(T, 3, obs_dim)`` with the hinge triplet loss."""
    t = np.asarray(triplets, dtype=float)
    if t.ndim != 3 or t.shape[0] == 0 or t.shape[1] != 3:
        raise InvalidArgumentError("triplets must be a non-empty (T, 3, dim) array")
    rng = np.random.default_rng(cfg.seed)
    if x_norm is None:
        x_norm = Normalizer.fit(t.reshape(-1, t.shape[2]))
    model = EmbeddingNet(init_dense((t.shape[2],) + HIDDEN + (embedding_dim,), rng), x_norm)
    curve = [model.mean_loss(t, tcfg)]
    T = len(t)
    stepper = _Stepper(model.net, cfg)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(T)
        for s in range(0, T, cfg.batch_size):
            b = t[order[s:s + cfg.batch_size]]
            _, grads = model._batch_loss(b[:, 0], b[:, 1], b[:, 2], tcfg)
            if not stepper.step(grads, lr):
                raise TrainingError(f"non-finite gradient at epoch {epoch + 1}", epoch + 1)
        epoch_loss = model.mean_loss(t, tcfg)
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"loss diverged at epoch {epoch + 1}", epoch + 1)
        curve.append(epoch_loss)
    model.loss_curve = curve
    log.debug("embedding training: loss %.4f -> %.4f", curve[0], curve[-1])
    return model


def mine_triplets(loop_pairs, n_frames: int, tcfg: TripletConfig, rng: np.random.Generator) -> np.ndarray:
    """Index triplets ``(anchor, positive, negative)``; two per loop pair.

    Each pair is used in both orders.  Negatives are uniform over frames that
    are farther than ``adjacency_exclusion`` from both members of the pair and
    are not themselves listed as a loop partner of either member.
    """
    out = []
    frames = np.arange(n_frames)
    ex = tcfg.adjacency_exclusion
    pairs = [(int(i), int(j)) for i, j in loop_pairs]
    partners = {}
    for i, j in pairs:
        if not (0 <= i < n_frames and 0 <= j < n_frames):
            raise InvalidArgumentError(f"loop pair ({i}, {j}) out of range")
        partners.setdefault(i, set()).add(j)
        partners.setdefault(j, set()).add(i)
    for i, j in pairs:
        ok = (np.abs(frames - i) > ex) & (np.abs(frames - j) > ex)
        ok[list(partners[i] | partners[j])] = False
        cand = frames[ok]
        if cand.size == 0:
            raise MiningError(f"no valid negative for loop pair ({i}, {j})")
        for a, p in ((i, j), (j, i)):
            out.append((a, p, int(rng.choice(cand))))
    return np.array(out, dtype=int).reshape(-1, 3)


def save_checkpoint(model, path):
    Path(path).write_text(json.dumps(model.to_dict()))


def load_checkpoint(path):
    d = json.loads(Path(path).read_text())
    if d.get("kind") == "mdn_regressor":
        return MdnRegressor.from_dict(d)
    if d.get("kind") == "embedding":
        return EmbeddingNet.from_dict(d)
    raise InvalidArgumentError(f"unknown checkpoint kind {d.get('kind')!r}")
