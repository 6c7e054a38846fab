"""Deterministic synthetic worlds: ground truth, noisy odometry, place
observations, true loops and injected false loop proposals.

Random numbers come from xoshiro256** seeded through splitmix64, with
Box-Muller normals, so a scenario is a pure function of its ``WorldSpec``
and can be regenerated bit-for-bit by any implementation of the same
recipe:

* ``stream(seed, k)`` seeds xoshiro256** with four consecutive splitmix64
  outputs starting from ``seed ^ (k * 0x9E3779B97F4A7C15 mod 2**64)``.
* ``uniform()`` is ``(next() >> 11) * 2**-53``.
* ``normal()`` draws ``u1, u2`` and returns ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``.

Streams: 1 odometry noise, 2 observation noise, 3 loop noise and false
loop injection.  Place and heading signatures use streams keyed by a hash
of ``(place_seed, cell)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .geometry import Pose6, relative_vec, wrap_angle
from .outlier_rejection import LoopProposal

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
SHAPES = ("square_loop", "figure_eight", "corridor_uturn")


def splitmix64(state: int):
    """One splitmix64 step; returns ``(output, new_state)``."""
    state = (state + GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31), state


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** 1.0."""

    def __init__(self, seed: int = 0, state=None):
        if state is not None:
            self.s = [int(v) & MASK64 for v in state]
        else:
            sm = int(seed) & MASK64
            self.s = []
            for _ in range(4):
                out, sm = splitmix64(sm)
                self.s.append(out)
        if not any(self.s):
            raise InvalidArgumentError("xoshiro state must not be all zero")

    def next(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self) -> float:
        return (self.next() >> 11) * (1.0 / 9007199254740992.0)

    def normal(self) -> float:
        u1 = self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)

    def normals(self, n: int) -> np.ndarray:
        return np.array([self.normal() for _ in range(n)])

    def below(self, n: int) -> int:
        """Integer in ``[0, n)`` via multiply-shift on the top 32 bits."""
        return ((self.next() >> 32) * n) >> 32

    def permutation(self, n: int) -> list:
        p = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            p[i], p[j] = p[j], p[i]
        return p


def stream(seed: int, k: int) -> Xoshiro256:
    return Xoshiro256((int(seed) ^ ((k * GOLDEN) & MASK64)) & MASK64)


def _hash_key(*parts: int) -> int:
    h = 0x243F6A8885A308D3
    for p in parts:
        h, _ = splitmix64((h ^ (int(p) & MASK64)) & MASK64)
    return h


@dataclass(frozen=True)
class WorldSpec:
    """Synthetic world and sensor noise description.

    ``nuc_intervals`` holds ``(start, end, multiplier)`` triples: odometry
    steps ``start <= k < end`` get their noise scaled by ``multiplier``.
    ``laps`` repeats the closed path; frames per lap is ``n_frames // laps``.
    """

    shape: str = "square_loop"
    n_frames: int = 200
    step_length: float = 0.2
    odom_noise: tuple = (0.02, math.radians(0.5))
    turn_noise_multiplier: float = 1.0
    nuc_intervals: tuple = ()
    place_grid_resolution: float = 1.0
    observation_noise: float = 0.05
    false_loop_rate: float = 0.0
    false_loop_offset: float = 1.0
    seed: int = 0
    laps: int = 2
    place_seed: int = 0
    obs_dim: int = 32
    heading_weight: float = 0.5
    n_loop_proposals: int = 10
    loop_noise: tuple = (0.02, math.radians(0.5))
    min_variance: float = 1e-10

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise InvalidArgumentError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if self.n_frames < 2:
            raise InvalidArgumentError("n_frames must be >= 2")
        if self.laps < 1 or self.n_frames // self.laps < 4:
            raise InvalidArgumentError("need laps >= 1 and at least 4 frames per lap")
        if not self.step_length > 0:
            raise InvalidArgumentError("step_length must be positive")
        object.__setattr__(self, "odom_noise", tuple(float(v) for v in self.odom_noise))
        object.__setattr__(self, "loop_noise", tuple(float(v) for v in self.loop_noise))
        object.__setattr__(self, "nuc_intervals", tuple(tuple(v) for v in self.nuc_intervals))
        if min(self.odom_noise + self.loop_noise) < 0 or self.observation_noise < 0:
            raise InvalidArgumentError("noise levels must be >= 0")
        if len(self.odom_noise) != 2 or len(self.loop_noise) != 2:
            raise InvalidArgumentError("noise tuples are (sigma_t, sigma_r)")
        if self.turn_noise_multiplier < 0:
            raise InvalidArgumentError("turn_noise_multiplier must be >= 0")
        for iv in self.nuc_intervals:
            if len(iv) != 3 or iv[0] > iv[1] or iv[2] < 0:
                raise InvalidArgumentError(f"bad NUC interval {iv}")
        if not 0 <= self.false_loop_rate < 1:
            raise InvalidArgumentError("false_loop_rate must lie in [0, 1)")
        if self.false_loop_offset < 0 or self.place_grid_resolution <= 0:
            raise InvalidArgumentError("offset must be >= 0 and grid resolution > 0")
        if self.n_loop_proposals < 0 or self.obs_dim < 1 or not self.min_variance > 0:
            raise InvalidArgumentError("invalid proposal count, obs_dim or min_variance")

    @property
    def frames_per_lap(self) -> int:
        return self.n_frames // self.laps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["odom_noise"] = list(self.odom_noise)
        d["loop_noise"] = list(self.loop_noise)
        d["nuc_intervals"] = [list(v) for v in self.nuc_intervals]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise InvalidArgumentError(f"unknown world fields: {sorted(unknown)}")
        d = dict(d)
        for k in ("odom_noise", "loop_noise"):
            if k in d:
                d[k] = tuple(d[k])
        if "nuc_intervals" in d:
            d["nuc_intervals"] = tuple(tuple(v) for v in d["nuc_intervals"])
        return cls(**d)


@dataclass
class SyntheticScenario:
    spec: WorldSpec
    gt: np.ndarray  # (N, 6)
    odometry: np.ndarray  # (N-1, 6) measured relative poses
    odometry_cov: np.ndarray  # (N-1, 6) true per-axis variances
    noise_multiplier: np.ndarray  # (N-1,)
    observations: np.ndarray  # (N, obs_dim)
    true_loops: list  # (i, j, Pose6)
    proposals: list  # LoopProposal
    proposal_is_false: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def n_frames(self) -> int:
        return len(self.gt)

    @property
    def gt_relative(self) -> np.ndarray:
        return relative_vec(self.gt[:-1], self.gt[1:])


# -- paths --------------------------------------------------------------------

def _curve(shape: str, perimeter: float, s):
    """Position and heading on a closed planar path at arc length ``s``."""
    s = np.mod(np.asarray(s, dtype=float), perimeter)
    if shape == "figure_eight":
        r = perimeter / (4 * np.pi)
        first = s < perimeter / 2
        phi = np.where(first, s / r, (s - perimeter / 2) / r)
        # first circle counter-clockwise around (0, r), second clockwise around (0, -r)
        x = r * np.sin(phi)
        y = np.where(first, r - r * np.cos(phi), -r + r * np.cos(phi))
        yaw = np.where(first, phi, -phi)
        return x, y, wrap_angle(yaw)
    rc = perimeter / 40.0
    if shape == "square_loop":
        a = (perimeter - 2 * np.pi * rc) / 4
        segs = [("line", a), ("arc", np.pi / 2 * rc)] * 4
    else:  # corridor_uturn
        a = (perimeter - 2 * np.pi * rc) / 2
        segs = [("line", a), ("arc", np.pi * rc)] * 2
    x = np.empty_like(s)
    y = np.empty_like(s)
    yaw = np.empty_like(s)
    for n, sv in enumerate(s):
        px, py, h = 0.0, 0.0, 0.0
        rem = sv
        for kind, length in segs:
            d = min(rem, length)
            if kind == "line":
                px += d * np.cos(h)
                py += d * np.sin(h)
            else:
                dh = d / rc
                px += rc * (np.sin(h + dh) - np.sin(h))
                py += rc * (np.cos(h) - np.cos(h + dh))
                h += dh
            rem -= d
            if rem <= 0:
                break
        x[n], y[n], yaw[n] = px, py, h
    return x, y, wrap_angle(yaw)


def ground_truth(spec: WorldSpec) -> np.ndarray:
    L = spec.frames_per_lap
    perimeter = L * spec.step_length
    # whole laps wrap exactly onto frame multiples of L
    s = np.mod(np.arange(spec.n_frames), L) * spec.step_length
    x, y, yaw = _curve(spec.shape, perimeter, s)
    gt = np.zeros((spec.n_frames, 6))
    gt[:, 0], gt[:, 1], gt[:, 5] = x, y, yaw
    return gt


def _turn_mask(gt_rel: np.ndarray) -> np.ndarray:
    rate = np.abs(gt_rel[:, 5])
    return rate > np.percentile(rate, 75) + 1e-9


def noise_multipliers(spec: WorldSpec, gt_rel: np.ndarray) -> np.ndarray:
    mult = np.ones(len(gt_rel))
    mult[_turn_mask(gt_rel)] *= spec.turn_noise_multiplier
    k = np.arange(len(gt_rel))
    for start, end, m in spec.nuc_intervals:
        mult[(k >= start) & (k < end)] *= m
    return mult


def in_nuc(spec: WorldSpec, n_steps: int) -> np.ndarray:
    k = np.arange(n_steps)
    flag = np.zeros(n_steps, dtype=bool)
    for start, end, _ in spec.nuc_intervals:
        flag |= (k >= start) & (k < end)
    return flag


# -- observations ---------------------------------------------------------------

class _SignatureCache:
    def __init__(self, spec: WorldSpec):
        self.spec = spec
        self.cells = {}
        self.headings = {}

    def cell(self, ix: int, iy: int) -> np.ndarray:
        key = (ix, iy)
        if key not in self.cells:
            self.cells[key] = Xoshiro256(_hash_key(self.spec.place_seed, 1, ix, iy)).normals(self.spec.obs_dim)
        return self.cells[key]

    def heading(self, b: int) -> np.ndarray:
        if b not in self.headings:
            self.headings[b] = Xoshiro256(_hash_key(self.spec.place_seed, 2, b)).normals(self.spec.obs_dim)
        return self.headings[b]


N_HEADING_BINS = 8


def place_signature(spec: WorldSpec, x: float, y: float, yaw: float, cache=None) -> np.ndarray:
    """Noise-free observation: bilinear blend of grid-node signatures plus a heading term."""
    cache = cache or _SignatureCache(spec)
    g = spec.place_grid_resolution
    fx, fy = x / g, y / g
    ix, iy = math.floor(fx), math.floor(fy)
    ax, ay = fx - ix, fy - iy
    v = ((1 - ax) * (1 - ay) * cache.cell(ix, iy) + ax * (1 - ay) * cache.cell(ix + 1, iy)
         + (1 - ax) * ay * cache.cell(ix, iy + 1) + ax * ay * cache.cell(ix + 1, iy + 1))
    fb = (yaw % (2 * math.pi)) / (2 * math.pi) * N_HEADING_BINS
    b = math.floor(fb)
    w = fb - b
    hv = (1 - w) * cache.heading(b % N_HEADING_BINS) + w * cache.heading((b + 1) % N_HEADING_BINS)
    return v + spec.heading_weight * hv


# -- generation -------------------------------------------------------------------

def generate(spec: WorldSpec) -> SyntheticScenario:
    """Build a scenario; a pure function of ``spec``."""
    gt = ground_truth(spec)
    gt_rel = relative_vec(gt[:-1], gt[1:])
    mult = noise_multipliers(spec, gt_rel)
    st, sr = spec.odom_noise

    rng = stream(spec.seed, 1)
    odom = gt_rel.copy()
    sig = np.empty_like(gt_rel)
    for k in range(len(gt_rel)):
        s = np.array([st, st, st, sr, sr, sr]) * mult[k]
        sig[k] = s
        odom[k] += s * rng.normals(6)
    odom[:, 3:] = wrap_angle(odom[:, 3:])
    odom_cov = np.maximum(sig ** 2, spec.min_variance)

    rng = stream(spec.seed, 2)
    cache = _SignatureCache(spec)
    obs = np.empty((spec.n_frames, spec.obs_dim))
    for k in range(spec.n_frames):
        obs[k] = place_signature(spec, gt[k, 0], gt[k, 1], gt[k, 5], cache)
        obs[k] += spec.observation_noise * rng.normals(spec.obs_dim)

    L = spec.frames_per_lap
    true_loops = []
    for i in range(spec.n_frames):
        for j in range(i + L, spec.n_frames, L):
            true_loops.append((i, j, Pose6.from_vector(relative_vec(gt[i], gt[j]))))

    proposals, is_false = _make_proposals(spec, gt, true_loops)
    return SyntheticScenario(spec, gt, odom, odom_cov, mult, obs, true_loops, proposals, is_false)


def _make_proposals(spec: WorldSpec, gt, true_loops):
    n = min(spec.n_loop_proposals, len(true_loops))
    if n == 0:
        return [], np.zeros(0, dtype=bool)
    pick = np.unique(np.linspace(0, len(true_loops) - 1, n).round().astype(int))
    rng = stream(spec.seed, 3)
    lt, lr = spec.loop_noise
    sig = np.array([lt, lt, lt, lr, lr, lr])
    cov = np.maximum(sig ** 2, spec.min_variance)
    n_false = int(round(spec.false_loop_rate * len(pick)))
    false_set = set(rng.permutation(len(pick))[:n_false])
    proposals, is_false = [], []
    for m, idx in enumerate(pick):
        i, j, rel = true_loops[idx]
        v = rel.to_vector() + sig * rng.normals(6)
        if m in false_set:
            d = rng.normals(3)
            v[:3] += spec.false_loop_offset * d / np.linalg.norm(d)
        proposals.append(LoopProposal(i, j, Pose6.from_vector(v), cov))
        is_false.append(m in false_set)
    return proposals, np.array(is_false, dtype=bool)


def revisit_labels(gt, distance_threshold: float = 1.0, heading_threshold: float = math.pi / 4) -> np.ndarray:
    """Symmetric ``(N, N)`` boolean matrix of revisits in an ``(N, 6)`` trajectory; the diagonal is False."""
    if not (distance_threshold > 0 and heading_threshold > 0):
        raise InvalidArgumentError("thresholds must be positive")
    gt = np.asarray(gt, dtype=float)
    p = gt[:, :3]
    d = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
    dh = np.abs(wrap_angle(gt[:, None, 5] - gt[None, :, 5]))
    lab = (d <= distance_threshold) & (dh <= heading_threshold)
    np.fill_diagonal(lab, False)
    return lab


def gt_loop_labels(scenario: SyntheticScenario, distance_threshold: float = 1.0,
                   heading_threshold: float = math.pi / 4) -> np.ndarray:
    """Revisit labels of a scenario's ground truth (see :func:`revisit_labels`)."""
    return revisit_labels(scenario.gt, distance_threshold, heading_threshold)


def odometry_features(scenario: SyntheticScenario) -> np.ndarray:
    """Per-step regressor input: measured motion, NUC flag, |measured yaw rate|."""
    nuc = in_nuc(scenario.spec, len(scenario.odometry)).astype(float)
    return np.column_stack([scenario.odometry, nuc, np.abs(scenario.odometry[:, 5])])


def odometry_training_set(spec: WorldSpec, n_samples: int, seed: int | None = None,
                          nuc_probability: float = 0.1, nuc_multiplier: float | None = None):
    """Random-motion regression set with the world's heteroscedastic noise model.

    True motions are drawn uniformly around the world's step length and turn
    rate, so a regressor has to read the measured motion rather than memorize
    one trajectory.  Returns ``(features, targets, multipliers)`` with
    features laid out as in :func:`odometry_features`.
    """
    rng = stream(spec.seed if seed is None else seed, 4)
    if nuc_multiplier is None:
        nuc_multiplier = spec.nuc_intervals[0][2] if spec.nuc_intervals else 5.0
    step = spec.step_length
    lo = np.array([0.0, -0.1 * step, -0.05 * step, -0.02, -0.02, -0.5])
    hi = np.array([2.0 * step, 0.1 * step, 0.05 * step, 0.02, 0.02, 0.5])
    u = np.array([[rng.uniform() for _ in range(6)] for _ in range(n_samples)]).reshape(-1, 6)
    truth = lo + (hi - lo) * u
    nuc = np.array([rng.uniform() < nuc_probability for _ in range(n_samples)], dtype=bool)
    turn = _turn_mask(truth)
    mult = np.where(turn, spec.turn_noise_multiplier, 1.0) * np.where(nuc, nuc_multiplier, 1.0)
    st, sr = spec.odom_noise
    sig = np.array([st, st, st, sr, sr, sr])
    meas = truth + mult[:, None] * sig * np.array([rng.normals(6) for _ in range(n_samples)]).reshape(-1, 6)
    feats = np.column_stack([meas, nuc.astype(float), np.abs(meas[:, 5])])
    return feats, truth, mult
