"""Text file formats: TUM trajectories, g2o graphs, CSV/JSONL stage outputs.

Floats are written with ``repr`` so that every file round-trips exactly and
two identical runs produce byte-identical output.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidArgumentError
from .geometry import Pose6, euler_to_matrix, matrix_to_euler, wrap_angle
from .outlier_rejection import LoopProposal

AXES = ("tx", "ty", "tz", "roll", "pitch", "yaw")
VAR_AXES = tuple("var_" + a for a in AXES)

# orientation information in g2o is expressed on the quaternion vector part;
# for small angles dq ~ dtheta / 2, so the information grows by a factor of 4
QUAT_INFO_FACTOR = 4.0


def _f(v) -> str:
    v = float(v)
    if not math.isfinite(v):
        raise InvalidArgumentError(f"refusing to write non-finite value {v}")
    return repr(v)


def euler_to_quat(r) -> np.ndarray:
    """``(..., 3)`` Euler angles to ``(..., 4)`` quaternions ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
    r = np.asarray(r, dtype=float)
    q = Rotation.from_matrix(euler_to_matrix(r).reshape(-1, 3, 3)).as_quat()
    q = np.where(q[:, 3:] < 0, -q, q)
    return q.reshape(r.shape[:-1] + (4,))


def quat_to_euler(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    R = Rotation.from_quat(q.reshape(-1, 4)).as_matrix()
    return matrix_to_euler(R, check_gimbal=False).reshape(q.shape[:-1] + (3,))


# -- TUM ------------------------------------------------------------------------

def write_tum(path, poses, timestamps=None):
    """One ``timestamp tx ty tz qx qy qz qw`` line per pose; frame index as default timestamp."""
    x = np.asarray(poses, dtype=float).reshape(-1, 6)
    ts = np.arange(len(x), dtype=float) if timestamps is None else np.asarray(timestamps, dtype=float)
    q = euler_to_quat(x[:, 3:])
    with open(path, "w") as fh:
        for k in range(len(x)):
            vals = [f"{ts[k]:.6f}"] + [_f(v) for v in x[k, :3]] + [_f(v) for v in q[k]]
            fh.write(" ".join(vals) + "\n")


def read_tum(path):
    """``(timestamps, poses)`` with poses as ``(N, 6)`` [t, euler]; ``#`` comments skipped."""
    rows = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise InvalidArgumentError(f"{path}:{n}: expected 8 fields, got {len(parts)}")
            rows.append([float(p) for p in parts])
    a = np.array(rows, dtype=float).reshape(-1, 8)
    poses = np.column_stack([a[:, 1:4], quat_to_euler(a[:, 4:8])])
    return a[:, 0], poses


# -- g2o ------------------------------------------------------------------------

def write_g2o(path, nodes, edges, fixed=(0,)):
    """``edges`` holds ``(i, j, measurement, info_diag)`` in the [t, euler] tangent."""
    nodes = np.asarray(nodes, dtype=float).reshape(-1, 6)
    with open(path, "w") as fh:
        q = euler_to_quat(nodes[:, 3:])
        for k in range(len(nodes)):
            fh.write(" ".join(["VERTEX_SE3:QUAT", str(k)] + [_f(v) for v in nodes[k, :3]] + [_f(v) for v in q[k]]) + "\n")
        for k in fixed:
            fh.write(f"FIX {int(k)}\n")
        for i, j, m, info in edges:
            m = m.to_vector() if isinstance(m, Pose6) else np.asarray(m, dtype=float)
            d = np.asarray(info, dtype=float).reshape(6).copy()
            d[3:] *= QUAT_INFO_FACTOR
            full = np.diag(d)
            upper = full[np.triu_indices(6)]
            mq = euler_to_quat(m[3:])
            fh.write(" ".join(["EDGE_SE3:QUAT", str(int(i)), str(int(j))] + [_f(v) for v in m[:3]]
                              + [_f(v) for v in mq] + [_f(v) for v in upper]) + "\n")


def read_g2o(path):
    """``(nodes, edges, fixed)``; edge information comes back as full 6x6 [t, euler] matrices."""
    verts, edges, fixed = {}, [], []
    scale = np.r_[np.ones(3), np.full(3, 1.0 / QUAT_INFO_FACTOR)]
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            p = line.split()
            if not p or p[0].startswith("#"):
                continue
            tag = p[0]
            try:
                if tag == "VERTEX_SE3:QUAT":
                    v = np.array(p[2:9], dtype=float)
                    verts[int(p[1])] = np.r_[v[:3], quat_to_euler(v[3:])]
                elif tag == "EDGE_SE3:QUAT":
                    v = np.array(p[3:10], dtype=float)
                    upper = np.array(p[10:31], dtype=float)
                    if upper.size != 21:
                        raise InvalidArgumentError("expected 21 information entries")
                    info = np.zeros((6, 6))
                    info[np.triu_indices(6)] = upper
                    info = info + np.triu(info, 1).T
                    info = info * np.sqrt(np.outer(scale, scale))
                    edges.append((int(p[1]), int(p[2]), np.r_[v[:3], quat_to_euler(v[3:])], info))
                elif tag == "FIX":
                    fixed.extend(int(k) for k in p[1:])
                else:
                    raise InvalidArgumentError(f"unknown record {tag}")
            except (ValueError, IndexError) as e:
                raise InvalidArgumentError(f"{path}:{n}: {e}") from e
    ids = sorted(verts)
    if ids != list(range(len(ids))):
        raise InvalidArgumentError("vertex ids must be 0..N-1")
    nodes = np.array([verts[k] for k in ids]).reshape(-1, 6)
    return nodes, edges, fixed


# -- CSV helpers ------------------------------------------------------------------

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_f(v) if isinstance(v, (float, np.floating)) else v for v in r])


def _read_csv(path, required):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
        if rows and not set(required) <= set(rows[0]):
            raise InvalidArgumentError(f"{path}: missing columns {sorted(set(required) - set(rows[0]))}")
    return rows


def write_odometry(path, odometry, cov):
    u = np.asarray(odometry, dtype=float).reshape(-1, 6)
    c = np.asarray(cov, dtype=float).reshape(-1, 6)
    _write_csv(path, ("i",) + AXES + VAR_AXES, ([k] + list(u[k]) + list(c[k]) for k in range(len(u))))


def read_odometry(path):
    rows = _read_csv(path, ("i",) + AXES + VAR_AXES)
    rows.sort(key=lambda r: int(r["i"]))
    if [int(r["i"]) for r in rows] != list(range(len(rows))):
        raise InvalidArgumentError(f"{path}: odometry indices must be 0..M-1")
    u = np.array([[float(r[a]) for a in AXES] for r in rows]).reshape(-1, 6)
    c = np.array([[float(r[a]) for a in VAR_AXES] for r in rows]).reshape(-1, 6)
    return u, c


def write_proposals(path, proposals, is_false=None):
    flags = np.zeros(len(proposals), dtype=bool) if is_false is None else np.asarray(is_false, dtype=bool)
    rows = []
    for p, f in zip(proposals, flags):
        rows.append([p.i, p.j] + list(p.rel.to_vector()) + list(p.cov) + [float(p.score), int(f)])
    _write_csv(path, ("i", "j") + AXES + VAR_AXES + ("score", "injected_false"), rows)


def read_proposals(path):
    """``(proposals, injected_false)``."""
    rows = _read_csv(path, ("i", "j") + AXES + VAR_AXES)
    props, flags = [], []
    for r in rows:
        rel = np.array([float(r[a]) for a in AXES])
        cov = np.array([float(r[a]) for a in VAR_AXES])
        props.append(LoopProposal(int(r["i"]), int(r["j"]), Pose6.from_vector(rel), cov, float(r.get("score", 0.0))))
        flags.append(bool(int(r.get("injected_false", 0))))
    return props, np.array(flags, dtype=bool)


def write_loops(path, loops):
    _write_csv(path, ("i", "j", "score"), ([i, j, float(s)] for i, j, s in loops))


def read_loops(path):
    return [(int(r["i"]), int(r["j"]), float(r["score"])) for r in _read_csv(path, ("i", "j", "score"))]


def write_matrix(path, m):
    m = np.asarray(m, dtype=float)
    with open(path, "w") as fh:
        for row in m:
            fh.write(",".join(_f(v) for v in row) + "\n")


def read_matrix(path):
    return np.loadtxt(path, delimiter=",", ndmin=2)


def write_verdicts(path, proposals, inliers, pass_rates):
    keep = {id(p) for p in inliers}
    rows = [[p.i, p.j, float(r), "inlier" if id(p) in keep else "outlier"] for p, r in zip(proposals, pass_rates)]
    _write_csv(path, ("i", "j", "pass_rate", "verdict"), rows)


def read_verdicts(path):
    """List of ``(i, j, pass_rate, is_inlier)``."""
    out = []
    for r in _read_csv(path, ("i", "j", "pass_rate", "verdict")):
        if r["verdict"] not in ("inlier", "outlier"):
            raise InvalidArgumentError(f"{path}: bad verdict {r['verdict']!r}")
        out.append((int(r["i"]), int(r["j"]), float(r["pass_rate"]), r["verdict"] == "inlier"))
    return out


# -- JSON -------------------------------------------------------------------------

def dumps(obj) -> str:
    """Canonical JSON: sorted keys, fixed separators, non-finite floats as null."""
    def clean(o):
        if isinstance(o, dict):
            return {str(k): clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        if isinstance(o, np.ndarray):
            return clean(o.tolist())
        if isinstance(o, (np.integer,)):
            return int(o)
        if isinstance(o, (float, np.floating)):
            return float(o) if math.isfinite(o) else None
        return o
    return json.dumps(clean(obj), sort_keys=True, indent=2) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps(obj))


def read_json(path):
    return json.loads(Path(path).read_text())


def write_vectors(path, vectors):
    """JSON lines ``{"frame_id": k, "vector": [...]}``."""
    v = np.asarray(vectors, dtype=float)
    with open(path, "w") as fh:
        for k, row in enumerate(v):
            fh.write(json.dumps({"frame_id": k, "vector": [float(x) for x in row]}) + "\n")


def read_vectors(path) -> np.ndarray:
    rows = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            d = json.loads(line)
            try:
                rows[int(d["frame_id"])] = d["vector"]
            except (KeyError, TypeError) as e:
                raise InvalidArgumentError(f"{path}:{n}: malformed record") from e
    ids = sorted(rows)
    if ids != list(range(len(ids))):
        raise InvalidArgumentError(f"{path}: frame ids must be 0..N-1")
    return np.array([rows[k] for k in ids], dtype=float)


METRIC_KEYS = ("ate_m", "rpe_trans_m", "rpe_rot_deg", "pearson", "spearman", "gain_percent")


def write_metrics(directory, metrics: dict):
    d = Path(directory)
    write_json(d / "metrics.json", metrics)
    keys = list(METRIC_KEYS) + sorted(k for k in metrics if k not in METRIC_KEYS)
    vals = []
    for k in keys:
        v = metrics.get(k)
        vals.append("" if v is None else (_f(v) if isinstance(v, float) else v))
    _write_csv(d / "metrics.csv", keys, [vals])


# -- scenarios --------------------------------------------------------------------

def write_scenario(directory, scenario):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tum(d / "gt.tum", scenario.gt)
    write_odometry(d / "odom.csv", scenario.odometry, scenario.odometry_cov)
    write_vectors(d / "observations.jsonl", scenario.observations)
    write_proposals(d / "proposals.csv", scenario.proposals, scenario.proposal_is_false)
    write_json(d / "spec.json", scenario.spec.to_dict())


def read_scenario(directory):
    """Rebuild a scenario from its directory; true loops and noise multipliers are
    recomputed from the world description and ground truth."""
    from .geometry import relative_vec
    from .simulator import SyntheticScenario, WorldSpec, noise_multipliers

    d = Path(directory)
    spec = WorldSpec.from_dict(read_json(d / "spec.json"))
    _, gt = read_tum(d / "gt.tum")
    odom, cov = read_odometry(d / "odom.csv")
    obs = read_vectors(d / "observations.jsonl")
    props, flags = read_proposals(d / "proposals.csv")
    if not (len(gt) == len(odom) + 1 == len(obs)):
        raise InvalidArgumentError(f"{d}: gt, odometry and observations disagree in length")
    L = spec.frames_per_lap
    loops = [(i, j, Pose6.from_vector(relative_vec(gt[i], gt[j])))
             for i in range(len(gt)) for j in range(i + L, len(gt), L)]
    gt_rel = relative_vec(gt[:-1], gt[1:])
    gt_rel[:, 3:] = wrap_angle(gt_rel[:, 3:])
    return SyntheticScenario(spec, gt, odom, cov, noise_multipliers(spec, gt_rel), obs, loops, props, flags)
