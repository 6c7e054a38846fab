"""Batch driver: simulate -> train -> detect -> reject -> optimize -> evaluate.

Every stage reads its inputs from and writes its outputs to one directory,
so stages can be run one at a time from the command line.  Outputs depend
only on the configuration; nothing reads the clock or the environment.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .config import PipelineConfig
from .errors import InvalidArgumentError, SlamError, StageError
from .geometry import Pose6, relative_vec, wrap_angle
from .learning import (
    EmbeddingNet,
    load_checkpoint,
    mine_triplets,
    save_checkpoint,
    train_embedding,
    train_mdn_regressor,
    write_curve,
)
from .loop_detection import candidate_pairs, detect_loops, roc, similarity_matrix, tpr_at_fpr
from .metrics import ate, gain_percent, rpe, uncertainty_correlation
from .outlier_rejection import LoopProposal, OdometryChain, filter_proposals
from .pose_graph import build_graph, compose_dead_reckoning, optimize
from .simulator import (
    generate,
    gt_loop_labels,
    odometry_features,
    odometry_training_set,
    revisit_labels,
    stream,
)

log = logging.getLogger(__name__)

STAGES = ("simulate", "train", "detect", "reject", "optimize", "evaluate")
SWEEP_PARAMETERS = ("rho", "K", "covariance_mode")
COVARIANCE_MODES = {
    "mdn_both": ("mdn", "mdn"),
    "identity_both": ("identity", "identity"),
    "mdn_odom_only": ("mdn", "identity"),
    "mdn_loop_only": ("identity", "mdn"),
}
LOOP_REGRESSOR_STREAM = 5


def stage_index(name: str) -> int:
    if name not in STAGES:
        raise InvalidArgumentError(f"unknown stage {name!r}; expected one of {STAGES}")
    return STAGES.index(name)


def _odometry_path(cfg: PipelineConfig, out: Path) -> Path:
    return out / ("odom_learned.csv" if cfg.frontend.odometry == "learned" else "odom.csv")


# -- stages ---------------------------------------------------------------------

def stage_simulate(cfg: PipelineConfig, out: Path):
    scenario = generate(cfg.world)
    io.write_scenario(out, scenario)
    return {"frames": scenario.n_frames, "proposals": len(scenario.proposals)}


def stage_train(cfg: PipelineConfig, out: Path):
    fe = cfg.frontend
    info = {}
    if fe.odometry == "learned":
        scenario = io.read_scenario(out)
        x, y, _ = odometry_training_set(cfg.world, fe.n_train_samples, seed=cfg.world.seed + fe.train_seed_offset)
        model = train_mdn_regressor(x, y, cfg.train, cfg.mdn)
        save_checkpoint(model, out / "mdn.json")
        write_curve(out / "mdn_loss.csv", model.loss_curve)
        mean, var = model.predict_mode(odometry_features(scenario))
        mean[:, 3:] = wrap_angle(mean[:, 3:])
        io.write_odometry(out / "odom_learned.csv", mean, np.maximum(var, cfg.world.min_variance))
        info["mdn_loss"] = [model.loss_curve[0], model.loss_curve[-1]]
    if fe.loops == "detected" and fe.learned_embedding:
        # a second traversal of the same world, so places repeat but noise does not
        train_world = generate(replace(cfg.world, seed=cfg.world.seed + fe.train_seed_offset))
        labels = gt_loop_labels(train_world)
        i, j = candidate_pairs(train_world.n_frames, cfg.triplet.adjacency_exclusion)
        pos = [(a, b) for a, b in zip(i, j) if labels[a, b]]
        if not pos:
            raise InvalidArgumentError("training world has no revisits to mine triplets from")
        idx = mine_triplets(pos, train_world.n_frames, cfg.triplet, np.random.default_rng(cfg.train.seed))
        model = train_embedding(train_world.observations[idx], cfg.train, cfg.triplet, fe.embedding_dim)
        save_checkpoint(model, out / "embedding.json")
        write_curve(out / "embedding_loss.csv", model.loss_curve)
        info["embedding_loss"] = [model.loss_curve[0], model.loss_curve[-1]]
    return info


def _loop_regressor(cfg: PipelineConfig, gt, pairs, labels):
    """Stand-in for a learned loop-closure network.

    Revisits get the true relative pose plus loop noise; spurious detections
    get a near-identity pose, which is what a network trained only on
    revisits would output for them.
    """
    rng = stream(cfg.world.seed, LOOP_REGRESSOR_STREAM)
    lt, lr = cfg.world.loop_noise
    sig = np.array([lt, lt, lt, lr, lr, lr])
    cov = np.maximum(sig ** 2, cfg.world.min_variance)
    props, false = [], []
    for i, j, score in pairs:
        noise = sig * rng.normals(6)
        base = relative_vec(gt[i], gt[j]) if labels[i, j] else np.zeros(6)
        props.append(LoopProposal(i, j, Pose6.from_vector(base + noise), cov, score))
        false.append(not labels[i, j])
    return props, np.array(false, dtype=bool)


def stage_detect(cfg: PipelineConfig, out: Path):
    fe = cfg.frontend
    obs = io.read_vectors(out / "observations.jsonl")
    if fe.loops == "detected" and fe.learned_embedding:
        model = load_checkpoint(out / "embedding.json")
        if not isinstance(model, EmbeddingNet):
            raise InvalidArgumentError("embedding.json does not hold an embedding network")
        emb = model.embed(obs)
    else:
        emb = obs / np.linalg.norm(obs, axis=1, keepdims=True)
    io.write_vectors(out / "embeddings.jsonl", emb)
    S = similarity_matrix(emb)
    io.write_matrix(out / "similarity.csv", S)
    _, gt = io.read_tum(out / "gt.tum")
    labels = revisit_labels(gt)
    info = {}
    i, j = candidate_pairs(len(gt), cfg.detect.adjacency_exclusion)
    if labels[i, j].any() and not labels[i, j].all():
        curve, auc = roc(S[i, j], labels[i, j])
        info = {"auc": auc, "tpr_at_fpr_0.2": tpr_at_fpr(curve, 0.2)}
    if fe.loops == "proposals":
        props, flags = io.read_proposals(out / "proposals.csv")
        props = [replace(p, score=float(S[p.i, p.j])) for p in props]
        loops = [(p.i, p.j, p.score) for p in props]
    else:
        loops = detect_loops(emb, cfg.detect)[: fe.max_loops]
        props, flags = _loop_regressor(cfg, gt, loops, labels)
    io.write_loops(out / "loops.csv", loops)
    io.write_proposals(out / "candidates.csv", props, flags)
    io.write_json(out / "detection.json", info)
    info["loops"] = len(loops)
    return info


def stage_reject(cfg: PipelineConfig, out: Path):
    props, flags = io.read_proposals(out / "candidates.csv")
    odom, cov = io.read_odometry(_odometry_path(cfg, out))
    if cfg.frontend.filter_loops:
        inliers, _, rates = filter_proposals(props, OdometryChain(odom, cov), cfg.reject)
    else:
        inliers, rates = props, np.ones(len(props))
    io.write_verdicts(out / "inliers.csv", props, inliers, rates)
    return {"inliers": len(inliers), "outliers": len(props) - len(inliers)}


def stage_optimize(cfg: PipelineConfig, out: Path):
    fe = cfg.frontend
    _, gt = io.read_tum(out / "gt.tum")
    odom, cov = io.read_odometry(_odometry_path(cfg, out))
    props, _ = io.read_proposals(out / "candidates.csv")
    verdicts = io.read_verdicts(out / "inliers.csv")
    if [(v[0], v[1]) for v in verdicts] != [(p.i, p.j) for p in props]:
        raise InvalidArgumentError("inliers.csv does not match candidates.csv")
    kept = [p for p, v in zip(props, verdicts) if v[3]]
    ocov = cov if fe.odometry_covariance == "mdn" else np.ones_like(cov)
    loops = [(p.i, p.j, p.rel, p.cov if fe.loop_covariance == "mdn" else np.ones(6)) for p in kept]
    graph = build_graph(odom, ocov, loops, x0=gt[0])
    result = optimize(graph, cfg.backend)
    edges = [(i, i + 1, u, cfg.backend.weight(cfg.backend.varrho, c)) for i, u, c in graph.odometry]
    edges += [(i, j, m, cfg.backend.weight(cfg.backend.rho, c)) for i, j, m, c in graph.loops]
    io.write_g2o(out / "graph.g2o", result.states, edges, fixed=(graph.anchor,))
    io.write_tum(out / "odometry.tum", compose_dead_reckoning(odom, gt[0]))
    io.write_tum(out / "optimized.tum", result.states)
    summary = {
        "status": result.status,
        "iterations": len(result.cost_trace) - 1,
        "initial_cost": result.cost_trace[0],
        "final_cost": result.cost_trace[-1],
        "loops": len(kept),
    }
    io.write_json(out / "optimizer.json", summary)
    return summary


def _correlation(gt, odom, cov):
    err = np.abs(odom[:, :3] - relative_vec(gt[:-1], gt[1:])[:, :3]).ravel()
    sig = np.sqrt(cov[:, :3]).ravel()
    try:
        return uncertainty_correlation(err, sig)
    except InvalidArgumentError:
        return None, None


def stage_evaluate(cfg: PipelineConfig, out: Path):
    _, gt = io.read_tum(out / "gt.tum")
    _, est = io.read_tum(out / "optimized.tum")
    _, dead = io.read_tum(out / "odometry.tum")
    odom, cov = io.read_odometry(_odometry_path(cfg, out))
    if not (len(gt) == len(est) == len(dead)):
        raise InvalidArgumentError("trajectory lengths differ")
    slam_ate = ate(est, gt)
    odo_ate = ate(dead, gt)
    rt, rr = rpe(est, gt, cfg.frontend.rpe_delta)
    pearson, spearman = _correlation(gt, odom, cov)
    m = {
        "ate_m": slam_ate,
        "rpe_trans_m": rt,
        "rpe_rot_deg": rr,
        "pearson": pearson,
        "spearman": spearman,
        "gain_percent": gain_percent(odo_ate, slam_ate) if odo_ate > 0 else None,
        "odometry_ate_m": odo_ate,
    }
    det = out / "detection.json"
    if det.exists():
        for k, v in io.read_json(det).items():
            m["detection_" + k] = v
    opt = io.read_json(out / "optimizer.json")
    m["optimizer_status"] = opt["status"]
    m["n_loops"] = opt["loops"]
    io.write_metrics(out, m)
    return m


STAGE_FUNCS = {
    "simulate": stage_simulate,
    "train": stage_train,
    "detect": stage_detect,
    "reject": stage_reject,
    "optimize": stage_optimize,
    "evaluate": stage_evaluate,
}


def run_stage(name: str, cfg: PipelineConfig, out=None):
    """Run one stage, wrapping any failure in :class:`StageError`."""
    stage_index(name)
    out = Path(cfg.output_dir if out is None else out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        info = STAGE_FUNCS[name](cfg, out)
    except (SlamError, ValueError, OSError, KeyError, np.linalg.LinAlgError) as e:
        if isinstance(e, StageError):
            raise
        raise StageError(name, e) from e
    log.info("stage %s: %s", name, info)
    return info


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(cfg: PipelineConfig, out: Path, stages):
    io.write_json(out / "config.json", cfg.to_dict())
    files = {p.name: _file_digest(p) for p in sorted(out.iterdir())
             if p.is_file() and p.name != "manifest.json"}
    io.write_json(out / "manifest.json", {
        "config_sha256": cfg.sha256(),
        "seed": cfg.seed,
        "stages": list(stages),
        "files": files,
    })


def run_pipeline(cfg: PipelineConfig, stop_after: str | None = None) -> dict:
    """Run all stages (or up to ``stop_after``) into ``cfg.output_dir``; returns the metrics
    dict, or an empty dict when stopped before evaluation."""
    last = stage_index(stop_after) if stop_after is not None else len(STAGES) - 1
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = {}
    for name in STAGES[: last + 1]:
        info = run_stage(name, cfg, out)
        if name == "evaluate":
            metrics = info
    write_manifest(cfg, out, STAGES[: last + 1])
    return metrics


# -- sweeps -----------------------------------------------------------------------

def sweep_config(cfg: PipelineConfig, parameter: str, value) -> PipelineConfig:
    if parameter == "rho":
        return replace(cfg, backend=replace(cfg.backend, rho=float(value)))
    if parameter == "K":
        return replace(cfg, mdn=replace(cfg.mdn, K=int(value)),
                       frontend=replace(cfg.frontend, odometry="learned"))
    if parameter == "covariance_mode":
        if value not in COVARIANCE_MODES:
            raise InvalidArgumentError(f"unknown covariance mode {value!r}; expected {sorted(COVARIANCE_MODES)}")
        oc, lc = COVARIANCE_MODES[value]
        return replace(cfg, frontend=replace(cfg.frontend, odometry_covariance=oc, loop_covariance=lc))
    raise InvalidArgumentError(f"unknown sweep parameter {parameter!r}; expected one of {SWEEP_PARAMETERS}")


SWEEP_COLUMNS = ("parameter", "value") + io.METRIC_KEYS + ("odometry_ate_m", "error")


def run_sweep(cfg: PipelineConfig, parameter: str, values, output_dir=None) -> Path:
    """One pipeline run per value with a shared seed; a failing row records its
    error and the sweep moves on.  Returns the path of the consolidated CSV."""
    if parameter not in SWEEP_PARAMETERS:
        raise InvalidArgumentError(f"unknown sweep parameter {parameter!r}; expected one of {SWEEP_PARAMETERS}")
    base = Path(cfg.output_dir if output_dir is None else output_dir)
    base.mkdir(parents=True, exist_ok=True)
    rows = []
    for k, v in enumerate(values):
        row = {"parameter": parameter, "value": v}
        try:
            sub = sweep_config(cfg, parameter, v)
            sub = replace(sub, output_dir=str(base / f"{parameter}_{k:02d}"))
            row.update(run_pipeline(sub))
        except (StageError, InvalidArgumentError) as e:
            log.warning("sweep %s=%s failed: %s", parameter, v, e)
            row["error"] = str(e)
        rows.append(row)
    path = base / f"sweep_{parameter}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r.get(c), float) and math.isfinite(r[c]) else r[c])
                        for c in SWEEP_COLUMNS])
    return path


def read_sweep(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
