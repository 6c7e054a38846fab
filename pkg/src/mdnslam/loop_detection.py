"""Cosine-discrepancy loop detection over frame embeddings, plus ROC analysis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class LoopDetectConfig:
    """``polarity="discrepancy"`` thresholds ``1 - cos``; ``"similarity"`` thresholds ``cos`` itself."""

    zeta: float = 0.045
    adjacency_exclusion: int = 18
    polarity: str = "discrepancy"

    def __post_init__(self):
        if not 0 <= self.zeta < 2:
            raise InvalidArgumentError("zeta must lie in [0, 2)")
        if self.adjacency_exclusion < 0:
            raise InvalidArgumentError("adjacency_exclusion must be >= 0")
        if self.polarity not in ("discrepancy", "similarity"):
            raise InvalidArgumentError(f"unknown polarity {self.polarity!r}")


def _unit(v):
    v = np.asarray(v, dtype=float)
    sq = np.zeros(v.shape[:-1])
    for k in range(v.shape[-1]):
        sq += v[..., k] * v[..., k]
    n = np.sqrt(sq)[..., None]
    if np.any(n == 0):
        raise InvalidArgumentError("zero-norm embedding")
    return v / n


def discrepancy(a, b) -> float:
    """``1 - cos(a, b)``, in [0, 2]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InvalidArgumentError("zero-norm embedding")
    return float(np.clip(1.0 - np.dot(a, b) / (na * nb), 0.0, 2.0))


def similarity_matrix(embeddings) -> np.ndarray:
    """Pairwise discrepancies; symmetric with a zero diagonal.

    Dot products are accumulated one coordinate at a time in index order
    instead of through BLAS, so every entry is bit-identical to a plain
    double loop and does not depend on how the work is blocked.
    """
    e = np.asarray(embeddings, dtype=float)
    if e.ndim != 2 or e.shape[0] < 2:
        raise InvalidArgumentError("need at least two embeddings")
    u = _unit(e)
    dot = np.zeros((len(u), len(u)))
    for k in range(u.shape[1]):
        dot += u[:, k, None] * u[None, :, k]
    s = np.clip(1.0 - dot, 0.0, 2.0)
    np.fill_diagonal(s, 0.0)
    return s


def detect_loops(embeddings, cfg: LoopDetectConfig = LoopDetectConfig()):
    """Pairs ``(i, j, score)`` with ``i < j``, ``j - i > exclusion`` and score below ``zeta``.

    Sorted by ascending score (ties by index).  In similarity polarity the
    score is the cosine similarity and pairs are kept when it is below zeta.
    """
    s = similarity_matrix(embeddings)
    if cfg.polarity == "similarity":
        s = 1.0 - s
    n = s.shape[0]
    i, j = np.triu_indices(n, k=cfg.adjacency_exclusion + 1)
    sc = s[i, j]
    keep = sc < cfg.zeta
    i, j, sc = i[keep], j[keep], sc[keep]
    order = np.lexsort((j, i, sc))
    return [(int(i[k]), int(j[k]), float(sc[k])) for k in order]


def candidate_pairs(n: int, adjacency_exclusion: int):
    """All ``(i, j)`` with ``j - i > adjacency_exclusion``."""
    return np.triu_indices(n, k=adjacency_exclusion + 1)


def roc(scores, labels):
    """ROC for discrepancy scores (lower score = predicted loop).

    Returns ``(fpr, tpr, thresholds), auc`` with one point per distinct score,
    starting from (0, 0).  AUC uses the trapezoid rule, so tied scores count
    one half.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise InvalidArgumentError("scores and labels differ in length")
    P = int(labels.sum())
    N = labels.size - P
    if P == 0 or N == 0:
        raise InvalidArgumentError("need at least one positive and one negative label")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    l = labels[order]
    tp = np.cumsum(l)
    fp = np.cumsum(~l)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tpr = np.r_[0.0, tp[last] / P]
    fpr = np.r_[0.0, fp[last] / N]
    thr = np.r_[-np.inf, s[last]]
    auc = float(np.trapezoid(tpr, fpr))
    return (fpr, tpr, thr), auc


def tpr_at_fpr(curve, fpr_target: float) -> float:
    """Best TPR among operating points whose FPR does not exceed ``fpr_target``."""
    fpr, tpr, _ = curve
    return float(np.max(tpr[fpr <= fpr_target + 1e-15]))
