"""Classification metrics, ROC curves and per-group score summaries."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from protoxfer.errors import DataError

UNDEFINED = "undefined"


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    roc_auc: Optional[float]
    top1: float
    top5: float
    n_samples: int
    positive_class: Optional[int]
    seed: Optional[int] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["roc_auc"] is None:
            d["roc_auc"] = UNDEFINED
        return d


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def to_probabilities(scores) -> np.ndarray:
    """Rows that are already probability vectors pass through; anything else is softmaxed."""
    s = _as_numpy(scores)
    if s.ndim == 1:
        s = np.stack([1 - s, s], axis=1)
    is_prob = (s >= 0).all() and np.allclose(s.sum(1), 1.0, atol=1e-6)
    if is_prob:
        return s
    s = s - s.max(1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(1, keepdims=True)


def rank_auc(pos_scores, labels) -> Optional[float]:
    """Mann-Whitney AUC with midranks, so tied scores count one half. None if one class is absent."""
    s = _as_numpy(pos_scores).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_curve(pos_scores, labels) -> list[tuple[float, float]]:
    """(fpr, tpr) staircase from (0, 0) to (1, 1); tied scores form one diagonal step."""
    s = _as_numpy(pos_scores).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC curve is undefined when only one class is present")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    cut = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[cut]
    fp = np.cumsum(~y)[cut]
    pts = [(0.0, 0.0)] + [(float(f) / n_neg, float(t) / n_pos) for f, t in zip(fp, tp)]
    return pts


def trapezoid_area(points: Sequence[tuple[float, float]]) -> float:
    fpr = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def compute_metrics(scores, labels, positive_class: int = 1, seed: Optional[int] = None) -> MetricsReport:
    """Accuracy by argmax; precision/recall/F1 at a 0.5 threshold on the positive-class probability.

    For more than two classes precision, recall and F1 are macro averages over
    one-vs-rest decisions taken from the argmax, and ROC-AUC is not reported.
    """
    probs = to_probabilities(scores)
    y = np.asarray(labels.cpu() if isinstance(labels, torch.Tensor) else labels).reshape(-1).astype(int)
    if len(y) != len(probs):
        raise DataError(f"{len(probs)} score rows for {len(y)} labels")
    if len(y) == 0:
        raise DataError("cannot compute metrics on an empty set")
    K = probs.shape[1]
    pred = probs.argmax(1)
    acc = float((pred == y).mean())
    k5 = min(5, K)
    top5 = np.argsort(-probs, axis=1, kind="stable")[:, :k5]
    top5_acc = float((top5 == y[:, None]).any(1).mean())

    if K == 2:
        p = probs[:, positive_class]
        # strict > keeps binary decisions equal to argmax for positive_class = 1
        decided = p > 0.5 if positive_class == 1 else p >= 0.5
        prec, rec, f1 = _prf(decided, y == positive_class)
        auc = rank_auc(p, y == positive_class)
        return MetricsReport(acc, prec, rec, f1, auc, acc, top5_acc, len(y), positive_class, seed)

    per_class = [_prf(pred == k, y == k) for k in range(K)]
    prec, rec, f1 = (float(np.mean([c[i] for c in per_class])) for i in range(3))
    return MetricsReport(acc, prec, rec, f1, None, acc, top5_acc, len(y), None, seed)


def _prf(decided: np.ndarray, actual: np.ndarray) -> tuple[float, float, float]:
    tp = int((decided & actual).sum())
    fp = int((decided & ~actual).sum())
    fn = int((~decided & actual).sum())
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return prec, rec, f1


def prediction_distribution(pos_scores, fine_labels, groups: Optional[Sequence] = None) -> dict:
    """Five-number summary of positive-class probability per group.

    Groups listed in ``groups`` but absent from ``fine_labels`` are reported
    under the ``"omitted"`` key instead of getting a summary.
    """
    s = _as_numpy(pos_scores).reshape(-1)
    g = np.asarray(fine_labels).reshape(-1)
    names = list(groups) if groups is not None else sorted(set(g.tolist()))
    out: dict = {"groups": {}, "omitted": []}
    for name in names:
        vals = s[g == name]
        if len(vals) == 0:
            out["omitted"].append(name)
            continue
        q = np.percentile(vals, [0, 25, 50, 75, 100])
        out["groups"][str(name)] = {
            "n": int(len(vals)), "min": float(q[0]), "q1": float(q[1]), "median": float(q[2]),
            "q3": float(q[3]), "max": float(q[4]),
        }
    return out
