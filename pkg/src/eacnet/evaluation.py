"""Multi-label metrics, occurrence-rate analysis, and subject-level folds.

F1 uses precision p = tp/(tp+fp) and recall r = tp/(tp+fn) with
F1 = 2pr/(p+r); any 0/0 is defined as 0 so degenerate folds stay finite.
Accuracy is per-AU binary accuracy; averages are macro (plain means over
the AU columns).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aus import AU_IDS


@dataclass(frozen=True)
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray
    au_ids: tuple[int, ...] = AU_IDS


@dataclass(frozen=True)
class MetricsTable:
    f1: np.ndarray
    accuracy: np.ndarray
    mean_f1: float
    mean_accuracy: float
    au_ids: tuple[int, ...] = AU_IDS


def confusion(preds: np.ndarray, labels: np.ndarray,
              au_ids: tuple[int, ...] = AU_IDS) -> ConfusionCounts:
    """Per-AU tp/fp/tn/fn counts for binary [N,K] predictions and labels."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 2:
        raise ValueError(f"preds {preds.shape} and labels {labels.shape} must be equal [N,K]")
    if preds.shape[1] != len(au_ids):
        raise ValueError(f"got {preds.shape[1]} columns for {len(au_ids)} AUs")
    for name, a in (("preds", preds), ("labels", labels)):
        if not np.isin(a, (0, 1)).all():
            raise ValueError(f"{name} must be binary")
    p = preds.astype(bool)
    l = labels.astype(bool)
    return ConfusionCounts(
        tp=(p & l).sum(axis=0), fp=(p & ~l).sum(axis=0),
        tn=(~p & ~l).sum(axis=0), fn=(~p & l).sum(axis=0), au_ids=tuple(au_ids))


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def f1_accuracy(c: ConfusionCounts) -> MetricsTable:
    precision = _safe_div(c.tp, c.tp + c.fp)
    recall = _safe_div(c.tp, c.tp + c.fn)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    total = c.tp + c.fp + c.tn + c.fn
    accuracy = _safe_div(c.tp + c.tn, total)
    return MetricsTable(f1=f1, accuracy=accuracy,
                        mean_f1=float(f1.mean()), mean_accuracy=float(accuracy.mean()),
                        au_ids=c.au_ids)


def occurrence_rates(labels: np.ndarray) -> np.ndarray:
    """Per-AU mean of binary labels [N,K]."""
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[0] < 1:
        raise ValueError(f"labels must be non-empty [N,K], got {labels.shape}")
    return labels.mean(axis=0)


def subject_folds(subject_ids, k: int = 3, seed: int = 0) -> np.ndarray:
    """Assign each sample a fold in [0,k) by subject.

    Every subject lands in exactly one fold; fold subject-counts differ by
    at most one; deterministic given seed.
    """
    if k < 2:
        raise ValueError(f"need k >= 2 folds, got {k}")
    subject_ids = list(subject_ids)
    unique = sorted(set(subject_ids))
    if len(unique) < k:
        raise ValueError(f"need at least {k} distinct subjects, got {len(unique)}")
    order = np.random.default_rng([seed]).permutation(len(unique))
    fold_of = {unique[j]: i % k for i, j in enumerate(order)}
    return np.array([fold_of[s] for s in subject_ids], dtype=np.intp)


# ---------------------------------------------------------------------------
# table emission
# ---------------------------------------------------------------------------

def metrics_to_csv(tables: dict[str, MetricsTable], metric: str = "f1") -> str:
    """CSV with one AU row per line plus the macro average, methods as columns."""
    methods = list(tables)
    au_ids = tables[methods[0]].au_ids
    lines = ["AU," + ",".join(methods)]
    for i, au in enumerate(au_ids):
        vals = [getattr(tables[m], metric)[i] for m in methods]
        lines.append(f"{au}," + ",".join(f"{v:.4f}" for v in vals))
    avg = [getattr(tables[m], "mean_" + ("f1" if metric == "f1" else "accuracy"))
           for m in methods]
    lines.append("Avg," + ",".join(f"{v:.4f}" for v in avg))
    return "\n".join(lines) + "\n"


def metrics_to_text(tables: dict[str, MetricsTable], metric: str = "f1") -> str:
    """Aligned plain-text rendition of metrics_to_csv."""
    rows = [line.split(",") for line in metrics_to_csv(tables, metric).strip().split("\n")]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in rows) + "\n"
