"""Classification evaluation: confusion matrix, OA, AA, Cohen's kappa.

Rows of the confusion matrix are true classes, columns predictions.
Unlabeled pixels (label 0) never enter a matrix; labels are 1-based at the
pipeline level and shifted to 0-based indices here.
"""

from __future__ import annotations

import numpy as np


class MetricsError(ValueError):
    """Degenerate confusion matrix (empty total, empty class row, p_e = 1)."""


def confusion_matrix(true_labels, pred_labels, n_classes: int) -> np.ndarray:
    """K-by-K counts from 1-based labels; pairs with true label 0 are dropped."""
    t = np.asarray(true_labels).reshape(-1)
    p = np.asarray(pred_labels).reshape(-1)
    if t.shape != p.shape:
        raise ValueError(f"label arrays differ in length: {t.shape} vs {p.shape}")
    keep = t != 0
    t = t[keep].astype(np.int64) - 1
    p = p[keep].astype(np.int64) - 1
    if t.size and (t.max() >= n_classes or p.max() >= n_classes or p.min() < 0):
        raise ValueError("label outside [1, n_classes]")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def oa(cm: np.ndarray) -> float:
    """Overall accuracy: trace / total."""
    total = cm.sum()
    if total == 0:
        raise MetricsError("empty confusion matrix")
    return float(np.trace(cm) / total)


def per_class_accuracy(cm: np.ndarray) -> np.ndarray:
    rows = cm.sum(axis=1)
    empty = np.nonzero(rows == 0)[0]
    if empty.size:
        raise MetricsError(f"class {empty[0] + 1} has no samples")
    return np.diag(cm) / rows


def aa(cm: np.ndarray) -> float:
    """Average accuracy: mean per-class recall."""
    return float(per_class_accuracy(cm).mean())


def kappa(cm: np.ndarray) -> float:
    """Cohen's kappa: (p_o - p_e) / (1 - p_e) with marginal-product p_e."""
    total = cm.sum()
    if total == 0:
        raise MetricsError("empty confusion matrix")
    p_o = np.trace(cm) / total
    p_e = float((cm.sum(axis=1) * cm.sum(axis=0)).sum()) / float(total) ** 2
    if p_e >= 1.0:
        raise MetricsError("degenerate matrix: expected agreement is 1")
    return float((p_o - p_e) / (1.0 - p_e))


def format_report(cm: np.ndarray, title: str = "evaluation") -> str:
    """Human-readable table followed by a machine-readable key=value dump."""
    acc = per_class_accuracy(cm)
    lines = [f"# {title}", ""]
    lines.append(f"{'class':>8} {'samples':>10} {'accuracy %':>12}")
    for i, a in enumerate(acc):
        lines.append(f"{i + 1:>8} {int(cm[i].sum()):>10} {100 * a:>12.2f}")
    lines.append("")
    lines.append(f"OA:    {100 * oa(cm):.2f} %")
    lines.append(f"AA:    {100 * aa(cm):.2f} %")
    lines.append(f"Kappa: {100 * kappa(cm):.2f} %")
    lines.append("")
    lines.extend(key_value_dump(cm))
    return "\n".join(lines) + "\n"


def key_value_dump(cm: np.ndarray) -> list:
    out = [f"oa={oa(cm)!r}", f"aa={aa(cm)!r}", f"kappa={kappa(cm)!r}"]
    for i, a in enumerate(per_class_accuracy(cm)):
        out.append(f"per_class_{i + 1}={float(a)!r}")
    return out
