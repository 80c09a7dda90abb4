"""Evaluation metrics and report writers.

This is the only place allowed to read hidden domain ids: discovery quality
(matched accuracy, NMI) is computed here, never inside training code.
"""

from __future__ import annotations

from itertools import permutations

import numpy as np


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros((classes, classes), dtype=np.int64)
    for t, p in zip(np.asarray(y_true), np.asarray(y_pred)):
        out[int(t), int(p)] += 1
    return out


def accuracy_from_confusion(confusion: np.ndarray) -> float:
    total = confusion.sum()
    return float(np.trace(confusion) / total) if total else 0.0


def permutation_matched_accuracy(true_ids: np.ndarray, pred_ids: np.ndarray) -> float:
    """Best accuracy over all relabelings of the predicted cluster ids."""
    true_ids = np.asarray(true_ids)
    pred_ids = np.asarray(pred_ids)
    n_ids = int(max(true_ids.max(), pred_ids.max())) + 1
    best = 0.0
    for perm in permutations(range(n_ids)):
        mapped = np.array(perm)[pred_ids]
        best = max(best, float((mapped == true_ids).mean()))
    return best


def normalized_mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    """NMI with arithmetic-mean normalization, natural log."""
    a, b = np.asarray(a), np.asarray(b)
    n = a.size
    ids_a, inv_a = np.unique(a, return_inverse=True)
    ids_b, inv_b = np.unique(b, return_inverse=True)
    joint = np.zeros((ids_a.size, ids_b.size))
    for i, j in zip(inv_a, inv_b):
        joint[i, j] += 1.0
    joint /= n
    pa, pb = joint.sum(axis=1), joint.sum(axis=0)
    nz = joint > 0
    mi = (joint[nz] * np.log(joint[nz] / np.outer(pa, pb)[nz])).sum()
    ha = -(pa[pa > 0] * np.log(pa[pa > 0])).sum()
    hb = -(pb[pb > 0] * np.log(pb[pb > 0])).sum()
    denom = 0.5 * (ha + hb)
    return float(mi / denom) if denom > 0 else 0.0


def format_metric_lines(records: list[dict]) -> str:
    """Line-delimited records: one 'key=value' sequence per line."""
    lines = []
    for record in records:
        parts = []
        for key, value in record.items():
            if isinstance(value, float):
                parts.append(f"{key}={value:.9g}")
            else:
                parts.append(f"{key}={value}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def write_metric_lines(path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_metric_lines(records))


def write_confusion_csv(path, confusion: np.ndarray) -> None:
    """CSV with class ids as header, one row per true class."""
    k = confusion.shape[0]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(str(c) for c in range(k)) + "\n")
        for row in confusion:
            fh.write(",".join(str(int(v)) for v in row) + "\n")


def write_curve_csv(path, values) -> None:
    """Two-column CSV (epoch, value)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,value\n")
        for epoch, value in enumerate(values):
            fh.write(f"{epoch},{value:.9g}\n")


def format_ablation_table(rows: list[dict]) -> str:
    """Text table over the 2^3 component grid, one row per combination."""
    header = f"{'sdnorm':>6} {'protogr':>8} {'protoccl':>9}"
    fold_ids = sorted(k for k in rows[0] if isinstance(k, int))
    for f in fold_ids:
        header += f" {'fold' + str(f):>8}"
    header += f" {'mean':>8}"
    lines = [header]
    for row in rows:
        line = (f"{'on' if row['sdnorm'] else '-':>6} "
                f"{'on' if row['protogr'] else '-':>8} "
                f"{'on' if row['protoccl'] else '-':>9}")
        for f in fold_ids:
            line += f" {row[f]:8.4f}"
        line += f" {row['mean']:8.4f}"
        lines.append(line)
    return "\n".join(lines) + "\n"
