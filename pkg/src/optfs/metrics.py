"""AUC, log loss, feature ratio and per-field mutual information.

All logarithms are natural.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, UndefinedMetricError

LOG_BASE = "e"
EPS = 1e-12


@dataclass
class EvalReport:
    auc: float
    logloss: float
    ratio: float
    n_samples: int

    def to_json(self) -> dict:
        d = asdict(self)
        d["log_base"] = LOG_BASE
        return d

    def save(self, path, **extra) -> None:
        obj = self.to_json()
        obj.update(extra)
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def auc(scores, labels) -> float:
    """Rank-sum AUC; tied scores get midranks, i.e. half credit per tied pair."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise DataError(f"auc: {s.shape[0]} scores vs {y.shape[0]} labels")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def logloss(scores, labels) -> float:
    p = np.clip(np.asarray(scores, dtype=np.float64), EPS, 1.0 - EPS)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def ratio(bits) -> float:
    bits = np.asarray(getattr(bits, "bits", bits))
    return float(bits.sum()) / bits.size


def evaluate(scores, labels, kept_ratio: float = 1.0) -> EvalReport:
    return EvalReport(auc(scores, labels), logloss(scores, labels), kept_ratio, int(len(labels)))


def mutual_information(values, labels) -> float:
    """Plug-in MI between a discrete column and the 0/1 label.

    Computed as H(y) + sum_{x,y} P(x,y) log P(y|x), with 0 log 0 = 0.
    """
    x = np.asarray(values)
    y = np.asarray(labels).astype(np.int64)
    if x.size == 0:
        raise DataError("mutual information of an empty dataset")
    if x.shape != y.shape:
        raise DataError("mutual_information: values and labels differ in length")
    _, xi = np.unique(x, return_inverse=True)
    joint = np.zeros((xi.max() + 1, 2))
    np.add.at(joint, (xi, y), 1.0)
    n = float(x.size)
    p_xy = joint / n
    p_y = joint.sum(axis=0) / n
    p_x = joint.sum(axis=1, keepdims=True) / n
    nz_y = p_y > 0
    h_y = -np.sum(p_y[nz_y] * np.log(p_y[nz_y]))
    nz = p_xy > 0
    cond = np.sum(p_xy[nz] * np.log((p_xy / np.where(p_x > 0, p_x, 1.0))[nz]))
    return float(h_y + cond)


def field_mutual_information(indices: np.ndarray, labels: np.ndarray) -> list[float]:
    indices = np.asarray(indices)
    return [mutual_information(indices[:, i], labels) for i in range(indices.shape[1])]


def field_kept_ratio(bits, field_of: np.ndarray, n_fields: int) -> list[float]:
    bits = np.asarray(getattr(bits, "bits", bits), dtype=np.float64)
    kept = np.bincount(field_of, weights=bits, minlength=n_fields)
    total = np.bincount(field_of, minlength=n_fields)
    return (kept / np.maximum(total, 1)).tolist()


def write_mi_report(path, mi: list[float], kept: list[float] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["field_id", "mi", "kept_ratio"])
        for i, value in enumerate(mi):
            w.writerow([i, repr(value), "" if kept is None else repr(kept[i])])
