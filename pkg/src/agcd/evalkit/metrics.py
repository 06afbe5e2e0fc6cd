"""Latitude-weighted verification scores and the metrics CSV."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import ShapeError

METRICS_HEADER = ("lead_hours", "variable", "rmse", "acc")
ACC_FLOOR = 1e-12


@dataclass(frozen=True)
class MetricRow:
    lead_hours: int
    variable: str
    rmse: float
    acc: float


def _check(pred, truth, weights) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    if pred.ndim < 2 or weights.shape != (pred.shape[-2],):
        raise ShapeError(f"latitude weights {weights.shape} do not match grid {pred.shape}")
    return pred, truth, weights


def lat_rmse(pred, truth, weights) -> np.ndarray | float:
    """sqrt(mean_ij w_i (pred - truth)^2) over the trailing (H, W) axes."""
    pred, truth, w = _check(pred, truth, weights)
    err = (pred - truth) ** 2 * w[:, None]
    out = np.sqrt(err.mean(axis=(-2, -1)))
    return float(out) if out.ndim == 0 else out


def acc(pred, truth, climatology, weights) -> np.ndarray | float:
    """Weighted anomaly correlation; denominator floored at 1e-12."""
    pred, truth, w = _check(pred, truth, weights)
    clim = np.asarray(climatology, dtype=np.float64)
    a = pred - clim
    b = truth - clim
    ww = w[:, None]
    num = (ww * a * b).sum(axis=(-2, -1))
    den = np.sqrt((ww * a * a).sum(axis=(-2, -1)) * (ww * b * b).sum(axis=(-2, -1)))
    out = num / np.maximum(den, ACC_FLOOR)
    return float(out) if out.ndim == 0 else out


def lat_rmse_reference(pred, truth, weights) -> float:
    """Double-loop reference for one 2-D field."""
    H, W = len(pred), len(pred[0])
    total = 0.0
    for i in range(H):
        for j in range(W):
            total += weights[i] * (pred[i][j] - truth[i][j]) ** 2
    return math.sqrt(total / (H * W))


def acc_reference(pred, truth, climatology, weights) -> float:
    H, W = len(pred), len(pred[0])
    num = sa = sb = 0.0
    for i in range(H):
        for j in range(W):
            a = pred[i][j] - climatology[i][j]
            b = truth[i][j] - climatology[i][j]
            num += weights[i] * a * b
            sa += weights[i] * a * a
            sb += weights[i] * b * b
    return num / max(math.sqrt(sa * sb), ACC_FLOOR)


def score_fields(
    pred: np.ndarray,
    truth: np.ndarray,
    climatology: np.ndarray,
    weights: np.ndarray,
    variables: Sequence[str],
    lead_hours: int,
) -> list[MetricRow]:
    """Per-variable scores for ``(S, V, H, W)`` stacks, averaged over samples."""
    r = lat_rmse(pred, truth, weights)
    a = acc(pred, truth, climatology[None], weights)
    return [MetricRow(lead_hours, v, float(np.mean(r[:, k])), float(np.mean(a[:, k]))) for k, v in enumerate(variables)]


def write_metrics_csv(path: str | Path, rows: Iterable[MetricRow], extra: Sequence[str] = ()) -> None:
    """Rows may carry extra leading columns via ``(labels, row)`` tuples when ``extra`` is set."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(tuple(extra) + METRICS_HEADER)
        for item in rows:
            labels, row = item if extra else ((), item)
            w.writerow(tuple(labels) + (row.lead_hours, row.variable, repr(row.rmse), repr(row.acc)))


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
