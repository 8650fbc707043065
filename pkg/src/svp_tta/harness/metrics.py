"""Scoring and diagnostics: top-1 error, class-distance heat map data, and
rank-truncated prediction."""

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import ContractViolation
from ..linalg import as_labels, as_matrix, svd

log = logging.getLogger(__name__)


@dataclass
class EvalMetrics:
    error: float
    per_class_error: list  # None for classes absent from the truth
    confusion: np.ndarray  # (J, J), rows = truth


def evaluate(predictions, truth, num_classes):
    preds = as_labels(predictions, num_classes, "predictions")
    y = as_labels(truth, num_classes, "truth")
    if preds.shape[0] != y.shape[0]:
        raise ContractViolation(
            f"predictions length {preds.shape[0]} != truth length {y.shape[0]}"
        )
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (y, preds), 1)
    totals = confusion.sum(axis=1)
    per_class = [
        None if totals[j] == 0 else float(1.0 - confusion[j, j] / totals[j])
        for j in range(num_classes)
    ]
    return EvalMetrics(
        error=float((preds != y).mean()),
        per_class_error=per_class,
        confusion=confusion,
    )


def class_distance_matrix(features, labels, num_classes):
    """(J, J) distances: diagonal = mean intra-class distance to the class
    centroid, off-diagonal = centroid-to-centroid distance.

    Returns (matrix, missing) where missing flags classes with no samples;
    their rows/columns are NaN.
    """
    f = as_matrix(features, "features")
    y = as_labels(labels, num_classes)
    centroids = np.full((num_classes, f.shape[1]), np.nan)
    out = np.full((num_classes, num_classes), np.nan)
    missing = np.zeros(num_classes, dtype=bool)
    for j in range(num_classes):
        rows = f[y == j]
        if rows.shape[0] == 0:
            missing[j] = True
            log.warning("class %d has no samples; distances reported as NaN", j)
            continue
        centroids[j] = rows.mean(axis=0)
        out[j, j] = float(np.linalg.norm(rows - centroids[j], axis=1).mean())
    for i in range(num_classes):
        if missing[i]:
            continue
        for j in range(i + 1, num_classes):
            if missing[j]:
                continue
            d = float(np.linalg.norm(centroids[i] - centroids[j]))
            out[i, j] = d
            out[j, i] = d
    return out, missing


def truncated_prediction(probabilities, drop):
    """Argmax after reconstructing the prediction matrix from its top
    (N - drop) singular triplets; ties break to the lowest index."""
    p = as_matrix(probabilities, "probabilities")
    res = svd(p)
    if not 0 <= drop < res.n:
        raise ContractViolation(
            f"drop must be in [0, {res.n}), got {drop}"
        )
    keep = res.n - drop
    recon = res.u[:, :keep] @ (res.sigma[:keep, None] * res.v[:, :keep].T)
    return recon.argmax(axis=1)
