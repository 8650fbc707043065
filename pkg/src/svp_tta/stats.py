"""Online per-class feature statistics.

The merge is the exact pooled-moments identity: streaming any partition of a
dataset gives the same result as a single pass.  Covariances use the
population (1/h) normalization, which is what makes the identity exact.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .linalg import as_labels, as_matrix


@dataclass
class ClassStats:
    """Running mean/covariance/count per class, keyed by pseudo-label."""

    means: np.ndarray   # (J, A)
    covs: np.ndarray    # (J, A, A)
    counts: np.ndarray  # (J,) int64

    @staticmethod
    def empty(num_classes, feature_dim):
        return ClassStats(
            means=np.zeros((num_classes, feature_dim)),
            covs=np.zeros((num_classes, feature_dim, feature_dim)),
            counts=np.zeros(num_classes, dtype=np.int64),
        )

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def feature_dim(self):
        return self.means.shape[1]

    def copy(self):
        return ClassStats(self.means.copy(), self.covs.copy(), self.counts.copy())


@dataclass
class BatchMoments:
    """Per-class sample mean, population covariance, and row count of one batch."""

    means: np.ndarray
    covs: np.ndarray
    counts: np.ndarray


def batch_moments(features, labels, num_classes):
    """Per-class moments of one mini-batch; absent classes report zero."""
    f = as_matrix(features, "features")
    y = as_labels(labels, num_classes)
    if y.shape[0] != f.shape[0]:
        raise ContractViolation(
            f"labels length {y.shape[0]} != feature rows {f.shape[0]}"
        )
    dim = f.shape[1]
    means = np.zeros((num_classes, dim))
    covs = np.zeros((num_classes, dim, dim))
    counts = np.zeros(num_classes, dtype=np.int64)
    for j in range(num_classes):
        rows = f[y == j]
        h = rows.shape[0]
        if h == 0:
            continue
        mu = rows.mean(axis=0)
        centered = rows - mu
        means[j] = mu
        covs[j] = centered.T @ centered / h
        counts[j] = h
    return BatchMoments(means, covs, counts)


def merge_stats(stats, moments):
    """Fold one batch's per-class moments into the running statistics.

    Classes absent from the batch are untouched; a virgin class adopts the
    batch moments exactly.
    """
    if moments.means.shape != stats.means.shape:
        raise ContractViolation(
            f"moment shape {moments.means.shape} != stats shape {stats.means.shape}"
        )
    out = stats.copy()
    for j in range(stats.num_classes):
        h = int(moments.counts[j])
        if h == 0:
            continue
        q = int(out.counts[j])
        if q == 0:
            out.means[j] = moments.means[j]
            out.covs[j] = moments.covs[j]
            out.counts[j] = h
            continue
        mu, mu_b = out.means[j], moments.means[j]
        total = q + h
        delta = mu - mu_b
        out.means[j] = (q * mu + h * mu_b) / total
        out.covs[j] = (q * out.covs[j] + h * moments.covs[j]) / total + (
            q * h / total**2
        ) * np.outer(delta, delta)
        out.counts[j] = total
    return out


def beta_schedule(m, total, beta0, warmup=50):
    """Linear warmup of the augmentation strength.

    With a known stream length the ramp spans the whole stream; otherwise it
    saturates after ``warmup`` batches.  Clamped at beta0 should the stream
    outlast its declared length.
    """
    if m < 1:
        raise ContractViolation(f"batch index must be >= 1, got {m}")
    if beta0 < 0:
        raise ContractViolation("beta0 must be non-negative")
    if warmup < 1:
        raise ContractViolation("warmup must be >= 1")
    horizon = warmup if total is None else total
    if horizon < 1:
        raise ContractViolation("total batch count must be >= 1 when given")
    return min(1.0, m / horizon) * beta0


def stats_to_dict(stats):
    """JSON-ready representation used by the report checkpoint section."""
    return {
        "num_classes": int(stats.num_classes),
        "feature_dim": int(stats.feature_dim),
        "counts": [int(c) for c in stats.counts],
        "means": stats.means.tolist(),
        "covs": stats.covs.tolist(),
    }


def stats_from_dict(d):
    try:
        num_classes = int(d["num_classes"])
        dim = int(d["feature_dim"])
        counts = np.asarray(d["counts"], dtype=np.int64)
        means = np.asarray(d["means"], dtype=np.float64)
        covs = np.asarray(d["covs"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ContractViolation(f"malformed class-stats payload: {exc}") from exc
    if counts.shape != (num_classes,) or means.shape != (num_classes, dim) or covs.shape != (
        num_classes,
        dim,
        dim,
    ):
        raise ContractViolation("class-stats payload shapes are inconsistent")
    return ClassStats(means=means, covs=covs, counts=counts)
