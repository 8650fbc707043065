"""Semantic feature augmentation.

Each feature row is replicated t times and perturbed along directions drawn
from its pseudo-class's running covariance, scaled by the warmup-controlled
strength beta.  The companion loss is plain cross-entropy of the classifier
head over the augmented rows, with gradients for features, weights, and bias.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NotPositiveDefiniteError
from .linalg import as_labels, as_matrix, as_vector, cholesky, sample_mvn

log = logging.getLogger(__name__)


@dataclass
class AugmentedBatch:
    """K*t feature rows; row i*t + s derives from original row i."""

    features: np.ndarray
    labels: np.ndarray
    source_index: np.ndarray


def augment_features(features, pseudo_labels, stats, beta, t, min_count, rng):
    """Sample t perturbed copies of every row from its class-conditional Gaussian.

    Rows whose class has fewer than ``min_count`` accumulated samples (or a
    covariance that defeats Cholesky even after jitter escalation) are copied
    unperturbed.
    """
    f = as_matrix(features, "features")
    y = as_labels(pseudo_labels, stats.num_classes, "pseudo_labels")
    if y.shape[0] != f.shape[0]:
        raise ContractViolation(
            f"pseudo_labels length {y.shape[0]} != feature rows {f.shape[0]}"
        )
    if f.shape[1] != stats.feature_dim:
        raise ContractViolation(
            f"feature dim {f.shape[1]} != stats dim {stats.feature_dim}"
        )
    if beta < 0:
        raise ContractViolation("beta must be non-negative")
    if t < 1:
        raise ContractViolation("t must be >= 1")

    k = f.shape[0]
    out = np.repeat(f, t, axis=0)
    labels = np.repeat(y, t)
    source_index = np.repeat(np.arange(k), t)

    if beta > 0:
        factors = {}
        for j in np.unique(y):
            if stats.counts[j] < min_count:
                continue
            try:
                factors[int(j)] = cholesky(beta * stats.covs[j], jitter=0.0)
            except NotPositiveDefiniteError as exc:
                log.warning(
                    "class %d covariance not factorizable (%s); "
                    "falling back to unperturbed copies", j, exc
                )
        for i in range(k):
            lower = factors.get(int(y[i]))
            if lower is None:
                continue
            for s in range(t):
                out[i * t + s] = sample_mvn(f[i], lower, rng)

    return AugmentedBatch(features=out, labels=labels, source_index=source_index)


@dataclass
class SdaLoss:
    value: float
    grad_features: np.ndarray
    grad_weights: np.ndarray
    grad_bias: np.ndarray


def sda_loss(aug, head_weights, head_bias):
    """Mean cross-entropy of head logits over the augmented rows.

    Gradients flow to the augmented features and to the head parameters;
    whether the head is actually updated is the caller's choice.
    """
    w = as_matrix(head_weights, "head_weights")
    b = as_vector(head_bias, "head_bias")
    f = aug.features
    y = aug.labels
    num_classes, dim = w.shape
    if b.shape[0] != num_classes:
        raise ContractViolation("head bias length does not match weight rows")
    if f.shape[1] != dim:
        raise ContractViolation(
            f"feature dim {f.shape[1]} != head weight dim {dim}"
        )
    if y.max(initial=0) >= num_classes or y.min(initial=0) < 0:
        raise ContractViolation("augmented labels out of class range")

    kt = f.shape[0]
    logits = f @ w.T + b
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    value = float((lse - z[np.arange(kt), y]).mean())

    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(kt), y] -= 1.0
    p /= kt
    return SdaLoss(
        value=value,
        grad_features=p @ w,
        grad_weights=p.T @ f,
        grad_bias=p.sum(axis=0),
    )
