"""Differentiable scalar losses over the prediction matrix.

The singular-value losses operate on the row-stochastic probability matrix;
gradients with respect to logits are obtained by chaining through
``softmax_backward``.  Every loss returns its value together with the
analytic gradient w.r.t. its matrix input.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .linalg import as_labels, as_matrix, svd

LOG_FLOOR = 1e-12  # probability floor inside log terms


@dataclass
class LossValueGrad:
    value: float
    grad: np.ndarray


def softmax_rows(o):
    """Row-wise softmax with max-subtraction stabilization."""
    a = as_matrix(o, "logits")
    z = a - a.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(p, grad_p):
    """Chain a gradient w.r.t. probabilities back to the logits."""
    inner = (grad_p * p).sum(axis=1, keepdims=True)
    return p * (grad_p - inner)


def _sum_part(res):
    n = res.n
    value = -float(res.sigma.sum()) / n
    grad = -(res.u @ res.v.T) / n
    return value, grad


def _var_part(res):
    # d(variance)/d(sigma_i) = (2/N)(sigma_i - eta): the eta-dependence term
    # vanishes because the deviations sum to zero
    n = res.n
    eta = res.sigma.mean()
    dev = res.sigma - eta
    value = float(dev @ dev) / n
    grad = res.u @ ((2.0 / n) * dev[:, None] * res.v.T)
    return value, grad


def svd_sum_loss(p):
    """Negative mean singular value of the prediction matrix."""
    res = svd(as_matrix(p, "predictions"))
    value, grad = _sum_part(res)
    return LossValueGrad(value, grad)


def svd_var_loss(p):
    """Variance of the singular values of the prediction matrix."""
    res = svd(as_matrix(p, "predictions"))
    value, grad = _var_part(res)
    return LossValueGrad(value, grad)


def svp_loss(p, alpha1, alpha2):
    """alpha1 * svd_sum_loss + alpha2 * svd_var_loss from a single SVD."""
    if alpha1 < 0 or alpha2 < 0:
        raise ContractViolation("alpha weights must be non-negative")
    res = svd(as_matrix(p, "predictions"))
    sum_v, sum_g = _sum_part(res)
    var_v, var_g = _var_part(res)
    return LossValueGrad(alpha1 * sum_v + alpha2 * var_v, alpha1 * sum_g + alpha2 * var_g)


def entropy_loss(p):
    """Mean row entropy of a probability matrix (floored inside the log)."""
    a = as_matrix(p, "probabilities")
    k = a.shape[0]
    floored = np.maximum(a, LOG_FLOOR)
    logp = np.log(floored)
    value = -float((a * logp).sum()) / k
    grad = np.where(a > LOG_FLOOR, -(logp + 1.0) / k, -np.log(LOG_FLOOR) / k)
    return LossValueGrad(value, grad)


def cross_entropy_loss(logits, labels):
    """Mean cross-entropy of logits against integer labels; grad w.r.t. logits."""
    o = as_matrix(logits, "logits")
    k, j = o.shape
    y = as_labels(labels, num_classes=j)
    if y.shape[0] != k:
        raise ContractViolation(f"labels length {y.shape[0]} != batch size {k}")
    z = o - o.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    value = float((lse - z[np.arange(k), y]).mean())
    grad = softmax_rows(o)
    grad[np.arange(k), y] -= 1.0
    grad /= k
    return LossValueGrad(value, grad)
