"""Dense real linear algebra: one-sided Jacobi SVD, Cholesky with jitter
escalation, multivariate normal sampling, and the seedable random stream."""

import hashlib
from dataclasses import dataclass

import numpy as np

from ._kernels import backend_name, jacobi_sweeps
from .errors import ContractViolation, NotPositiveDefiniteError, SvdConvergenceError

__all__ = [
    "RandomStream",
    "SvdResult",
    "as_matrix",
    "as_vector",
    "backend_name",
    "cholesky",
    "sample_mvn",
    "svd",
]

SVD_REL_TOL = 1e-12  # off-diagonal Gram threshold, relative to the pair's norms
SVD_MAX_SWEEPS = 60
_ZERO_SIGMA = 1e-14  # relative floor below which a singular value counts as zero


def as_matrix(m, name="matrix"):
    """Validate and return a 2-D float64 array with finite entries."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got shape {a.shape}")
    if a.size == 0:
        raise ContractViolation(f"{name} must be nonempty")
    if not np.isfinite(a).all():
        raise ContractViolation(f"{name} contains non-finite entries")
    return a


def as_vector(v, name="vector"):
    """Validate and return a 1-D float64 array with finite entries."""
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise ContractViolation(f"{name} must be 1-D, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ContractViolation(f"{name} contains non-finite entries")
    return a


def as_labels(labels, num_classes=None, name="labels"):
    """Validate and return a 1-D int64 label vector, optionally range-checked."""
    a = np.asarray(labels)
    if a.ndim != 1:
        raise ContractViolation(f"{name} must be 1-D, got shape {a.shape}")
    if not np.issubdtype(a.dtype, np.integer):
        if not np.issubdtype(a.dtype, np.floating) or not np.all(a == np.floor(a)):
            raise ContractViolation(f"{name} must be integers")
    a = a.astype(np.int64)
    if num_classes is not None and a.size and (
        a.min() < 0 or a.max() >= num_classes
    ):
        raise ContractViolation(
            f"{name} must lie in [0, {num_classes}), got range "
            f"[{a.min()}, {a.max()}]"
        )
    return a


class RandomStream:
    """Named, seedable, splittable counter-based random stream.

    Streams are identified by (seed, path); the Philox key is derived by
    hashing both, so child streams are independent and reconstructible.
    A stream must not be shared between concurrent callers.
    """

    def __init__(self, seed, name="root"):
        self.seed = int(seed)
        self.name = str(name)
        digest = hashlib.sha256(f"{self.seed}:{self.name}".encode()).digest()
        key = int.from_bytes(digest[:16], "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, name):
        """Derive an independent child stream; deterministic in (seed, path)."""
        return RandomStream(self.seed, f"{self.name}/{name}")

    def standard_normal(self, shape=None):
        return self._gen.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, shape=None):
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high=None, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, name={self.name!r})"


@dataclass
class SvdResult:
    """Thin SVD: u (rows x N) and v (cols x N) orthonormal, sigma descending."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def n(self):
        return self.sigma.shape[0]


def _complete_orthonormal(filled, row_index):
    """Unit vector orthogonal to every already-filled row of ``filled``.

    Deterministic: picks the coordinate axis with the largest residual, then
    re-orthogonalizes twice for accuracy.  Only reached for numerically
    rank-deficient inputs.
    """
    dim = filled.shape[1]
    mask = np.ones(len(filled), dtype=bool)
    mask[row_index] = False
    basis = filled[mask]
    # residual norm^2 of axis k against the span is 1 - sum_j basis[j, k]^2
    leftover = 1.0 - np.einsum("ji,ji->i", basis, basis)
    k = int(np.argmax(leftover))
    r = np.zeros(dim)
    r[k] = 1.0
    for _ in range(2):
        r -= basis.T @ (basis @ r)
    nrm = np.linalg.norm(r)
    if nrm <= 0.0:
        raise SvdConvergenceError(residual=float("nan"), sweeps=0)
    return r / nrm


def svd(m):
    """One-sided Jacobi SVD with cyclic round-robin sweeps.

    Deterministic for identical input bits; singular vector signs follow the
    convention that each u column's largest-magnitude entry is positive.
    """
    return _svd_with_kernel(m, jacobi_sweeps)


def _svd_with_kernel(m, kernel):
    # kernel injection exists so the backend benchmark can time both kernels
    # in one process; everything else goes through svd()
    a = as_matrix(m)
    rows, cols = a.shape
    n = min(rows, cols)
    transposed = rows < cols
    w = a.T if transposed else a  # tall working matrix

    fro = float(np.linalg.norm(w))
    if fro == 0.0:
        u = np.eye(rows, n)
        v = np.eye(cols, n)
        return SvdResult(u=u, sigma=np.zeros(n), v=v)

    # unit Frobenius scaling keeps the sweep threshold meaningful across
    # magnitudes; sigma is rescaled on the way out
    at = np.ascontiguousarray(w.T) / fro
    vt = np.eye(w.shape[1])
    converged, sweeps, max_off = kernel(at, vt, SVD_REL_TOL, SVD_MAX_SWEEPS)
    if not converged:
        raise SvdConvergenceError(residual=max_off * fro * fro, sweeps=sweeps)

    norms = np.linalg.norm(at, axis=1)
    order = np.argsort(-norms, kind="stable")
    norms = norms[order]
    tall_rows = at[order]
    square_rows = vt[order]

    # the absolute term matches the kernels' dead-column floor (norms here are
    # in unit-Frobenius scale)
    floor = max(_ZERO_SIGMA * norms[0], 1e-15)
    dead = norms <= floor
    norms = np.where(dead, 0.0, norms)
    tall = tall_rows / np.where(dead, 1.0, norms)[:, None]
    for i in np.nonzero(dead)[0]:
        tall[i] = _complete_orthonormal(tall, i)

    if transposed:
        u, v = square_rows.T.copy(), tall.T.copy()
    else:
        u, v = tall.T.copy(), square_rows.T.copy()

    # sign convention: largest-magnitude entry of each u column positive
    flip = u[np.abs(u).argmax(axis=0), np.arange(n)] < 0.0
    u[:, flip] *= -1.0
    v[:, flip] *= -1.0
    return SvdResult(u=u, sigma=norms * fro, v=v)


def _cholesky_attempt(a):
    """Row-by-row factorization; returns (L, failing_pivot_or_None).

    Zero pivots are accepted when the remaining column is numerically zero
    (positive semidefinite case); otherwise the pivot index is reported.
    """
    dim = a.shape[0]
    lower = np.zeros_like(a)
    diag_scale = max(float(np.mean(np.abs(np.diag(a)))), np.finfo(np.float64).tiny)
    pivot_tol = 1e-12 * diag_scale
    resid_tol = 1e-10 * diag_scale
    for j in range(dim):
        d = a[j, j] - lower[j, :j] @ lower[j, :j]
        col = a[j + 1:, j] - lower[j + 1:, :j] @ lower[j, :j]
        if d > pivot_tol:
            lower[j, j] = np.sqrt(d)
            lower[j + 1:, j] = col / lower[j, j]
        elif d >= -pivot_tol and (col.size == 0 or np.abs(col).max() <= resid_tol):
            lower[j, j] = 0.0
        else:
            return None, j
    return lower, None


def cholesky(c, jitter=0.0):
    """Lower-triangular L with L @ L.T ~= c + jitter * I.

    On failure the jitter escalates tenfold up to 1e-2 * mean(diag) before
    raising; running covariances built from few samples are rank-deficient
    by construction and need this.
    """
    a = as_matrix(c, "covariance")
    if a.shape[0] != a.shape[1]:
        raise ContractViolation(f"covariance must be square, got {a.shape}")
    scale = max(1.0, float(np.abs(a).max()))
    if float(np.abs(a - a.T).max()) > 1e-8 * scale:
        raise ContractViolation("covariance must be symmetric within 1e-8")
    jit = float(jitter)
    if jit < 0.0:
        raise ContractViolation("jitter must be non-negative")

    sym = (a + a.T) / 2.0
    mean_diag = float(np.mean(np.diag(sym)))
    cap = 1e-2 * mean_diag
    eye = np.eye(sym.shape[0])
    while True:
        lower, pivot = _cholesky_attempt(sym + jit * eye if jit else sym)
        if lower is not None:
            return lower
        nxt = 1e-12 * mean_diag if jit == 0.0 else jit * 10.0
        if nxt <= jit or nxt > cap:
            raise NotPositiveDefiniteError(pivot=pivot, jitter=jit)
        jit = nxt


def sample_mvn(mean, cov_chol, rng):
    """Draw mean + L @ z with z i.i.d. standard normal from ``rng``."""
    mu = as_vector(mean, "mean")
    lower = as_matrix(cov_chol, "cov_chol")
    if lower.shape != (mu.size, mu.size):
        raise ContractViolation(
            f"cov_chol shape {lower.shape} does not match mean length {mu.size}"
        )
    z = rng.standard_normal(mu.size)
    return mu + lower @ z
