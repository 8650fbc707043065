# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Jacobi sweep kernel.

Same round-robin ordering and rotation formulas as the numpy fallback;
within a round all pairs are disjoint, so the sequential C loop matches the
fallback's vectorized round update.
"""

from libc.math cimport sqrt, fabs

BACKEND_NAME = "ext"

# keep in sync with fallback.DEAD_SQ
DEF DEAD_SQ = 1e-32


def jacobi_sweeps(double[:, ::1] at, double[:, ::1] vt, double rel_tol, int max_sweeps):
    """Orthogonalize the rows of ``at`` in place, accumulating rotations in ``vt``.

    Returns (converged, sweeps_done, max_off); see the fallback docstring.
    """
    cdef Py_ssize_t n = at.shape[0]
    cdef Py_ssize_t cols = at.shape[1]
    cdef Py_ssize_t vcols = vt.shape[1]
    cdef Py_ssize_t m = n if n % 2 == 0 else n + 1
    cdef Py_ssize_t r, k, a, b, p, q, i
    cdef int sweep
    cdef bint rotated
    cdef double app, aqq, apq, zeta, t, c, s, tp, tq, max_off

    if n < 2:
        return True, 0, 0.0

    max_off = 0.0
    for sweep in range(1, max_sweeps + 1):
        rotated = False
        max_off = 0.0
        for r in range(m - 1):
            for k in range(m // 2):
                a = (r + k) % (m - 1)
                if k == 0:
                    b = m - 1
                else:
                    b = (r + m - 1 - k) % (m - 1)
                if a >= n or b >= n:
                    continue
                if a < b:
                    p = a
                    q = b
                else:
                    p = b
                    q = a
                app = 0.0
                aqq = 0.0
                apq = 0.0
                for i in range(cols):
                    app += at[p, i] * at[p, i]
                    aqq += at[q, i] * at[q, i]
                    apq += at[p, i] * at[q, i]
                if app <= DEAD_SQ or aqq <= DEAD_SQ:
                    continue
                if fabs(apq) > max_off:
                    max_off = fabs(apq)
                if fabs(apq) <= rel_tol * sqrt(app * aqq):
                    continue
                rotated = True
                zeta = (aqq - app) / (2.0 * apq)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for i in range(cols):
                    tp = at[p, i]
                    tq = at[q, i]
                    at[p, i] = c * tp - s * tq
                    at[q, i] = s * tp + c * tq
                for i in range(vcols):
                    tp = vt[p, i]
                    tq = vt[q, i]
                    vt[p, i] = c * tp - s * tq
                    vt[q, i] = s * tp + c * tq
        if not rotated:
            return True, sweep, max_off
    return False, max_sweeps, max_off
