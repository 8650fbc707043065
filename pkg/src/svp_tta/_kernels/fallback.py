"""Pure-numpy implementation of the Jacobi sweep kernel.

Used when the compiled extension is unavailable (or disabled via
``SVP_TTA_BACKEND=python``).  Round-robin rounds pair mutually disjoint
columns, so each round can be rotated as one vectorized batch while staying
numerically equivalent to processing its pairs one at a time.
"""

import numpy as np

BACKEND_NAME = "python"

# squared-norm floor below which a column counts as numerically dead; such
# columns are rebuilt by basis completion downstream, so rotating them only
# chases rounding noise (and can stall convergence)
DEAD_SQ = 1e-32


def round_robin_rounds(n):
    """Pair schedule for one sweep: list of (p, q) index arrays per round.

    Circle method; every unordered pair of [0, n) appears exactly once per
    sweep and no index appears twice within a round.
    """
    if n < 2:
        return []
    m = n if n % 2 == 0 else n + 1
    rounds = []
    for r in range(m - 1):
        ps, qs = [], []
        for k in range(m // 2):
            a = (r + k) % (m - 1)
            b = m - 1 if k == 0 else (r + m - 1 - k) % (m - 1)
            if a >= n or b >= n:  # bye slot from odd padding
                continue
            ps.append(min(a, b))
            qs.append(max(a, b))
        rounds.append((np.asarray(ps, dtype=np.intp), np.asarray(qs, dtype=np.intp)))
    return rounds


def jacobi_sweeps(at, vt, rel_tol, max_sweeps):
    """Orthogonalize the rows of ``at`` in place, accumulating rotations in ``vt``.

    ``at`` is the transposed working matrix (each row is a column of the
    original), ``vt`` the transposed right-factor accumulator.  A pair (p, q)
    is rotated when |<a_p, a_q>| > rel_tol * |a_p| * |a_q|.

    Returns (converged, sweeps_done, max_off) where max_off is the largest
    absolute off-diagonal Gram term seen during the final sweep.
    """
    n = at.shape[0]
    rounds = round_robin_rounds(n)
    max_off = 0.0
    if not rounds:
        return True, 0, 0.0
    for sweep in range(1, max_sweeps + 1):
        rotated = False
        max_off = 0.0
        for ps, qs in rounds:
            ap = at[ps]
            aq = at[qs]
            app = np.einsum("ij,ij->i", ap, ap)
            aqq = np.einsum("ij,ij->i", aq, aq)
            apq = np.einsum("ij,ij->i", ap, aq)
            live = (app > DEAD_SQ) & (aqq > DEAD_SQ)
            abs_apq = np.abs(apq)
            if live.any():
                max_off = max(max_off, float(abs_apq[live].max()))
            hit = live & (abs_apq > rel_tol * np.sqrt(app * aqq))
            if not hit.any():
                continue
            rotated = True
            idx = np.nonzero(hit)[0]
            zeta = (aqq[idx] - app[idx]) / (2.0 * apq[idx])
            # sign(0) must be +1 here: zeta == 0 needs a full 45-degree rotation
            sgn = np.where(zeta >= 0.0, 1.0, -1.0)
            t = sgn / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            cc = c[:, None]
            ss = s[:, None]
            p_idx = ps[idx]
            q_idx = qs[idx]
            ap_h = at[p_idx]
            aq_h = at[q_idx]
            at[p_idx] = cc * ap_h - ss * aq_h
            at[q_idx] = ss * ap_h + cc * aq_h
            vp_h = vt[p_idx]
            vq_h = vt[q_idx]
            vt[p_idx] = cc * vp_h - ss * vq_h
            vt[q_idx] = ss * vp_h + cc * vq_h
        if not rotated:
            return True, sweep, max_off
    return False, max_sweeps, max_off
