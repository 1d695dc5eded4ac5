"""Compiled inner loops for the local lasso.

Problems are given in correlation form: ``corr = D^T p`` and ``gram = D^T D``,
minimizing ``1/2 a^T G a - corr^T a + lam ||a||_1``.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _obj(x, idx, k, corr, gram, lam):
    v = 0.0
    for u in range(k):
        i = idx[u]
        gi = 0.0
        for w in range(k):
            gi += gram[i, idx[w]] * x[w]
        v += 0.5 * x[u] * gi - corr[i] * x[u] + lam * abs(x[u])
    return v


@njit(cache=True, nogil=True)
def _sign(v):
    if v > 0:
        return 1.0
    if v < 0:
        return -1.0
    return 0.0


@njit(cache=True, nogil=True)
def _swap(x, idx, k, j, th, gram):
    """Handle an entering column ``j`` that lies in the span of the active set.

    The smooth term is constant along the null direction ``v`` of
    ``[D_A, d_j]`` and the l1 term decreases, so step along ``v`` until the
    first active coefficient reaches zero and drop it. Returns False when the
    column is not (numerically) dependent.
    """
    gaa = np.empty((k, k))
    gaj = np.empty(k)
    for u in range(k):
        gaj[u] = gram[idx[u], j]
        for w in range(k):
            gaa[u, w] = gram[idx[u], idx[w]]
    try:
        chol = np.linalg.cholesky(gaa)
    except Exception:
        return False
    w_ = np.linalg.solve(chol.T, np.linalg.solve(chol, gaj))
    schur = gram[j, j]
    for u in range(k):
        schur -= gaj[u] * w_[u]
    if schur > 1e-10 * gram[j, j]:
        return False
    step = np.inf
    drop = -1
    for u in range(k):
        v = -th * w_[u]
        xu = x[idx[u]]
        if xu * v < 0.0:
            t = -xu / v
            if t < step:
                step = t
                drop = u
    if drop < 0:
        return False
    for u in range(k):
        x[idx[u]] += step * (-th * w_[u])
    x[idx[drop]] = 0.0
    x[j] = step * th
    return True


@njit(cache=True, nogil=True)
def feature_sign(corr, gram, lam, tol, x, max_iter):
    """Feature-sign search, warm-started from ``x`` (updated in place).

    Returns 0 on a KKT-certified solution, 1 when the iteration cap is hit,
    2 when the line search stalls (singular or ill-conditioned active set).
    """
    m = corr.shape[0]
    g = np.empty(m)
    idx = np.empty(m, dtype=np.int64)
    theta = np.empty(m)
    cur = np.empty(m)
    for it in range(max_iter):
        for j in range(m):
            s = -corr[j]
            for k in range(m):
                if x[k] != 0.0:
                    s += gram[j, k] * x[k]
            g[j] = s
        worst = 0.0
        for j in range(m):
            if x[j] != 0.0:
                v = abs(g[j] + lam * _sign(x[j]))
                if v > worst:
                    worst = v
        k = 0
        for j in range(m):
            if x[j] != 0.0:
                idx[k] = j
                theta[k] = _sign(x[j])
                k += 1
        if worst <= tol:
            best = -1
            bv = lam + tol
            for j in range(m):
                if x[j] == 0.0 and gram[j, j] > 0.0 and abs(g[j]) > bv:
                    best = j
                    bv = abs(g[j])
            if best < 0:
                return 0
            th = -_sign(g[best])
            if k > 0 and _swap(x, idx, k, best, th, gram):
                continue
            idx[k] = best
            theta[k] = -_sign(g[best])
            k += 1
        if k == 0:
            return 2
        gaa = np.empty((k, k))
        rhs = np.empty(k)
        for u in range(k):
            cur[u] = x[idx[u]]
            rhs[u] = corr[idx[u]] - lam * theta[u]
            for w in range(k):
                gaa[u, w] = gram[idx[u], idx[w]]
        ok = True
        try:
            chol = np.linalg.cholesky(gaa)
            y = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
            for u in range(k):
                if not np.isfinite(y[u]):
                    ok = False
        except Exception:
            ok = False
        if not ok:
            y = np.linalg.lstsq(gaa, rhs)[0]
        # discrete line search over the segment cur -> y
        f0 = _obj(cur[:k], idx, k, corr, gram, lam)
        best_t = 1.0
        best_f = _obj(y, idx, k, corr, gram, lam)
        zero_at = -1
        for u in range(k):
            if cur[u] != 0.0 and _sign(y[u]) != _sign(cur[u]):
                t = cur[u] / (cur[u] - y[u])
                if 0.0 < t < 1.0:
                    z = cur[:k] + t * (y - cur[:k])
                    z[u] = 0.0
                    fz = _obj(z, idx, k, corr, gram, lam)
                    if fz < best_f:
                        best_f = fz
                        best_t = t
                        zero_at = u
        if not best_f < f0:
            return 2
        for u in range(k):
            x[idx[u]] = cur[u] + best_t * (y[u] - cur[u])
        if zero_at >= 0:
            x[idx[zero_at]] = 0.0
    return 1


@njit(cache=True, nogil=True)
def coordinate_descent(corr, gram, lam, x, sweeps):
    m = corr.shape[0]
    q = corr - gram @ x
    for _ in range(sweeps):
        for j in range(m):
            d = gram[j, j]
            if d <= 0.0:
                continue
            z = x[j] + q[j] / d
            t = lam / d
            if z > t:
                new = z - t
            elif z < -t:
                new = z + t
            else:
                new = 0.0
            delta = new - x[j]
            if delta != 0.0:
                x[j] = new
                for k in range(m):
                    q[k] -= delta * gram[k, j]


@njit(cache=True, nogil=True)
def solve_many(corr, grams, gidx, lam, tol, x, max_iter, status):
    """Run feature-sign on each row of ``corr``; ``grams[gidx[b]]`` is its Gram matrix."""
    for b in range(corr.shape[0]):
        status[b] = feature_sign(corr[b], grams[gidx[b]], lam, tol, x[b], max_iter)
