"""Compiled inner loop of the profiled likelihood."""
import numpy as np
from numba import njit


@njit(cache=True)
def profile_accumulate(lam, Rzz, Rzx, S):
    """Return ``sum_i log|I + K_i' K_i|`` and ``M = S + sum_i T_i' T_i``.

    Per individual the triangular factor of ``[Z_i X_i y_i]`` is split into
    ``Rzz`` (q x q) and ``Rzx`` (q x m); ``S`` is the summed ``Rxx' Rxx``.
    With ``K_i = Rzz_i lam`` the augmented matrix ``[[K_i, Rzx_i], [I, 0]]``
    is reduced by Householder reflections on its first q columns; the
    leading triangle gives the log-determinant and the trailing q x m block
    ``T_i`` satisfies ``T_i' T_i = Rzx_i' (I + K_i K_i')^-1 Rzx_i``.  Then
    ``M = sum_i [X_i y_i]' (V_i / s2)^-1 [X_i y_i]``.  Orthogonal reductions
    stay accurate when some ``K_i`` is huge (explosive covariate paths).
    Individuals are visited in order, so the sums are reproducible.
    """
    n, q, _ = Rzz.shape
    m = Rzx.shape[2]
    M = S.copy()
    logdet = 0.0
    w = q + m
    aug = np.empty((2 * q, w))
    v = np.empty(2 * q)
    for i in range(n):
        for r in range(q):
            for c in range(q):
                s = 0.0
                for k in range(max(r, c), q):
                    s += Rzz[i, r, k] * lam[k, c]
                aug[r, c] = s
            for c in range(m):
                aug[r, q + c] = Rzx[i, r, c]
        for r in range(q):
            for c in range(w):
                aug[q + r, c] = 0.0
            aug[q + r, r] = 1.0
        for j in range(q):
            # Householder vector for column j, rows j..2q-1
            scale = 0.0
            for r in range(j, 2 * q):
                a = abs(aug[r, j])
                if a > scale:
                    scale = a
            norm = 0.0
            for r in range(j, 2 * q):
                v[r] = aug[r, j] / scale
                norm += v[r] * v[r]
            norm = np.sqrt(norm)
            alpha = -norm if v[j] >= 0.0 else norm
            v[j] -= alpha
            vnorm2 = 0.0
            for r in range(j, 2 * q):
                vnorm2 += v[r] * v[r]
            logdet += 2.0 * np.log(abs(alpha * scale))
            aug[j, j] = alpha * scale
            for r in range(j + 1, 2 * q):
                aug[r, j] = 0.0
            if vnorm2 == 0.0:
                continue
            for c in range(j + 1, w):
                s = 0.0
                for r in range(j, 2 * q):
                    s += v[r] * aug[r, c]
                f = 2.0 * s / vnorm2
                for r in range(j, 2 * q):
                    aug[r, c] -= f * v[r]
        for a in range(m):
            for c in range(a + 1):
                s = 0.0
                for r in range(q, 2 * q):
                    s += aug[r, q + a] * aug[r, q + c]
                M[a, c] += s
    for a in range(m):
        for c in range(a + 1, m):
            M[a, c] = M[c, a]
    return logdet, M


@njit(cache=True)
def deviance_parts(lam, Rzz, Rzx, S):
    """``(log|V/s2|, log|X'(V/s2)^-1 X|, r2)`` via a Cholesky factor of ``M``.

    The last diagonal entry of the factor of ``M = [[X'WX, X'Wy], [y'WX, y'Wy]]``
    squared is the weighted residual sum of squares.  NaNs signal a factor
    that does not exist (e.g. an exact fit).
    """
    logdet, M = profile_accumulate(lam, Rzz, Rzx, S)
    m = M.shape[0]
    L = np.zeros((m, m))
    logdet_x = 0.0
    for j in range(m):
        d = M[j, j]
        for k in range(j):
            d -= L[j, k] * L[j, k]
        if not d > 0.0:
            if j == m - 1:
                return logdet, logdet_x, 0.0
            return np.nan, np.nan, np.nan
        L[j, j] = np.sqrt(d)
        if j < m - 1:
            logdet_x += np.log(d)
        for r in range(j + 1, m):
            s = M[r, j]
            for k in range(j):
                s -= L[r, k] * L[j, k]
            L[r, j] = s / L[j, j]
    return logdet, logdet_x, L[m - 1, m - 1] ** 2
