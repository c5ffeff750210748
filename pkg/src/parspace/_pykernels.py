"""Pure numpy implementations of the hot kernels.

Mirrors ``_ckernels.pyx`` call for call; selected by ``parspace.kernels``
when the compiled module is unavailable or disabled.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def round_robin_pairs(n):
    """Disjoint pair rounds that together cover every (i, j), i < j, once.

    Classic circle schedule; odd ``n`` gets a dummy slot that is dropped.
    """
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = []
        for a in range(m // 2):
            i, j = players[a], players[m - 1 - a]
            if i < n and j < n:
                pairs.append((min(i, j), max(i, j)))
        rounds.append(pairs)
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def jacobi_rows(B, Q, tol, floor_sq, max_sweeps):
    """Orthogonalize the rows of ``B`` in place by plane rotations.

    The same rotations are applied to the columns of ``Q`` so that the
    product ``Q @ B`` is preserved. Rows whose squared norm is at most
    ``floor_sq`` are treated as numerically zero and skipped.

    Returns ``(sweeps, off)`` where ``off`` is the largest normalized
    off-diagonal residual seen in the last sweep.
    """
    d = B.shape[0]
    rounds = [
        (np.array([p[0] for p in r], dtype=np.intp), np.array([p[1] for p in r], dtype=np.intp))
        for r in round_robin_pairs(d)
        if r
    ]
    off = 0.0
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        off = 0.0
        for I, J in rounds:
            bi = B[I]
            bj = B[J]
            alpha = np.einsum("ij,ij->i", bi, bi)
            beta = np.einsum("ij,ij->i", bj, bj)
            gamma = np.einsum("ij,ij->i", bi, bj)
            live = (alpha > floor_sq) & (beta > floor_sq)
            if not live.any():
                continue
            norm = np.sqrt(alpha * beta)
            resid = np.zeros_like(gamma)
            resid[live] = np.abs(gamma[live]) / norm[live]
            off = max(off, float(resid.max()))
            rot = resid > tol
            if not rot.any():
                continue
            I, J = I[rot], J[rot]
            alpha, beta, gamma = alpha[rot], beta[rot], gamma[rot]
            bi, bj = bi[rot], bj[rot]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            B[I] = c[:, None] * bi - s[:, None] * bj
            B[J] = s[:, None] * bi + c[:, None] * bj
            qi = Q[:, I]
            qj = Q[:, J]
            Q[:, I] = c * qi - s * qj
            Q[:, J] = s * qi + c * qj
        if off <= tol:
            break
    return sweeps, off


def im2col(xp, kh, kw, stride):
    """(N, C, Hp, Wp) padded input -> (N, Ho*Wo, C*kh*kw) patch matrix."""
    n, c, hp, wp = xp.shape
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho * wo, c * kh * kw)


def col2im(cols, shape, kh, kw, stride, ho, wo):
    """Scatter-add a patch matrix back onto a zero (N, C, Hp, Wp) array."""
    n, c, hp, wp = shape
    out = np.zeros(shape)
    blocks = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += blocks[:, :, i, j]
    return out
