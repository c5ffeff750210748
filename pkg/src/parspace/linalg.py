"""One-sided Jacobi SVD and orthonormality helpers."""

from dataclasses import dataclass

import numpy as np

from . import kernels

TOL = 1e-12
MAX_SWEEPS = 60
# Rows of the rotated matrix below this fraction of ||W||_F count as zero.
RANK_FLOOR = 1e-13


class NumericInputError(ValueError):
    """Input matrix contains NaN or infinite entries."""


class ConvergenceError(RuntimeError):
    def __init__(self, sweeps, residual):
        super().__init__(f"Jacobi SVD did not converge after {sweeps} sweeps "
                         f"(off-diagonal residual {residual:.3e})")
        self.sweeps = sweeps
        self.residual = residual


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``W = U @ diag(sigma) @ V.T``.

    For a d x k input with d <= k: U is d x d, sigma has d entries, V is k x d.
    A tall input gives U of d x k and V of k x k.
    """

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray


def _complete_columns(V, keep):
    """Replace the columns of V not in ``keep`` by an orthonormal completion.

    Candidates are standard basis vectors in order, so the completion is
    deterministic. Two Gram-Schmidt passes per candidate.
    """
    k, r = V.shape
    basis = [V[:, i] for i in range(r) if keep[i]]
    fill = []
    for e in np.eye(k):
        if len(basis) + len(fill) == r:
            break
        v = e.copy()
        for _ in range(2):
            for b in basis + fill:
                v -= (b @ v) * b
        nv = np.linalg.norm(v)
        if nv > 1e-6:
            fill.append(v / nv)
    out = V.copy()
    it = iter(fill)
    for i in range(r):
        if not keep[i]:
            out[:, i] = next(it)
    return out


def _svd_wide(W, max_sweeps):
    d, k = W.shape
    B = np.array(W, dtype=np.float64, order="C", copy=True)
    Q = np.eye(d)
    scale = np.linalg.norm(W)
    floor = RANK_FLOOR * scale
    sweeps, off = kernels.jacobi_rows(B, Q, TOL, floor * floor, max_sweeps)
    if off > TOL:
        raise ConvergenceError(sweeps, off)
    norms = np.sqrt(np.einsum("ij,ij->i", B, B))
    live = norms > floor
    sigma = np.where(live, norms, 0.0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    live = live[order]
    U = Q[:, order]
    V = np.zeros((k, d))
    V[:, live] = (B[order][live] / sigma[live, None]).T
    if not live.all():
        V = _complete_columns(V, live)
    # Largest-magnitude entry of each left vector is made positive.
    pivot = U[np.argmax(np.abs(U), axis=0), np.arange(d)]
    flip = np.where(pivot < 0, -1.0, 1.0)
    return SvdResult(U * flip, sigma, V * flip)


def svd(W, max_sweeps=MAX_SWEEPS):
    """Deterministic thin SVD of a real matrix (one-sided Jacobi on rows).

    Raises NumericInputError for non-finite input and ConvergenceError if the
    row residual stays above 1e-12 after ``max_sweeps`` sweeps.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError(f"svd expects a matrix, got shape {W.shape}")
    if not np.isfinite(W).all():
        raise NumericInputError("svd input has non-finite entries")
    d, k = W.shape
    if d <= k:
        return _svd_wide(W, max_sweeps)
    r = _svd_wide(W.T, max_sweeps)
    # W = V' S U'^T; re-apply the sign rule to the new left vectors.
    U, V = r.V, r.U
    pivot = U[np.argmax(np.abs(U), axis=0), np.arange(U.shape[1])]
    flip = np.where(pivot < 0, -1.0, 1.0)
    return SvdResult(U * flip, r.sigma, V * flip)


def reconstruct(r):
    if r.U.shape[1] != r.sigma.shape[0] or r.V.shape[1] != r.sigma.shape[0]:
        raise ValueError(f"inconsistent SvdResult shapes U{r.U.shape} sigma{r.sigma.shape} V{r.V.shape}")
    return (r.U * r.sigma) @ r.V.T


def orthonormality_defect(M):
    """max |M^T M - I|."""
    M = np.asarray(M, dtype=np.float64)
    return float(np.max(np.abs(M.T @ M - np.eye(M.shape[1]))))


def random_orthonormal(n, rng):
    """Haar-ish random orthonormal matrix via our own SVD of a Gaussian."""
    r = svd(rng.standard_normal((n, n)))
    return r.U @ r.V.T
