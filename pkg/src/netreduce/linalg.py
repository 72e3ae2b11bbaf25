"""Dense linear-algebra kernels used by the reducers and the PCE fit.

Everything runs in float64. Tensors are plain ``numpy.ndarray`` objects; this
module adds the contract checks and the deterministic sign convention that
the rest of the package relies on.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractError, NumericError, ShapeError

EPS = np.finfo(np.float64).eps
LSTSQ_RIDGE = 1e-10
_MAX_SWEEPS = 80


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray
    S: np.ndarray
    Vt: np.ndarray


@dataclass(frozen=True)
class EigResult:
    values: np.ndarray
    vectors: np.ndarray


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def _check_finite(a: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite values")


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}: inner dimensions differ")
    return a @ b


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Sign per column so the entry of largest magnitude is nonnegative."""
    idx = np.argmax(np.abs(vectors), axis=0)
    picked = vectors[idx, np.arange(vectors.shape[1])]
    return np.where(picked < 0, -1.0, 1.0)


@lru_cache(maxsize=64)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Disjoint column pairings covering every (p, q) once per sweep."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a >= 0 and b >= 0:
                ps.append(min(a, b))
                qs.append(max(a, b))
        if ps:
            rounds.append((np.array(ps), np.array(qs)))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _one_sided_jacobi(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalise the rows of ``w`` in place by plane rotations.

    Rows rather than columns so every gathered pair is contiguous in memory.
    Returns the rotated matrix and the accumulated orthogonal ``V`` with
    ``V @ w_in == w_out``. Rotations inside one round touch disjoint row
    pairs, so each round is applied as a single vectorised update.
    """
    n, m = w.shape
    v = np.eye(n)
    tol = max(m, 1) * EPS
    schedule = _round_robin(n)
    for _ in range(_MAX_SWEEPS):
        rotated = False
        for p, q in schedule:
            wp, wq = w[p], w[q]
            alpha = np.einsum("ij,ij->i", wp, wp)
            beta = np.einsum("ij,ij->i", wq, wq)
            gamma = np.einsum("ij,ij->i", wp, wq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            if not active.all():
                p, q = p[active], q[active]
                wp, wq = wp[active], wq[active]
                alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = c * t[:, None]
            w[p] = c * wp - s * wq
            w[q] = s * wp + c * wq
            vp, vq = v[p], v[q]
            v[p] = c * vp - s * vq
            v[q] = s * vp + c * vq
        if not rotated:
            return w, v
    raise NumericError("one-sided Jacobi SVD did not converge")


def _complete_columns(q: np.ndarray, total: int) -> np.ndarray:
    """Extend orthonormal columns ``q`` (m x k) to ``total`` orthonormal columns."""
    m = q.shape[0]
    cols = [q[:, j] for j in range(q.shape[1])]
    for j in range(m):
        if len(cols) == total:
            break
        e = np.zeros(m)
        e[j] = 1.0
        for _ in range(2):
            for c in cols:
                e -= (c @ e) * c
        norm = np.linalg.norm(e)
        if norm > 0.5:
            cols.append(e / norm)
    return np.column_stack(cols) if cols else np.zeros((m, 0))


def svd(a) -> SvdResult:
    """Thin SVD ``a = U @ diag(S) @ Vt`` by one-sided (Hestenes) Jacobi.

    ``S`` is descending and left singular vectors follow the sign
    convention (largest-magnitude entry nonnegative); ``Vt`` is flipped to
    match. Left vectors belonging to numerically zero singular values are
    completed to an orthonormal set.
    """
    a = as_matrix(a)
    m, n = a.shape
    if m < 1 or n < 1:
        raise ShapeError(f"svd needs a non-empty matrix, got shape {a.shape}")
    _check_finite(a, "svd input")
    transpose = m < n
    # rows of ``work`` are the columns being orthogonalised
    work = a.copy() if transpose else a.T.copy()
    k = work.shape[0]

    q = None
    if work.shape[1] > k:
        # QR preconditioning: rotate the k x k triangular factor instead of
        # the tall matrix; the orthogonal factor is folded back in below.
        q, r = np.linalg.qr(work.T)
        work = r.T.copy()
    w, v = _one_sided_jacobi(work)
    if q is not None:
        w = w @ q.T
    sigma = np.sqrt(np.einsum("ij,ij->i", w, w))
    order = np.argsort(-sigma, kind="stable")
    sigma, w, v = sigma[order], w[order], v[order]

    cutoff = sigma[0] * max(m, n) * EPS if sigma[0] > 0 else 0.0
    good = int(np.count_nonzero(sigma > cutoff)) if sigma[0] > 0 else 0
    left = (w[:good] / sigma[:good, None]).T
    if good < k:
        left = _complete_columns(left, k)
    # v rows are the right factors: w = v @ work
    right = v.T

    if transpose:
        # a.T = left S right.T  =>  a = right S left.T
        u, vt = right, left.T
    else:
        u, vt = left, right.T
    signs = _fix_signs(u)
    return SvdResult(U=u * signs, S=sigma, Vt=vt * signs[:, None])


def sym_eig(a) -> EigResult:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Backed by LAPACK ``syevd`` through numpy; the input is symmetrised after
    the symmetry check and eigenvectors follow the same sign convention as
    :func:`svd`.
    """
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"sym_eig needs a square matrix, got shape {a.shape}")
    _check_finite(a, "sym_eig input")
    scale = np.max(np.abs(a)) if a.size else 0.0
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-8 * scale:
        raise ContractError("sym_eig input is not symmetric within 1e-8 relative")
    values, vectors = np.linalg.eigh(0.5 * (a + a.T))
    order = np.argsort(-values, kind="stable")
    values, vectors = values[order], vectors[:, order]
    return EigResult(values=values, vectors=vectors * _fix_signs(vectors))


def lstsq(a, b) -> np.ndarray:
    """Least-squares solution of ``a @ x ~= b``.

    Full column rank (and condition number below 1e12) gives the exact
    minimiser through the SVD. Otherwise the ridge-regularised solution
    ``(a.T a + rho I)^-1 a.T b`` with ``rho = 1e-10 * sigma_max**2`` is
    returned, which for rank-deficient ``a`` approaches the minimum-norm
    solution. A 1-D ``b`` yields a 1-D result.
    """
    a = as_matrix(a, "lstsq matrix")
    b = np.asarray(b, dtype=np.float64)
    vector_rhs = b.ndim == 1
    if vector_rhs:
        b = b[:, None]
    if b.ndim != 2 or b.shape[0] != a.shape[0]:
        raise ShapeError(f"lstsq right-hand side {b.shape} does not match matrix {a.shape}")
    _check_finite(b, "lstsq right-hand side")
    m, n = a.shape
    res = svd(a)
    s = res.S
    smax = s[0]
    if smax == 0.0:
        x = np.zeros((n, b.shape[1]))
        return x[:, 0] if vector_rhs else x
    full_rank = m >= n and s[-1] > 1e-12 * smax
    if full_rank:
        filt = 1.0 / s
    else:
        filt = s / (s * s + LSTSQ_RIDGE * smax * smax)
    x = res.Vt.T @ (filt[:, None] * (res.U.T @ b))
    return x[:, 0] if vector_rhs else x
