"""Matrix operators: low/up, positive-diagonal QR, SO(d) utilities.

``qr_positive`` (Householder) and ``map_h`` (Cholesky) compute the same
factorization by independent routes and are used as each other's oracle.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import solve_triangular

from .exceptions import RankDeficient

__all__ = [
    "ORTH_TOL",
    "ORTH_TOL_FRESH",
    "RANK_TOL",
    "low",
    "up",
    "qr_positive",
    "map_h",
    "map_h_inv",
    "complete_to_rotation",
    "project_to_so",
    "orthogonality_defect",
    "is_rotation",
    "is_tall_orthonormal",
    "is_upper_tri_pos",
    "skew",
]

ORTH_TOL = 1e-9
ORTH_TOL_FRESH = 1e-12
RANK_TOL = 1e-10


def _check_tall(M):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] < M.shape[1]:
        raise ValueError(f"expected an m1 x m2 matrix with m1 >= m2, got shape {M.shape}")
    return M


def low(M: NDArray) -> NDArray:
    """Strictly lower part of ``M``, same shape."""
    M = _check_tall(M)
    return np.tril(M, -1)


def up(M: NDArray) -> NDArray:
    """Upper triangle (diagonal included) of the top square block of ``M``."""
    M = _check_tall(M)
    m2 = M.shape[1]
    return np.triu(M[:m2, :])


def skew(A: NDArray) -> NDArray:
    return A - A.T


def orthogonality_defect(Q: NDArray) -> float:
    """``||Q^T Q - I||_F``."""
    Q = np.asarray(Q, dtype=float)
    return float(np.linalg.norm(Q.T @ Q - np.eye(Q.shape[1])))


def is_tall_orthonormal(Q, tol=ORTH_TOL) -> bool:
    return orthogonality_defect(Q) <= tol


def is_rotation(Q, tol=ORTH_TOL) -> bool:
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        return False
    return orthogonality_defect(Q) <= tol and abs(np.linalg.det(Q) - 1.0) <= tol


def is_upper_tri_pos(R) -> bool:
    R = np.asarray(R, dtype=float)
    return (
        R.ndim == 2
        and R.shape[0] == R.shape[1]
        and not np.any(np.tril(R, -1))
        and bool(np.all(np.diag(R) > 0))
    )


def _smallest_sv_check(X):
    s = np.linalg.svd(X, compute_uv=False)
    if s.size == 0 or s[-1] <= RANK_TOL * s[0]:
        smin = s[-1] if s.size else 0.0
        raise RankDeficient(f"matrix is rank deficient (sigma_min={smin:.3e})")


def qr_positive(X: NDArray, check_rank: bool = True) -> tuple[NDArray, NDArray]:
    """Thin QR of a full-column-rank ``X`` with a positive diagonal in ``R``.

    Householder QR (LAPACK) followed by a sign pass that flips column ``j`` of
    ``Q`` and row ``j`` of ``R`` whenever ``R[j, j] < 0``.
    """
    X = _check_tall(X)
    if check_rank:
        _smallest_sv_check(X)
    Q, R = np.linalg.qr(X, mode="reduced")
    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    Q = Q * signs
    R = np.triu(R * signs[:, None])
    if np.any(np.diag(R) <= 0):
        raise RankDeficient("zero pivot in QR factorization")
    return Q, R


def map_h(X: NDArray) -> tuple[NDArray, NDArray]:
    """Cholesky route to the positive-diagonal QR factors.

    ``R`` is the upper Cholesky factor of ``X^T X`` and ``Q = X R^{-1}``.
    """
    X = _check_tall(X)
    try:
        Lc = np.linalg.cholesky(X.T @ X)
    except np.linalg.LinAlgError as exc:
        raise RankDeficient("X^T X is not positive definite") from exc
    R = Lc.T
    d = np.diag(R)
    if np.any(d <= RANK_TOL * d.max()):
        raise RankDeficient("Cholesky factor has a vanishing pivot")
    # Q R = X  <=>  R^T Q^T = X^T
    Q = solve_triangular(R, X.T, trans="T", lower=False).T
    return Q, R


def map_h_inv(Q: NDArray, R: NDArray) -> NDArray:
    return np.asarray(Q, dtype=float) @ np.asarray(R, dtype=float)


def complete_to_rotation(
    Q: NDArray, rng: np.random.Generator | None = None, tol: float = ORTH_TOL
) -> NDArray:
    """Extend orthonormal columns ``Q`` (d x k, k < d) to an element of SO(d).

    The first ``k`` columns of the result are ``Q`` verbatim.  Extra columns are
    Gaussian draws orthonormalized by modified Gram-Schmidt (two passes); the
    last column is negated if needed to make the determinant ``+1``.
    """
    Q = _check_tall(Q)
    d, k = Q.shape
    if k >= d:
        raise ValueError(f"need k <= d - 1, got d={d}, k={k}")
    if orthogonality_defect(Q) > tol:
        raise ValueError("input columns are not orthonormal")
    if rng is None:
        rng = np.random.default_rng(0)
    D = np.empty((d, d))
    D[:, :k] = Q
    col = k
    while col < d:
        v = rng.standard_normal(d)
        for _ in range(2):
            for j in range(col):
                v -= (D[:, j] @ v) * D[:, j]
        nv = np.linalg.norm(v)
        if nv < 1e-8:
            continue
        D[:, col] = v / nv
        col += 1
    if np.linalg.det(D) < 0:
        D[:, -1] = -D[:, -1]
    return D


def project_to_so(M: NDArray) -> NDArray:
    """Nearest rotation to ``M`` in Frobenius norm (SVD polar factor)."""
    M = np.asarray(M, dtype=float)
    if np.linalg.det(M) <= 0:
        raise ValueError("cannot project a matrix with non-positive determinant onto SO(d)")
    U, _, Vt = np.linalg.svd(M)
    P = U @ Vt
    if np.linalg.det(P) < 0:
        U[:, -1] = -U[:, -1]
        P = U @ Vt
    return P
