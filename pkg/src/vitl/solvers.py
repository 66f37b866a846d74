"""Closed-form solvers for the training system K C A + n*lam*C = Y.

All solvers are exact up to floating point: the ridge path factorizes the
shifted Gram matrix symmetrically, the general path jointly diagonalizes the
symmetric PSD matrices K and A so the system becomes elementwise with
denominators w_a * s_b + n*lam >= n*lam > 0 (singular A is fine), and the
Kronecker path exploits K = kron(kx, ktheta) without materializing it.
Each solve runs one refinement pass and checks its residual contract.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh

from .exceptions import NumericalError
from .kernels import PSD_RTOL, SYMMETRY_TOL, KroneckerGram

RESIDUAL_RTOL = 1e-8


def _as_dense_gram(K):
    if isinstance(K, KroneckerGram):
        return K.dense()
    return np.asarray(K, dtype=float)


def _check_residual(residual, Y):
    r = float(np.linalg.norm(residual))
    bound = RESIDUAL_RTOL * float(np.linalg.norm(Y))
    if r > bound:
        raise NumericalError(f"solver residual {r:.3e} exceeds contract {bound:.3e}")


def _psd_eigh(M, label, error_cls):
    w, U = eigh(M)
    norm2 = float(np.max(np.abs(w))) if w.size else 0.0
    if norm2 > 0 and w[0] < -PSD_RTOL * norm2:
        raise error_cls(f"{label} has eigenvalue {w[0]:.3e}, beyond PSD tolerance")
    return np.clip(w, 0.0, None), U


def solve_ridge_identity(K, Y, lam, n_pairs=None):
    """Solve (K + n*lam*I) C = Y by Cholesky factorization.

    ``n_pairs`` multiplies the regularizer and defaults to the row count of
    K, i.e. the number of observed training pairs.
    """
    K = _as_dense_gram(K)
    Y = np.asarray(Y, dtype=float)
    if lam <= 0:
        raise ValueError("lam must be positive")
    n = K.shape[0]
    shift = (n if n_pairs is None else n_pairs) * lam
    shifted = K + shift * np.eye(n)
    try:
        factor = cho_factor(shifted, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Cholesky factorization failed: {exc}") from exc
    C = cho_solve(factor, Y)
    C += cho_solve(factor, Y - shifted @ C)
    _check_residual(shifted @ C - Y, Y)
    return C


def solve_sylvester(K, Y, A, lam, n_pairs=None):
    """Solve K C A + n*lam*C = Y for symmetric PSD K and A.

    Diagonalizes K = U diag(w) U^T and A = V diag(s) V^T; in the rotated
    basis the system is elementwise with denominators w_a*s_b + n*lam, all
    at least n*lam > 0, so invertibility of A is never needed.
    """
    K = _as_dense_gram(K)
    Y = np.asarray(Y, dtype=float)
    A = np.asarray(A, dtype=float)
    if lam <= 0:
        raise ValueError("lam must be positive")
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be a square matrix")
    if np.max(np.abs(A - A.T)) > SYMMETRY_TOL:
        raise ValueError("A must be symmetric")
    n = K.shape[0]
    shift = (n if n_pairs is None else n_pairs) * lam
    w, U = _psd_eigh(K, "gram matrix", NumericalError)
    s, V = _psd_eigh(A, "output-structure matrix", ValueError)
    denom = np.multiply.outer(w, s) + shift
    if denom.min() < shift * (1.0 - 1e-12):
        raise NumericalError("ill-posed solve: denominator below the regularization shift")

    def rotated_solve(rhs):
        return U @ ((U.T @ rhs @ V) / denom) @ V.T

    C = rotated_solve(Y)
    C += rotated_solve(Y - (K @ C @ A + shift * C))
    _check_residual(K @ C @ A + shift * C - Y, Y)
    return C


def _kron_rotate(T, L, R):
    # out[a, b, c] = sum_{i,j} L[i, a] R[j, b] T[i, j, c]
    Z = np.tensordot(L.T, T, axes=(1, 0))
    return np.tensordot(R.T, Z, axes=(1, 1)).transpose(1, 0, 2)


def kron_apply(kx, ktheta, M):
    """(kx kron ktheta) @ M for identity-major stacked M of shape (t*m, d)."""
    t, m = kx.shape[0], ktheta.shape[0]
    T = M.reshape(t, m, -1)
    Z = np.tensordot(kx, T, axes=(1, 0))
    Z = np.tensordot(ktheta, Z, axes=(1, 1)).transpose(1, 0, 2)
    return Z.reshape(t * m, -1)


def solve_kron(kx, ktheta, Y, A=None, lam=1e-3):
    """Solve the training system with K = kron(kx, ktheta), never materialized.

    Y rows are identity-major (pair (i, j) at row i*m + j).  Only the t x t,
    m x m, and d x d eigendecompositions are computed; the eigenvalues of K
    are all products of the factor eigenvalues.  ``A=None`` means identity.
    """
    kx = np.asarray(kx, dtype=float)
    ktheta = np.asarray(ktheta, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if lam <= 0:
        raise ValueError("lam must be positive")
    t, m = kx.shape[0], ktheta.shape[0]
    if Y.ndim != 2 or Y.shape[0] != t * m:
        raise ValueError(f"Y has {Y.shape[0]} rows, expected t*m = {t * m}")
    d = Y.shape[1]
    shift = (t * m) * lam
    wx, Ux = _psd_eigh(kx, "input-kernel factor", NumericalError)
    wt, Ut = _psd_eigh(ktheta, "style-kernel factor", NumericalError)
    if A is not None:
        A = np.asarray(A, dtype=float)
        if A.shape != (d, d):
            raise ValueError(f"A is {A.shape}, expected ({d}, {d})")
        if np.max(np.abs(A - A.T)) > SYMMETRY_TOL:
            raise ValueError("A must be symmetric")
        s, V = _psd_eigh(A, "output-structure matrix", ValueError)
        denom = np.multiply.outer(np.multiply.outer(wx, wt), s) + shift
    else:
        denom = (np.multiply.outer(wx, wt) + shift)[:, :, None]
    if denom.min() < shift * (1.0 - 1e-12):
        raise NumericalError("ill-posed solve: denominator below the regularization shift")

    def rotated_solve(rhs):
        Z = _kron_rotate(rhs.reshape(t, m, d), Ux, Ut)
        if A is not None:
            Z = Z @ V
        Z = Z / denom
        if A is not None:
            Z = Z @ V.T
        return _kron_rotate(Z, Ux.T, Ut.T).reshape(t * m, d)

    def residual(C):
        R = kron_apply(kx, ktheta, C)
        if A is not None:
            R = R @ A
        return Y - (R + shift * C)

    C = rotated_solve(Y)
    C += rotated_solve(residual(C))
    _check_residual(-residual(C), Y)
    return C


def objective_value(C, K, Y, A=None, lam=1e-3, n_pairs=None):
    """Value of the finite-dimensional training objective at coefficients C:
    (1/(2n)) ||K C A - Y||_F^2 + (lam/2) Tr(K C A C^T)."""
    K = _as_dense_gram(K)
    C = np.asarray(C, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n = K.shape[0] if n_pairs is None else n_pairs
    KCA = K @ C if A is None else K @ C @ np.asarray(A, dtype=float)
    fit = 0.5 / n * float(np.linalg.norm(KCA - Y) ** 2)
    reg = 0.5 * lam * float(np.sum(KCA * C))
    return fit + reg


def objective_gradient(C, K, Y, A=None, lam=1e-3, n_pairs=None):
    """Gradient of the training objective: (1/n) K (K C A - Y) A + lam K C A."""
    K = _as_dense_gram(K)
    C = np.asarray(C, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n = K.shape[0] if n_pairs is None else n_pairs
    if A is None:
        KCA = K @ C
        return (1.0 / n) * (K @ (KCA - Y)) + lam * KCA
    A = np.asarray(A, dtype=float)
    KCA = K @ C @ A
    return (1.0 / n) * (K @ (KCA - Y) @ A) + lam * KCA


def build_lowrank_A(Y, rank):
    """Projection A = V J_r V^T from the spectrum of Y^T Y.

    V collects the eigenvectors of Y^T Y by decreasing eigenvalue; the first
    ``rank`` of them span the retained output subspace.  Returns (A, V).
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2:
        raise ValueError("Y must be a 2-d array of stacked outputs")
    d = Y.shape[1]
    if not 0 <= rank <= d:
        raise ValueError(f"rank {rank} outside [0, {d}]")
    w, V = np.linalg.eigh(Y.T @ Y)
    V = V[:, np.argsort(-w, kind="stable")]
    Vr = V[:, :rank]
    return Vr @ Vr.T, V
