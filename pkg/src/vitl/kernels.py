"""Gaussian kernels and Gram matrices with separable (input x style) structure.

The kernel over (input, style) anchor pairs factorizes as
``k_X(x, x') * k_Theta(theta, theta') * A`` with scalar Gaussian kernels on
each space and a symmetric PSD matrix ``A`` coupling the output coordinates.
Gram matrices over training anchors are assembled densely or, when every
identity shares the same style grid, in Kronecker-factored form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

SYMMETRY_TOL = 1e-12
PSD_RTOL = 1e-10
SHARED_GRID_TOL = 1e-12
ORTHONORMAL_TOL = 1e-10


def gaussian_kernel(u, v, gamma):
    """Evaluate exp(-gamma * ||u - v||^2) for one pair of vectors."""
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    diff = u - v
    return float(np.exp(-gamma * np.dot(diff, diff)))


def gaussian_gram(U, V, gamma):
    """Pairwise Gaussian kernel matrix between the rows of U and the rows of V."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    if U.shape[1] != V.shape[1]:
        raise ValueError(f"dimension mismatch: {U.shape[1]} vs {V.shape[1]}")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return np.exp(-gamma * cdist(U, V, "sqeuclidean"))


class IdentityA:
    """Output structure A = I: independent output coordinates."""

    def __repr__(self):
        return "IdentityA()"

    def __eq__(self, other):
        return isinstance(other, IdentityA)

    def __hash__(self):
        return hash("IdentityA")


@dataclass(frozen=True, eq=False)
class LowRankA:
    """Output structure A = V J_r V^T, the projection onto the leading
    ``rank`` columns of the orthonormal basis ``basis``."""

    rank: int
    basis: np.ndarray

    def __post_init__(self):
        V = np.asarray(self.basis, dtype=float)
        if V.ndim != 2 or V.shape[0] != V.shape[1]:
            raise ValueError("basis must be a square matrix")
        if not 0 <= self.rank <= V.shape[0]:
            raise ValueError(f"rank {self.rank} outside [0, {V.shape[0]}]")
        if np.max(np.abs(V.T @ V - np.eye(V.shape[0]))) > ORTHONORMAL_TOL:
            raise ValueError("basis columns are not orthonormal")
        object.__setattr__(self, "basis", V)


@dataclass(frozen=True, eq=False)
class ExplicitA:
    """Output structure given as an explicit symmetric PSD matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.matrix, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("A must be a square matrix")
        if np.max(np.abs(A - A.T)) > SYMMETRY_TOL:
            raise ValueError("A must be symmetric")
        w = np.linalg.eigvalsh(A)
        norm2 = float(np.max(np.abs(w))) if w.size else 0.0
        if norm2 > 0 and w[0] < -PSD_RTOL * norm2:
            raise ValueError("A must be positive semidefinite")
        object.__setattr__(self, "matrix", A)


@dataclass(frozen=True, eq=False)
class KernelSpec:
    """Bandwidths of the two Gaussian kernels plus the output structure."""

    gamma_x: float
    gamma_theta: float
    a_spec: IdentityA | LowRankA | ExplicitA = field(default_factory=IdentityA)

    def __post_init__(self):
        if self.gamma_x <= 0 or self.gamma_theta <= 0:
            raise ValueError("kernel bandwidths must be positive")


@dataclass(frozen=True, eq=False)
class KroneckerGram:
    """Gram matrix stored as (input factor) kron (style factor)."""

    kx: np.ndarray
    ktheta: np.ndarray

    @property
    def shape(self):
        n = self.kx.shape[0] * self.ktheta.shape[0]
        return (n, n)

    def dense(self):
        return np.kron(self.kx, self.ktheta)


def materialize_A(spec, d):
    """Realize the output-structure matrix of ``spec`` as a dense (d, d) array.

    ``spec`` may be a KernelSpec or a bare IdentityA / LowRankA / ExplicitA.
    """
    if d < 1:
        raise ValueError("d must be at least 1")
    a = spec.a_spec if isinstance(spec, KernelSpec) else spec
    if isinstance(a, IdentityA):
        return np.eye(d)
    if isinstance(a, LowRankA):
        if a.basis.shape[0] != d:
            raise ValueError(f"basis is {a.basis.shape[0]}x{a.basis.shape[1]}, expected {d}x{d}")
        if a.rank > d:
            raise ValueError(f"rank {a.rank} exceeds dimension {d}")
        Vr = a.basis[:, : a.rank]
        return Vr @ Vr.T
    if isinstance(a, ExplicitA):
        if a.matrix.shape[0] != d:
            raise ValueError(f"A is {a.matrix.shape[0]}x{a.matrix.shape[1]}, expected {d}x{d}")
        return a.matrix.copy()
    raise TypeError(f"unknown output-structure spec: {a!r}")


def is_shared_grid(emotions, tol=SHARED_GRID_TOL):
    """True when every identity is observed at the same style locations."""
    TH = np.asarray(emotions, dtype=float)
    if TH.size == 0:
        return True
    return bool(np.max(np.abs(TH - TH[:1])) <= tol)


def build_gram_dense(inputs, emotions, spec):
    """Dense (t*m, t*m) Gram matrix over all (identity, style) anchor pairs.

    Rows are identity-major: pair (i, j) sits at flat index i*m + j, and the
    entry for pairs (i1, j1), (i2, j2) is
    ``k_X(x_i1, x_i2) * k_Theta(theta_{i1,j1}, theta_{i2,j2})``.
    """
    X = np.asarray(inputs, dtype=float)
    TH = np.asarray(emotions, dtype=float)
    if X.ndim != 2 or TH.ndim != 3:
        raise ValueError("inputs must be (t, d) and emotions (t, m, p)")
    if X.shape[0] != TH.shape[0]:
        raise ValueError("inputs and emotions disagree on the number of identities")
    t, m = TH.shape[0], TH.shape[1]
    if t < 1 or m < 1:
        raise ValueError("empty dataset")
    kx = gaussian_gram(X, X, spec.gamma_x)
    flat = TH.reshape(t * m, TH.shape[2])
    ktheta = gaussian_gram(flat, flat, spec.gamma_theta)
    return np.kron(kx, np.ones((m, m))) * ktheta


def build_gram_kron(inputs, shared_grid, spec):
    """Kronecker-factored Gram matrix for a style grid shared by all identities.

    Stores the t x t input factor and the m x m style factor; the (t*m)^2
    product is never materialized.
    """
    X = np.asarray(inputs, dtype=float)
    grid = np.asarray(shared_grid, dtype=float)
    if X.ndim != 2 or grid.ndim != 2:
        raise ValueError("inputs must be (t, d) and shared_grid (m, p)")
    if X.shape[0] < 1 or grid.shape[0] < 1:
        raise ValueError("empty dataset")
    return KroneckerGram(
        kx=gaussian_gram(X, X, spec.gamma_x),
        ktheta=gaussian_gram(grid, grid, spec.gamma_theta),
    )
