"""Dense complex matrix kernel for small ranks (r <= 16).

Everything is double-precision complex.  All pointwise operations accept
stacked operands of shape ``(..., r, r)`` so grid fields can be processed in
one call.  The Hermitian structure is always taken relative to a background
metric K: the adjoint of M is ``K^-1 M^H K`` (conjugate transpose when K = I).
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as _sla

from .errors import BranchCutError, SingularMatrixError, ValidationError

__all__ = [
    "BackgroundMetric",
    "adjoint_wrt",
    "herm_split",
    "inner_product",
    "norm_sq",
    "expm",
    "logm_principal",
    "eig",
    "geometric_multiplicity",
    "kernel_basis",
]

_EPS = np.finfo(float).eps


def as_matrix(M, name="matrix"):
    """Coerce to a complex ndarray of shape (..., r, r) with finite entries."""
    A = np.asarray(M, dtype=complex)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ValidationError(f"{name} must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValidationError(f"{name} contains non-finite entries")
    return A


def dagger(M):
    """Conjugate transpose on the trailing two axes."""
    return np.conj(np.swapaxes(M, -1, -2))


class BackgroundMetric:
    """A fixed Hermitian positive-definite metric on the fibre.

    Validates Hermitian symmetry and positivity on construction and caches
    the inverse and the Hermitian square root (needed for logarithms of
    metric-self-adjoint operators).
    """

    def __init__(self, K, cond_limit=1e12):
        K = as_matrix(K, "metric")
        if K.ndim != 2:
            raise ValidationError("metric must be a single r x r matrix")
        scale = np.linalg.norm(K)
        if np.linalg.norm(K - dagger(K)) > 1e-12 * max(scale, 1.0):
            raise ValidationError("metric is not Hermitian")
        K = 0.5 * (K + dagger(K))
        w, V = np.linalg.eigh(K)
        if w[0] <= 0.0:
            raise SingularMatrixError("metric is not positive-definite")
        if w[-1] / w[0] > cond_limit:
            raise SingularMatrixError(
                f"metric condition number {w[-1] / w[0]:.3e} exceeds {cond_limit:.1e}"
            )
        self.matrix = K
        self.dim = K.shape[0]
        self.inv = V @ np.diag(1.0 / w) @ dagger(V)
        self.sqrt = V @ np.diag(np.sqrt(w)) @ dagger(V)
        self.inv_sqrt = V @ np.diag(1.0 / np.sqrt(w)) @ dagger(V)
        self.is_identity = bool(
            np.array_equal(K, np.eye(self.dim, dtype=complex))
        )

    @classmethod
    def identity(cls, r):
        return cls(np.eye(r, dtype=complex))

    def __repr__(self):
        return f"BackgroundMetric(dim={self.dim}, identity={self.is_identity})"


def _metric(K, r=None):
    if isinstance(K, BackgroundMetric):
        return K
    if K is None:
        if r is None:
            raise ValidationError("rank needed to build an identity metric")
        return BackgroundMetric.identity(r)
    return BackgroundMetric(K)


def adjoint_wrt(M, K):
    """Adjoint of M with respect to the metric K:  K^-1 M^H K.

    Satisfies <M x, y>_K = <x, adjoint_wrt(M, K) y>_K and is an involution.
    Accepts stacks (..., r, r).
    """
    K = _metric(K, np.asarray(M).shape[-1])
    M = np.asarray(M, dtype=complex)
    if M.shape[-1] != K.dim:
        raise ValidationError("matrix/metric dimension mismatch")
    if K.is_identity:
        return dagger(M)
    return K.inv @ dagger(M) @ K.matrix


def herm_split(M, K):
    """Split M into (skew, selfadj) parts relative to K.

    The second component equals its own K-adjoint, the first equals minus
    its K-adjoint, and the two sum to M.
    """
    Ma = adjoint_wrt(M, K)
    M = np.asarray(M, dtype=complex)
    sa = 0.5 * (M + Ma)
    return M - sa, sa


def inner_product(a, b, K):
    """Fibre inner product tr(a b^{*K}) on endomorphisms.

    Positive-definite in the first slot: inner_product(a, a, K) is real > 0
    for a != 0.  Conjugate-symmetric.  Stacked inputs give stacked outputs.
    """
    prod = np.asarray(a, dtype=complex) @ adjoint_wrt(b, K)
    return np.trace(prod, axis1=-2, axis2=-1)


def norm_sq(a, K):
    """Real part of inner_product(a, a, K); the imaginary part is round-off."""
    return np.real(inner_product(a, a, K))


def expm(M):
    """Matrix exponential (scaling-and-squaring), stack-aware."""
    M = as_matrix(M)
    return _sla.expm(M)


def logm_principal(M, hermitian_rtol=1e-12):
    """Principal matrix logarithm.

    Requires an invertible matrix with no eigenvalue on the closed negative
    real axis; otherwise raises.  Hermitian positive-definite input takes an
    eigendecomposition path so the result is exactly Hermitian.
    """
    M = as_matrix(M)
    if M.ndim != 2:
        raise ValidationError("logm_principal expects a single matrix")
    scale = max(np.linalg.norm(M), _EPS)
    if np.linalg.norm(M - dagger(M)) <= hermitian_rtol * scale:
        w, V = np.linalg.eigh(0.5 * (M + dagger(M)))
        if w[0] <= 0.0:
            raise BranchCutError("Hermitian input is not positive-definite")
        return V @ np.diag(np.log(w)) @ dagger(V)
    w = np.linalg.eigvals(M)
    if np.any(np.abs(w) <= 1e-14 * scale):
        raise SingularMatrixError("matrix is singular; no logarithm")
    on_cut = (w.real <= 0.0) & (np.abs(w.imag) <= 1e-14 * np.abs(w))
    if np.any(on_cut):
        raise BranchCutError(
            f"eigenvalue {w[on_cut][0]} lies on the branch cut (-inf, 0]"
        )
    return _sla.logm(M)


def eig(M):
    """Eigenvalues (with algebraic multiplicity) and eigenvector columns.

    Defective input yields repeated eigenvalues with linearly dependent
    columns; use :func:`geometric_multiplicity` to detect that.
    """
    M = as_matrix(M)
    if M.ndim != 2:
        raise ValidationError("eig expects a single matrix")
    return np.linalg.eig(M)


def kernel_basis(M, rtol=1e-8, scale=None):
    """Orthonormal basis of the numerical kernel of M.

    Columns are right singular vectors whose singular values fall below
    ``rtol * scale``; ``scale`` defaults to the largest singular value of M.
    Ordered by ascending singular value (most null first).
    """
    M = as_matrix(M)
    _, s, Vh = np.linalg.svd(M)
    if scale is None:
        scale = s[0] if s.size else 0.0
    thresh = rtol * max(scale, _EPS)
    null = s <= thresh
    cols = dagger(Vh)[:, null]
    return cols[:, ::-1]


def geometric_multiplicity(M, lam, rtol=1e-8):
    """dim ker(M - lam I) with an SVD threshold of rtol * ||M||."""
    M = as_matrix(M)
    r = M.shape[-1]
    s = np.linalg.svd(M - lam * np.eye(r), compute_uv=False)
    scale = max(np.linalg.norm(M, 2), _EPS)
    return int(np.sum(s <= rtol * scale))
