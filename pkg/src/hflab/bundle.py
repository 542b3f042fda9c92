"""Discrete flat bundles over the unit circle and the unit-square torus.

The bundle is globally trivialized: a connection is ``d + A`` with one grid
of r x r complex coefficient matrices per base direction and plain periodic
indexing.  The base metric is the flat standard one, side lengths are fixed
at 1, so the total volume is 1 and integrals are grid means.

Array layout conventions used throughout:

* 0-form endomorphism field: ``(*shape, r, r)``
* 1-form (one endomorphism per direction): ``(ndirs, *shape, r, r)``

Spatial derivatives are second-order central differences; the same stencil
is used everywhere so summation by parts is exact on the periodic grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import (
    ConditioningError,
    StructuralError,
    ValidationError,
)
from .linalg import BackgroundMetric, adjoint_wrt, dagger, expm

__all__ = [
    "BaseGrid",
    "circle",
    "torus",
    "ConnectionField",
    "DecompositionField",
    "GaugeField",
    "make_constant_connection",
    "decompose",
    "flatness_residual",
    "monodromy",
    "monodromy_family",
    "gauge_apply",
    "metric_from_gauge",
    "orthogonal_projector",
    "central_diff",
    "connection_to_json",
    "connection_from_json",
    "complex_to_pairs",
    "pairs_to_complex",
]

TOL_COMM = 1e-12  # commutator bound for constant torus coefficients


@dataclass(frozen=True)
class BaseGrid:
    """Periodic sampling of S^1 (kind 'circle') or T^2 (kind 'torus').

    ``shape`` holds the point counts per direction; the spacing in direction
    i is ``1/shape[i]`` since every side length is 1.
    """

    kind: str
    shape: tuple

    def __post_init__(self):
        if self.kind not in ("circle", "torus"):
            raise ValidationError(f"unknown base kind {self.kind!r}")
        want = 1 if self.kind == "circle" else 2
        if len(self.shape) != want:
            raise ValidationError(f"{self.kind} grid needs {want} extents")
        for n in self.shape:
            if int(n) != n or n < 8:
                raise ValidationError("grid extents must be integers >= 8")
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))

    @property
    def ndirs(self):
        return len(self.shape)

    @property
    def spacing(self):
        return tuple(1.0 / n for n in self.shape)

    @property
    def npoints(self):
        return int(np.prod(self.shape))

    def coordinates(self, direction):
        n = self.shape[direction]
        return np.arange(n) / n


def circle(n):
    return BaseGrid("circle", (n,))


def torus(nx, ny):
    return BaseGrid("torus", (nx, ny))


def central_diff(F, axis, spacing):
    """Periodic central difference along one spatial axis."""
    return (np.roll(F, -1, axis=axis) - np.roll(F, 1, axis=axis)) / (2.0 * spacing)


def _freeze(arr):
    arr = np.ascontiguousarray(arr, dtype=complex)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ConnectionField:
    """Coefficients A_i(x) of a connection d + A in the global trivialization."""

    grid: BaseGrid
    rank: int
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        want = (self.grid.ndirs, *self.grid.shape, self.rank, self.rank)
        if c.shape != want:
            raise StructuralError(f"coefficients shape {c.shape} != {want}")
        if not np.all(np.isfinite(c)):
            raise ValidationError("connection coefficients contain non-finite entries")
        object.__setattr__(self, "coeffs", _freeze(c))

    def direction(self, i):
        return self.coeffs[i]

    def replace_coeffs(self, coeffs):
        return ConnectionField(self.grid, self.rank, coeffs)


@dataclass(frozen=True)
class DecompositionField:
    """Pointwise split A_i = U_i + psi_i into K-skew and K-self-adjoint parts."""

    grid: BaseGrid
    rank: int
    skew: np.ndarray = field(repr=False)
    selfadj: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "skew", _freeze(self.skew))
        object.__setattr__(self, "selfadj", _freeze(self.selfadj))


@dataclass(frozen=True)
class GaugeField:
    """A grid of invertible fibre automorphisms sigma(x).

    ``h = sigma^{*K} sigma`` is K-self-adjoint positive, ``s = log h`` its
    principal logarithm, ``H = K h`` the transformed metric.
    """

    grid: BaseGrid
    rank: int
    sigma: np.ndarray = field(repr=False)

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=complex)
        want = (*self.grid.shape, self.rank, self.rank)
        if s.shape != want:
            raise StructuralError(f"gauge shape {s.shape} != {want}")
        object.__setattr__(self, "sigma", _freeze(s))

    @classmethod
    def identity(cls, grid, rank):
        eye = np.broadcast_to(np.eye(rank, dtype=complex),
                              (*grid.shape, rank, rank))
        return cls(grid, rank, eye.copy())

    def check_conditioning(self, limit=1e8):
        c = np.linalg.cond(self.sigma)
        worst = float(np.max(c))
        if not np.isfinite(worst) or worst > limit:
            raise ConditioningError(
                f"gauge field condition number {worst:.3e} exceeds {limit:.1e}"
            )
        return worst

    def h(self, K):
        """K-self-adjoint positive square sigma^{*K} sigma."""
        return adjoint_wrt(self.sigma, K) @ self.sigma

    def log_h(self, K):
        """s = log h, computed exactly K-self-adjoint via the metric square root."""
        K = linalg._metric(K, self.rank)
        h = self.h(K)
        hH = K.sqrt @ h @ K.inv_sqrt
        hH = 0.5 * (hH + dagger(hH))
        w, V = np.linalg.eigh(hH)
        if np.any(w <= 0.0):
            raise ConditioningError("gauge square h is not positive; sigma too singular")
        logs = np.einsum("...ij,...j,...kj->...ik", V, np.log(w), np.conj(V))
        return K.inv_sqrt @ logs @ K.sqrt

    def metric(self, K):
        """Transformed metric H = K h as a grid of HPD matrices."""
        K = linalg._metric(K, self.rank)
        return K.matrix @ self.h(K)


def make_constant_connection(grid, mats, tol_comm=TOL_COMM):
    """Connection with constant coefficients, one matrix per base direction.

    On the torus the two matrices must commute (within ``tol_comm``), which
    is exactly flatness for constant coefficients.
    """
    mats = [linalg.as_matrix(M, f"coefficient {i}") for i, M in enumerate(mats)]
    if len(mats) != grid.ndirs:
        raise ValidationError(
            f"need {grid.ndirs} coefficient matrices for a {grid.kind}, got {len(mats)}"
        )
    r = mats[0].shape[-1]
    for M in mats:
        if M.shape != (r, r):
            raise StructuralError("coefficient matrices must share one dimension")
    if grid.ndirs == 2:
        comm = mats[0] @ mats[1] - mats[1] @ mats[0]
        if np.linalg.norm(comm) > tol_comm:
            raise ValidationError(
                "constant torus coefficients do not commute: "
                f"||[C1, C2]|| = {np.linalg.norm(comm):.3e} > {tol_comm:.1e}"
            )
    coeffs = np.empty((grid.ndirs, *grid.shape, r, r), dtype=complex)
    for i, M in enumerate(mats):
        coeffs[i] = M
    return ConnectionField(grid, r, coeffs)


def decompose(A, K):
    """Pointwise K-skew / K-self-adjoint split of every coefficient."""
    skew, sa = linalg.herm_split(A.coeffs, K)
    return DecompositionField(A.grid, A.rank, skew, sa)


def flatness_residual(A):
    """Sup over the grid of the Frobenius norm of the discrete curvature.

    F = d_x A_y - d_y A_x + [A_x, A_y] on the torus; identically zero on the
    circle, where there are no 2-forms.
    """
    if A.grid.ndirs == 1:
        return 0.0
    dx, dy = A.grid.spacing
    Ax, Ay = A.coeffs[0], A.coeffs[1]
    F = (central_diff(Ay, 0, dx) - central_diff(Ax, 1, dy)
         + Ax @ Ay - Ay @ Ax)
    return float(np.sqrt(np.max(np.sum(np.abs(F) ** 2, axis=(-2, -1)))))


def _transport_line(line, spacing):
    """Ordered product of per-cell exponentials along one closed grid line.

    Cell j transports from node j to node j+1 using the averaged endpoint
    coefficient, which matches the midpoint value to second order.
    """
    mid = 0.5 * (line + np.roll(line, -1, axis=0))
    cells = expm(-spacing * mid)
    T = np.eye(line.shape[-1], dtype=complex)
    for j in range(cells.shape[0]):
        T = cells[j] @ T
    return T


def monodromy(A, direction=0, basepoint=None):
    """Holonomy around the generator loop in the given direction.

    For constant coefficient C this converges to expm(-C); the averaged-cell
    exponential stepping is second-order accurate in the spacing.
    """
    if basepoint is None:
        basepoint = (0,) * A.grid.ndirs
    if direction not in range(A.grid.ndirs):
        raise ValidationError(f"no direction {direction} on a {A.grid.kind}")
    coeff = A.coeffs[direction]
    if A.grid.ndirs == 1:
        line = np.roll(coeff, -basepoint[0], axis=0)
    else:
        if direction == 0:
            line = np.roll(coeff[:, basepoint[1]], -basepoint[0], axis=0)
        else:
            line = np.roll(coeff[basepoint[0], :], -basepoint[1], axis=0)
    return _transport_line(line, A.grid.spacing[direction])


def monodromy_family(A, basepoint=None):
    """All generator holonomies at one basepoint, as a list of matrices."""
    return [monodromy(A, i, basepoint) for i in range(A.grid.ndirs)]


def gauge_apply(sigma, A, cond_limit=1e8):
    """Act on the connection coefficients:  A -> s A s^-1 - (d s) s^-1.

    The spectrum of every holonomy is preserved up to the discretization
    error of the central-difference derivative of sigma.
    """
    if isinstance(sigma, GaugeField):
        sig = sigma.sigma
        sigma.check_conditioning(cond_limit)
    else:
        sig = np.asarray(sigma, dtype=complex)
        GaugeField(A.grid, A.rank, sig).check_conditioning(cond_limit)
    if sig.shape != (*A.grid.shape, A.rank, A.rank):
        raise StructuralError("gauge field shape does not match the connection")
    sig_inv = np.linalg.inv(sig)
    out = np.empty_like(A.coeffs)
    for i in range(A.grid.ndirs):
        ds = central_diff(sig, i, A.grid.spacing[i])
        out[i] = sig @ A.coeffs[i] @ sig_inv - ds @ sig_inv
    return A.replace_coeffs(out)


def metric_from_gauge(sigma, K):
    """Grid of transformed metrics H = K sigma^{*K} sigma."""
    if not isinstance(sigma, GaugeField):
        raise ValidationError("metric_from_gauge expects a GaugeField")
    return sigma.metric(K)


def orthogonal_projector(basis, K):
    """K-orthogonal projection onto the column span of ``basis``.

    Returns pi with pi^2 = pi = pi^{*K} and pi @ basis = basis.  The columns
    must be linearly independent.
    """
    K = linalg._metric(K, np.asarray(basis).shape[0])
    B = np.asarray(basis, dtype=complex)
    if B.ndim == 1:
        B = B[:, None]
    if B.shape[0] != K.dim or B.shape[1] > K.dim:
        raise StructuralError("basis shape incompatible with the metric")
    s = np.linalg.svd(B, compute_uv=False)
    if s.size == 0 or s[-1] <= 1e-12 * s[0]:
        raise ValidationError("basis columns are (numerically) dependent")
    G = dagger(B) @ K.matrix @ B
    return B @ np.linalg.solve(G, dagger(B) @ K.matrix)


# ---------------------------------------------------------------------------
# serialization


def complex_to_pairs(arr):
    out = np.stack([np.real(arr), np.imag(arr)], axis=-1)
    return out.tolist()


def pairs_to_complex(obj, name="array"):
    arr = np.asarray(obj, dtype=float)
    if arr.ndim < 1 or arr.shape[-1] != 2:
        raise ValidationError(f"{name}: expected nested [re, im] pairs")
    return arr[..., 0] + 1j * arr[..., 1]


def connection_to_json(A):
    """JSON document for a connection field; round-trips exactly."""
    base = {"kind": A.grid.kind}
    if A.grid.kind == "circle":
        base["n"] = A.grid.shape[0]
    else:
        base["nx"], base["ny"] = A.grid.shape
    return {
        "rank": A.rank,
        "base": base,
        "coeffs": [complex_to_pairs(A.coeffs[i]) for i in range(A.grid.ndirs)],
    }


def connection_from_json(doc):
    if not isinstance(doc, dict):
        raise ValidationError("connection document must be an object")
    try:
        base = doc["base"]
        rank = doc["rank"]
        raw = doc["coeffs"]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"connection document missing field: {exc}") from exc
    kind = base.get("kind")
    if kind == "circle":
        grid = circle(base["n"])
    elif kind == "torus":
        grid = torus(base["nx"], base["ny"])
    else:
        raise ValidationError(f"unknown base kind {kind!r}")
    coeffs = np.stack([pairs_to_complex(c, "coeffs") for c in raw], axis=0)
    return ConnectionField(grid, int(rank), coeffs)
