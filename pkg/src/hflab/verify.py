"""Executable verdict: is the flow limit the semisimplification of the input?

The check has two halves.  ``is_semisimple`` tests whether a commuting
family is simultaneously diagonalizable (every eigenvalue cluster of every
generator has full geometric multiplicity).  ``iso_check`` combines that
with an optimal matching of joint character multisets; two semisimple
commuting families are isomorphic exactly when the multisets agree.

Also here: subbundle diagnostics along a recorded flow trajectory (the
norm of the covariant derivative of the tracked projector, the second
fundamental form, and the normalized inclusion map with its intertwining
defect), which quantify how the flow tears an invariant subbundle off its
non-split extension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .bundle import central_diff, orthogonal_projector
from .errors import StructuralError, ValidationError
from .jordan_holder import (
    EXACT_TOLS,
    LIMIT_TOLS,
    GradedObject,
    RepFamily,
    character_distance,
    graded,
)
from .linalg import adjoint_wrt, dagger

__all__ = [
    "IsoVerdict",
    "SubbundleTrace",
    "is_semisimple",
    "iso_check",
    "second_fundamental_form",
    "projection_trace",
    "eta_trace",
]


def is_semisimple(fam, tols=LIMIT_TOLS):
    """(bool, residual): simultaneous diagonalizability of a commuting family.

    Each generator is checked cluster by cluster: the geometric multiplicity
    (SVD rank deficiency at ``tols.rank_rel * ||G||``) must equal the cluster
    size.  The residual is the largest algebraic-minus-geometric defect.
    """
    from .jordan_holder import _cluster_means

    worst = 0
    for G in fam.generators:
        scale = np.linalg.norm(G, 2)
        w = np.linalg.eigvals(G)
        for lam, count in _cluster_means(w, tols.cluster_rel * max(scale, 1e-300)):
            geo = linalg.geometric_multiplicity(G, lam, rtol=tols.rank_rel)
            worst = max(worst, count - geo)
    return worst == 0, float(worst)


@dataclass(frozen=True)
class IsoVerdict:
    """Outcome of the isomorphism test between a limit family and a graded object."""

    verdict: str  # "isomorphic" | "not_semisimple" | "spectra_mismatch"
    semisimple: bool
    semisimple_residual: float
    spectra_match: bool
    max_character_distance: float
    tolerance_regime: str
    tolerances: dict

    def to_json_dict(self):
        return {
            "verdict": self.verdict,
            "semisimple": self.semisimple,
            "semisimple_residual": self.semisimple_residual,
            "spectra_match": self.spectra_match,
            "max_character_distance": self.max_character_distance,
            "tolerance_regime": self.tolerance_regime,
            "tolerances": dict(self.tolerances),
        }


def iso_check(limit, graded_obj, tols=LIMIT_TOLS):
    """Compare a limit family against a graded object.

    verdict = isomorphic  iff the limit is semisimple and its joint character
    multiset matches the graded one within ``tols.match_tol``.
    """
    if not isinstance(limit, RepFamily):
        limit = RepFamily(limit, tol_comm=tols.comm_tol)
    if not isinstance(graded_obj, GradedObject):
        raise ValidationError("iso_check needs a GradedObject to compare against")
    if limit.rank != graded_obj.rank:
        raise StructuralError(
            f"rank mismatch: limit {limit.rank} vs graded {graded_obj.rank}"
        )
    if len(limit.generators) != graded_obj.n_generators:
        raise StructuralError("generator count mismatch")

    ss, residual = is_semisimple(limit, tols)
    limit_chars = graded(limit, tols=tols)
    dist = character_distance(limit_chars, graded_obj)
    match = dist <= tols.match_tol

    if not ss:
        verdict = "not_semisimple"
    elif not match:
        verdict = "spectra_mismatch"
    else:
        verdict = "isomorphic"
    return IsoVerdict(
        verdict=verdict,
        semisimple=ss,
        semisimple_residual=residual,
        spectra_match=match,
        max_character_distance=dist,
        tolerance_regime=tols.name,
        tolerances={
            "cluster_rel": tols.cluster_rel,
            "rank_rel": tols.rank_rel,
            "match_tol": tols.match_tol,
            "comm_tol": tols.comm_tol,
        },
    )


# ---------------------------------------------------------------------------
# subbundle diagnostics


def _d_end(field0form, A, i):
    """Covariant derivative of an endomorphism field in direction i."""
    sp = A.grid.spacing[i]
    Ai = A.coeffs[i]
    return central_diff(field0form, i, sp) + Ai @ field0form - field0form @ Ai


def second_fundamental_form(A, K, basis):
    """Obstruction to the K-orthogonal splitting of span(basis).

    Returns ``(beta, l2sq, invariance_residual)`` where beta is the 1-form
    ``-pi (D pi)`` (one grid of matrices per direction), ``l2sq`` its mean
    squared K-norm, and the residual measures how far span(basis) is from
    being invariant under the connection (``(1-pi) D(pi)``, sup norm).
    For an invariant K-orthogonal direct summand beta vanishes identically.
    """
    K = linalg._metric(K, A.rank)
    B = np.asarray(basis, dtype=complex)
    if B.ndim == 1:
        B = B[:, None]
    pi = orthogonal_projector(B, K)
    eye = np.eye(A.rank, dtype=complex)
    beta = np.empty_like(A.coeffs)
    inv_res = 0.0
    for i in range(A.grid.ndirs):
        dpi = _d_end(np.broadcast_to(pi, A.coeffs[i].shape), A, i)
        beta[i] = -pi @ dpi
        comp = (eye - pi) @ dpi @ pi
        inv_res = max(inv_res, float(np.sqrt(np.max(
            np.sum(np.abs(comp) ** 2, axis=(-2, -1))))))
    ns = np.real(np.einsum("...ij,...ji->...", beta, adjoint_wrt(beta, K)))
    l2sq = float(np.sum(ns) / A.grid.npoints)
    return beta, l2sq, inv_res


@dataclass
class SubbundleTrace:
    """Per-recorded-time diagnostics for one tracked subbundle."""

    t: np.ndarray
    dpi_l2sq: np.ndarray
    beta_l2sq: np.ndarray
    eta_increment: np.ndarray
    eta_defect: float | None = None
    eta_range_invariance: float | None = None


def _moving_projector(state, basis, K):
    """sigma pi_H sigma^-1 for the H(t)-orthogonal projector onto span(basis)."""
    sig = state.sigma
    H = K.matrix @ (adjoint_wrt(sig, K) @ sig)
    Bd = dagger(basis)
    piH = basis @ np.linalg.solve(Bd @ H @ basis, Bd @ H)
    return sig @ piH @ np.linalg.inv(sig)


def projection_trace(trajectory, basis, K):
    """Track ``mean |D pi|^2`` and ``mean |beta|^2`` along a gauged trajectory.

    ``trajectory`` is the recorded list of flow states with gauge tracking
    enabled; ``basis`` spans an invariant subspace of the initial connection.
    The recorded quantity decays to zero on converged runs.
    """
    if not trajectory:
        raise ValidationError("empty trajectory")
    if trajectory[0].sigma is None:
        raise StructuralError("projection_trace needs gauge tracking enabled")
    A0 = trajectory[0].A
    K = linalg._metric(K, A0.rank)
    B = np.asarray(basis, dtype=complex)
    if B.ndim == 1:
        B = B[:, None]

    ts, dpis, betas = [], [], []
    for state in trajectory:
        if state.sigma is None:
            break
        A = state.A
        pi = _moving_projector(state, B, K)
        dpi_sq = 0.0
        beta_sq = 0.0
        for i in range(A.grid.ndirs):
            dpi = _d_end(pi, A, i)
            dpi_sq += np.sum(_norm_field_sq(dpi, K))
            beta_sq += np.sum(_norm_field_sq(-pi @ dpi, K))
        ts.append(state.t)
        dpis.append(dpi_sq / A.grid.npoints)
        betas.append(beta_sq / A.grid.npoints)
    return SubbundleTrace(
        t=np.array(ts),
        dpi_l2sq=np.array(dpis),
        beta_l2sq=np.array(betas),
        eta_increment=np.zeros(len(ts)),
    )


def _norm_field_sq(M, K):
    return np.real(np.einsum("...ij,...ji->...", M, adjoint_wrt(M, K)))


def _normalized_eta(state, basis, K):
    eta = state.sigma @ basis
    gram = dagger(eta) @ K.matrix @ eta
    nrm = np.sqrt(np.real(np.trace(gram, axis1=-2, axis2=-1)).mean())
    return eta / nrm


def eta_trace(trajectory, basis, K, A0=None):
    """Normalized inclusion map along the flow and its final intertwining defect.

    eta_t = sigma(t) basis, rescaled to unit discrete L2 norm.  Records the
    increment norms between consecutive recorded times (a Cauchy gauge), the
    final defect ``|| d eta + A_end eta - eta A_S ||`` against the initial
    connection restricted to span(basis), and how invariant range(eta) is
    under the final connection.  ``A0`` defaults to the first trajectory
    state; pass the true t=0 connection when the trajectory was resumed.
    """
    if not trajectory:
        raise ValidationError("empty trajectory")
    if trajectory[0].sigma is None:
        raise StructuralError("eta_trace needs gauge tracking enabled")
    if A0 is None:
        A0 = trajectory[0].A
    K = linalg._metric(K, A0.rank)
    B = np.asarray(basis, dtype=complex)
    if B.ndim == 1:
        B = B[:, None]

    # restriction of the initial connection to the tracked subspace
    pinv = np.linalg.solve(dagger(B) @ K.matrix @ B, dagger(B) @ K.matrix)
    A_sub = [pinv @ A0.coeffs[i] @ B for i in range(A0.grid.ndirs)]

    usable = [s for s in trajectory if s.sigma is not None]
    etas = [_normalized_eta(s, B, K) for s in usable]
    ts = np.array([s.t for s in usable])
    incr = np.zeros(len(etas))
    for k in range(1, len(etas)):
        d = etas[k] - etas[k - 1]
        incr[k] = float(np.sqrt(np.real(
            np.trace(dagger(d) @ K.matrix @ d, axis1=-2, axis2=-1)).mean()))

    final = usable[-1]
    eta = etas[-1]
    A_end = final.A
    defect_sq = 0.0
    for i in range(A_end.grid.ndirs):
        theta = (central_diff(eta, i, A_end.grid.spacing[i])
                 + A_end.coeffs[i] @ eta - eta @ A_sub[i])
        defect_sq += float(np.real(
            np.trace(dagger(theta) @ K.matrix @ theta,
                     axis1=-2, axis2=-1)).mean())
    defect = float(np.sqrt(defect_sq))

    # invariance of range(eta) under the final connection
    inv_res = 0.0
    gram = dagger(eta) @ K.matrix @ eta
    proj = eta @ np.linalg.solve(gram, dagger(eta) @ K.matrix)
    eye = np.eye(A_end.rank, dtype=complex)
    for i in range(A_end.grid.ndirs):
        comp = (eye - proj) @ (A_end.coeffs[i] @ eta)
        inv_res = max(inv_res, float(np.max(np.abs(comp))))

    return SubbundleTrace(
        t=ts,
        dpi_l2sq=np.zeros(len(ts)),
        beta_l2sq=np.zeros(len(ts)),
        eta_increment=incr,
        eta_defect=defect,
        eta_range_invariance=inv_res,
    )
