"""Invariant filtrations and semisimplification of commuting matrix families.

A flat bundle over a base with abelian fundamental group is described by one
or two commuting invertible monodromy matrices.  Every such family has a
full flag of jointly invariant subspaces with one-dimensional quotients; the
multiset of joint eigenvalue tuples carried by those quotients (the graded
characters) is independent of the flag and is the isomorphism invariant of
the semisimplification.

The flag is built by repeatedly extracting a common eigenvector and passing
to the metric-orthogonal complement, which models the quotient.  Eigenvalue
clusters are classified by their mean: individual eigenvalues of a defective
cluster are only accurate to ||G||^(1/k)-type perturbations, while the
cluster mean is as accurate as the trace, which is what makes the graded
characters reproducible to ~1e-12 across changes of basis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import SingularMatrixError, StructuralError, ValidationError
from .linalg import dagger, kernel_basis

__all__ = [
    "ToleranceProfile",
    "EXACT_TOLS",
    "LIMIT_TOLS",
    "RepFamily",
    "Filtration",
    "GradedObject",
    "minimal_invariant_subspace",
    "jh_filtration",
    "graded",
    "semisimplify",
    "character_distance",
]


@dataclass(frozen=True)
class ToleranceProfile:
    """Numerical thresholds for one input regime.

    ``exact`` is for algebra on matrices given in full precision;
    ``limit`` is for families extracted from flow output, which carry
    discretization error.  Cluster tolerances are deliberately much looser
    than rank tolerances: eigenvalues of a defective cluster spread like
    eps^(1/k), while the singular values used for rank decisions stay at
    backward-error size.
    """

    name: str
    cluster_rel: float
    rank_rel: float
    invariance_rel: float
    match_tol: float
    comm_tol: float


EXACT_TOLS = ToleranceProfile("exact", cluster_rel=1e-4, rank_rel=1e-8,
                              invariance_rel=1e-9, match_tol=1e-8,
                              comm_tol=1e-10)
LIMIT_TOLS = ToleranceProfile("limit", cluster_rel=1e-5, rank_rel=1e-6,
                              invariance_rel=1e-6, match_tol=1e-3,
                              comm_tol=1e-6)


class RepFamily:
    """One or two commuting invertible matrices of a common dimension."""

    def __init__(self, generators, tol_comm=1e-10):
        gens = [linalg.as_matrix(G, f"generator {i}")
                for i, G in enumerate(generators)]
        if not 1 <= len(gens) <= 2:
            raise ValidationError(
                "families must have one or two generators "
                f"(got {len(gens)}); larger families are not supported"
            )
        r = gens[0].shape[-1]
        for G in gens:
            if G.ndim != 2 or G.shape != (r, r):
                raise StructuralError("generators must share one square shape")
            s = np.linalg.svd(G, compute_uv=False)
            if s[-1] <= 1e-12 * max(s[0], 1.0):
                raise SingularMatrixError("generator is numerically singular")
        if len(gens) == 2:
            comm = gens[0] @ gens[1] - gens[1] @ gens[0]
            scale = max(1.0, np.linalg.norm(gens[0]) * np.linalg.norm(gens[1]))
            if np.linalg.norm(comm) > tol_comm * scale:
                raise ValidationError(
                    f"generators do not commute: ||[G1,G2]|| = "
                    f"{np.linalg.norm(comm):.3e} (tol {tol_comm:.1e} rel)"
                )
        self.generators = tuple(gens)
        self.rank = r
        self.tol_comm = tol_comm

    def __len__(self):
        return len(self.generators)

    def __repr__(self):
        return f"RepFamily(rank={self.rank}, n_generators={len(self.generators)})"


@dataclass(frozen=True)
class Filtration:
    """Nested K-orthonormal bases with jointly invariant spans.

    ``steps[k]`` has k+1 columns; spans increase strictly up to the full
    space.  ``characters[k]`` is the joint eigenvalue tuple of the k-th
    one-dimensional quotient, in construction order.
    """

    steps: tuple
    characters: tuple
    invariance_residual: float


@dataclass(frozen=True)
class GradedObject:
    """Multiset of joint characters of the one-dimensional simple quotients."""

    characters: tuple  # tuple of tuples of complex, canonically sorted
    rank: int
    n_generators: int

    def to_json_dict(self):
        if self.n_generators == 1:
            chars = [[lam.real, lam.imag] for (lam,) in self.characters]
        else:
            chars = [[[lam.real, lam.imag] for lam in tup]
                     for tup in self.characters]
        return {"characters": chars}


def _sort_key(value):
    return (value.real, value.imag)


def _canonical_characters(tuples):
    return tuple(sorted(tuples, key=lambda t: [_sort_key(x) for x in t]))


def _cluster_means(w, tol_abs):
    """Group sorted eigenvalues into clusters; returns (mean, count) pairs."""
    order = sorted(range(len(w)), key=lambda i: _sort_key(w[i]))
    clusters = []
    current = [w[order[0]]]
    for i in order[1:]:
        if abs(w[i] - current[-1]) <= tol_abs:
            current.append(w[i])
        else:
            clusters.append(current)
            current = [w[i]]
    clusters.append(current)
    out = []
    for members in clusters:
        if all(m == members[0] for m in members):
            mean = members[0]  # keep bitwise value for already-clean input
        else:
            mean = complex(np.mean(members))
        out.append((mean, len(members)))
    return out


def _common_eigenvector(mats, scales, tols, largest):
    """Common eigenvector of a commuting stack, with its joint eigenvalues.

    Works down the list of generators: cluster the spectrum of the first,
    take the tie-break cluster, restrict the remaining generators to its
    geometric eigenspace, recurse.  ``scales`` carries the norms of the
    original ambient generators so thresholds do not tighten as the space
    shrinks.
    """
    G = mats[0]
    dim = G.shape[0]
    if dim == 1:
        v = np.ones(1, dtype=complex)
        return v, tuple(M[0, 0] for M in mats)
    w = np.linalg.eigvals(G)
    clusters = _cluster_means(w, tols.cluster_rel * max(scales[0], 1e-300))
    lam, _count = clusters[-1] if largest else clusters[0]
    V = kernel_basis(G - lam * np.eye(dim), rtol=tols.rank_rel,
                     scale=scales[0])
    if V.shape[1] == 0:
        raise ValidationError(
            "no eigenspace found at the rank tolerance; "
            "generators may not commute well enough"
        )
    if len(mats) == 1:
        vec = V[:, 0]
        chars = (lam,)
    else:
        rest = [dagger(V) @ M @ V for M in mats[1:]]
        sub, sub_chars = _common_eigenvector(rest, scales[1:], tols, largest)
        vec = V @ sub
        chars = (lam, *sub_chars)
    vec = vec / np.linalg.norm(vec)
    # fix the phase so repeated runs return the same representative
    k = int(np.argmax(np.abs(vec)))
    vec = vec * (np.conj(vec[k]) / abs(vec[k]))
    return vec, chars


def _check_eigvec(fam, v, chars, tols):
    for G, lam in zip(fam.generators, chars):
        res = np.linalg.norm(G @ v - lam * v)
        if res > 1e-9 * max(np.linalg.norm(G, 2), 1e-300):
            raise ValidationError(
                f"common eigenvector residual {res:.3e} above tolerance; "
                "input family is too far from commuting"
            )


def minimal_invariant_subspace(fam, tols=EXACT_TOLS, largest=False):
    """A unit vector spanning a minimal jointly invariant subspace.

    For a commuting family over the complex numbers this is a common
    eigenvector; the eigenvalue tie-break (smallest by (Re, Im), or largest
    with ``largest=True``) makes the choice deterministic.  Returns
    ``(vector, characters)``.
    """
    scales = [np.linalg.norm(G, 2) for G in fam.generators]
    v, chars = _common_eigenvector(list(fam.generators), scales, tols, largest)
    _check_eigvec(fam, v, chars, tols)
    return v, chars


def _orthonormal_complement(v):
    """Columns orthonormal and orthogonal to the unit vector v."""
    dim = v.shape[0]
    M = np.zeros((dim, dim), dtype=complex)
    M[:, 0] = v
    Q, _ = np.linalg.qr(M, mode="complete")
    # first column of Q spans v; the rest span the complement
    return Q[:, 1:]


def jh_filtration(fam, K=None, tols=EXACT_TOLS, largest=False):
    """Full invariant flag with one-dimensional quotients.

    The ambient space is mapped to coordinates in which the metric K is the
    identity, the flag is built there by repeated common-eigenvector /
    complement passes, and the bases are mapped back, which makes every
    returned step exactly K-orthonormal.
    """
    K = linalg._metric(K, fam.rank)
    r = fam.rank
    mats = [K.sqrt @ G @ K.inv_sqrt for G in fam.generators]
    scales = [np.linalg.norm(G, 2) for G in mats]

    embed = np.eye(r, dtype=complex)
    vectors = []
    characters = []
    for _ in range(r):
        v, chars = _common_eigenvector(mats, scales, tols, largest)
        vectors.append(embed @ v)
        characters.append(chars)
        if mats[0].shape[0] == 1:
            break
        N = _orthonormal_complement(v)
        mats = [dagger(N) @ M @ N for M in mats]
        embed = embed @ N

    basis = K.inv_sqrt @ np.stack(vectors, axis=1)
    steps = tuple(np.ascontiguousarray(basis[:, : k + 1]) for k in range(r))

    worst = 0.0
    eye = np.eye(r, dtype=complex)
    from .bundle import orthogonal_projector  # local import, no cycle at module load

    gen_scales = [np.linalg.norm(G, 2) for G in fam.generators]
    for step in steps[:-1]:
        pi = orthogonal_projector(step, K)
        for G, sc in zip(fam.generators, gen_scales):
            res = np.linalg.norm((eye - pi) @ G @ pi, 2) / max(sc, 1e-300)
            worst = max(worst, res)
    if worst > tols.invariance_rel:
        raise ValidationError(
            f"filtration invariance residual {worst:.3e} above "
            f"{tols.invariance_rel:.1e}; input family rejected"
        )
    filt = Filtration(steps=steps, characters=tuple(characters),
                      invariance_residual=worst)
    _check_filtration_consistency(fam, filt)
    return filt


def _check_filtration_consistency(fam, filt):
    for gen_index, G in enumerate(fam.generators):
        prod = complex(np.prod([c[gen_index] for c in filt.characters]))
        det = complex(np.linalg.det(G))
        if abs(prod - det) > 1e-6 * max(abs(det), 1e-300):
            raise ValidationError(
                "character product drifted from the determinant "
                f"({prod} vs {det}); filtration unreliable"
            )


def graded(fam, K=None, tols=EXACT_TOLS, largest=False):
    """Graded object: the canonical multiset of joint quotient characters."""
    filt = jh_filtration(fam, K=K, tols=tols, largest=largest)
    return GradedObject(
        characters=_canonical_characters(filt.characters),
        rank=fam.rank,
        n_generators=len(fam.generators),
    )


def semisimplify(fam, K=None, tols=EXACT_TOLS):
    """Diagonal commuting family with the same graded characters."""
    gr = graded(fam, K=K, tols=tols)
    gens = []
    for i in range(len(fam.generators)):
        gens.append(np.diag([tup[i] for tup in gr.characters]))
    return RepFamily(gens, tol_comm=fam.tol_comm)


def character_distance(a, b):
    """Optimal-assignment distance between two character multisets.

    The cost of pairing two tuples is the max over generators of the
    eigenvalue distance; the returned value is the largest matched cost
    under a minimal-cost perfect matching.
    """
    if a.n_generators != b.n_generators:
        raise StructuralError("character tuples have different arities")
    if len(a.characters) != len(b.characters):
        raise StructuralError("character multisets have different sizes")
    n = len(a.characters)
    cost = np.zeros((n, n))
    for i, ta in enumerate(a.characters):
        for j, tb in enumerate(b.characters):
            cost[i, j] = max(abs(x - y) for x, y in zip(ta, tb))
    from scipy.optimize import linear_sum_assignment

    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].max())
