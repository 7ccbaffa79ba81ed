"""
core/builders.py
────────────────
Constructors for the standard differential structures: Lindblad generators
with modular-eigenvector jump operators, reversible Markov chains (Lindblad
and graph forms), the hypercube random walk, the fermionic Ornstein–Uhlenbeck
semigroup and the depolarizing semigroup.

Every builder returns a validated DifferentialStructure or raises
StructureError with the failed axioms.
"""

import itertools
import logging
import os
import sys

import numpy as np

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from shared import config
from shared.errors import StructureError
from core.matalg import Algebra, DensityMatrix, as_density
from core.diffstruct import (
    Direction, DifferentialStructure, embedding_hom, evaluation_hom, identity_hom,
    parity_hom, swap_hom, validate_structure,
)

logger = logging.getLogger("Builders")

PAULI = (
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]], dtype=complex),
    np.array([[1, 0], [0, -1]], dtype=complex),
)


def _finish(ds: DifferentialStructure, **meta) -> DifferentialStructure:
    ds.meta.update(meta)
    report = validate_structure(ds)
    if not report.passed:
        failed = ", ".join(f"{r.axiom} ({r.residual:.2e})" for r in report.failures())
        raise StructureError(f"builder '{ds.name}' produced an invalid structure: {failed}")
    return ds


def _unit(n, k, p):
    E = np.zeros((n, n), dtype=complex)
    E[k, p] = 1.0
    return E


def _check_rates(q, pi):
    q = np.asarray(q, dtype=float)
    pi = np.asarray(pi, dtype=float)
    n = len(pi)
    if q.shape != (n, n):
        raise StructureError("rate matrix must be n×n with n = len(π)")
    if np.any(pi <= 0) or abs(pi.sum() - 1.0) > 1e-10:
        raise StructureError("π must be a strictly positive probability vector")
    off = q - np.diag(np.diag(q))
    if np.any(off < 0):
        raise StructureError("off-diagonal rates must be nonnegative")
    flux = pi[:, None] * off
    if np.abs(flux - flux.T).max() > 1e-12 * max(flux.max(), 1.0):
        raise StructureError("rates not reversible w.r.t. π")
    return off, pi


# ─── Lindblad ────────────────────────────────────────────────────────────────

def build_lindblad(V_list, sigma, algebra=None, name="lindblad") -> DifferentialStructure:
    """ℓ = r = id on 𝒜; ω_j read off from σV_jσ⁻¹ = e^{−ω_j}V_j.

    The family {V_j} must be closed under adjoints.
    """
    V_list = [np.asarray(V, dtype=complex) for V in V_list]
    if not V_list:
        raise StructureError("at least one jump operator is required")
    n = V_list[0].shape[0]
    alg = algebra or Algebra.full(n)
    sig = as_density(sigma, alg)
    if sig.is_singular():
        raise StructureError("reference state σ must be invertible")
    S, Si = sig.matrix, sig.power(-1)

    omegas = []
    for V in V_list:
        alg.require(V, "jump operator")
        W = S @ V @ Si
        ratio = alg.inner(V, W).real / alg.inner(V, V).real
        if ratio <= 0:
            raise StructureError("V_j must satisfy Δ_σV = e^{−ω}V")
        omega = -np.log(ratio)
        if np.linalg.norm(W - np.exp(-omega) * V) > config.VALIDATION_TOL * np.linalg.norm(V) * max(1.0, ratio):
            raise StructureError("V_j must satisfy Δ_σV = e^{−ω}V")
        omegas.append(float(omega))

    stars = []
    for j, V in enumerate(V_list):
        match = [k for k, U in enumerate(V_list)
                 if np.linalg.norm(U - V.conj().T) <= 1e-12 * max(np.linalg.norm(V), 1.0)]
        if not match:
            raise StructureError("set of V_j must be closed under adjoints")
        stars.append(j if j in match else match[0])

    ident = identity_hom(alg)
    dirs = [Direction(alg, ident, ident, V, omegas[j], stars[j], f"V{j}") for j, V in enumerate(V_list)]
    return _finish(DifferentialStructure(alg, dirs, sig, name), builder="lindblad")


def random_lindblad(rng, n=3, pairs=None, name="random-lindblad") -> DifferentialStructure:
    """Random GNS-symmetric Lindblad structure on M_n: jump operators are
    eigen-matrix-units of a random σ with random symmetric weights."""
    alg = Algebra.full(n)
    sig = alg.random_density(rng)
    vals, U = np.linalg.eigh(sig.matrix)
    V_list = []
    combos = list(itertools.combinations(range(n), 2))
    if pairs is not None:
        combos = combos[:pairs]
    for k, p in combos:
        c = rng.uniform(0.3, 1.5)
        V = c * U @ _unit(n, k, p) @ U.conj().T
        V_list += [V, V.conj().T]
    d = rng.uniform(0.3, 1.5)
    V_list.append(d * U @ np.diag(rng.standard_normal(n)) @ U.conj().T)
    return build_lindblad(V_list, sig, alg, name)


# ─── Markov chains ───────────────────────────────────────────────────────────

def build_markov_lindblad(q, pi, name="markov-lindblad") -> DifferentialStructure:
    """ℓ^∞_n ⊂ M_n with V_kp = 2^{−1/2}(q_kp q_pk)^{1/4} E_kp, ω_kp = log(π_p/π_k)."""
    off, pi = _check_rates(q, pi)
    n = len(pi)
    diag = Algebra.diagonal(n)
    full = Algebra.full(n)
    emb = embedding_hom(diag, full)
    sig = DensityMatrix(np.diag(n * pi).astype(complex), diag)

    edges = [(k, p) for k in range(n) for p in range(n) if k != p and off[k, p] > 0]
    index = {e: i for i, e in enumerate(edges)}
    dirs = []
    for k, p in edges:
        V = 2 ** -0.5 * (off[k, p] * off[p, k]) ** 0.25 * _unit(n, k, p)
        dirs.append(Direction(full, emb, emb, V, float(np.log(pi[p] / pi[k])), index[(p, k)], f"{k}->{p}"))
    return _finish(DifferentialStructure(diag, dirs, sig, name), builder="markov_lindblad", rates=off, pi=pi)


def build_markov_graph(q, pi, name="markov-graph") -> DifferentialStructure:
    """One direction per edge kp: ℬ_kp = ℂ with τ_kp = π_k q_kp/2,
    ℓ = evaluation at k, r = evaluation at p, V = 1, ω = 0."""
    off, pi = _check_rates(q, pi)
    n = len(pi)
    alg = Algebra.diagonal(n, pi)
    edges = [(k, p) for k in range(n) for p in range(n) if k != p and off[k, p] > 0]
    index = {e: i for i, e in enumerate(edges)}
    dirs = []
    for k, p in edges:
        edge = Algebra.diagonal(1, [pi[k] * off[k, p] / 2.0])
        dirs.append(Direction(edge, evaluation_hom(alg, k, edge), evaluation_hom(alg, p, edge),
                              np.ones((1, 1), dtype=complex), 0.0, index[(p, k)], f"{k}->{p}"))
    return _finish(DifferentialStructure(alg, dirs, alg.identity_state(), name),
                   builder="markov_graph", rates=off, pi=pi)


def build_hypercube(n, name="hypercube") -> DifferentialStructure:
    """Simple random walk on {0,1}^n: ℓ = id, r_j flips bit j, V = 1."""
    if not 1 <= n <= config.CLIFFORD_MAX_N:
        raise StructureError(f"hypercube dimension must lie in 1..{config.CLIFFORD_MAX_N}")
    alg = Algebra.diagonal(2 ** n)
    ident = identity_hom(alg)
    one = alg.unit()
    dirs = [Direction(alg, ident, swap_hom(alg, j, n), one, 0.0, j, f"flip{j}") for j in range(n)]
    return _finish(DifferentialStructure(alg, dirs, alg.identity_state(), name), builder="hypercube", n=n)


# ─── Fermions ────────────────────────────────────────────────────────────────

def build_fermion_ou(n, name="fermion-ou") -> DifferentialStructure:
    """Clifford algebra Cl_n with ∂_jA = Q_jA − Γ(A)Q_j; ℒ = −4𝒩."""
    alg = Algebra.clifford(n)
    gamma = parity_hom(alg)
    ident = identity_hom(alg)
    for Q in alg.generators:
        if np.linalg.norm(gamma(Q) + Q) > config.VALIDATION_TOL:
            raise StructureError("parity map must satisfy Γ(Q_j) = −Q_j")
    dirs = [Direction(alg, gamma, ident, Q, 0.0, j, f"Q{j}") for j, Q in enumerate(alg.generators)]
    return _finish(DifferentialStructure(alg, dirs, alg.identity_state(), name), builder="fermion_ou", n=n)


# ─── Depolarizing ────────────────────────────────────────────────────────────

def build_depolarizing(gamma=1.0, algebra=None, pauli=None, name="depolarizing") -> DifferentialStructure:
    """ℒA = γ(τ[A]1 − A) with σ = 1.

    M_2 uses the Pauli directions √(γ/8)σ_j by default, M_n the matrix
    units √(γ/(2n))E_kp, and a diagonal algebra the complete graph with
    rates q_kp = γπ_p.
    """
    if gamma <= 0:
        raise StructureError("γ must be positive")
    alg = algebra if isinstance(algebra, Algebra) else Algebra.full(int(algebra or 2))

    if alg.kind == "diagonal":
        pi = alg.trace_weights / alg.trace_weights.sum()
        n = len(pi)
        q = gamma * np.tile(pi, (n, 1))
        np.fill_diagonal(q, 0.0)
        ds = build_markov_graph(q, pi, name)
        ds.meta.update(builder="depolarizing", gamma=gamma)
        return ds
    if alg.kind != "full":
        raise StructureError("depolarizing builder supports full and diagonal algebras")

    n = alg.sizes[0]
    ident = identity_hom(alg)
    if pauli is None:
        pauli = n == 2
    if pauli:
        if n != 2:
            raise StructureError("Pauli directions exist only on M_2")
        dirs = [Direction(alg, ident, ident, np.sqrt(gamma / 8.0) * P, 0.0, j, "xyz"[j])
                for j, P in enumerate(PAULI)]
    else:
        c = np.sqrt(gamma / (2.0 * n))
        pairs = [(k, p) for k in range(n) for p in range(n)]
        index = {e: i for i, e in enumerate(pairs)}
        dirs = [Direction(alg, ident, ident, c * _unit(n, k, p), 0.0, index[(p, k)], f"E{k}{p}")
                for k, p in pairs]
    return _finish(DifferentialStructure(alg, dirs, alg.identity_state(), name),
                   builder="depolarizing", gamma=gamma)


BUILDERS = {
    "lindblad":        build_lindblad,
    "markov_lindblad": build_markov_lindblad,
    "markov_graph":    build_markov_graph,
    "hypercube":       build_hypercube,
    "fermion_ou":      build_fermion_ou,
    "depolarizing":    build_depolarizing,
}
