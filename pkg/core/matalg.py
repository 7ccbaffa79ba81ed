"""
core/matalg.py
──────────────
Finite-dimensional *-algebras realized inside a full matrix algebra, their
tracial functionals, density matrices, superoperators over a Hermitian
orthonormal basis, the s-family of inner products (GNS s=0, KMS s=½, BKM),
the relative modular operator, the BKM map and the KMS Moreau decomposition.
"""

import functools
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from shared import config
from shared.errors import (
    MembershipError, NonUnitalMapError, QmsError, SingularStateError,
)
from core.opcalc import (
    LOG, OperatorSum2, _random_unitary, delta_f, doubsum, hermitize, logarithmic,
    spectral,
)

logger = logging.getLogger("MatAlg")


# ─── Algebras ────────────────────────────────────────────────────────────────

def _jordan_wigner(n):
    """Q_1..Q_n with Q_iQ_j + Q_jQ_i = 2δ_ij, as Z⊗…⊗Z⊗X⊗1⊗…⊗1."""
    X = np.array([[0, 1], [1, 0]], dtype=complex)
    Z = np.array([[1, 0], [0, -1]], dtype=complex)
    I = np.eye(2, dtype=complex)
    out = []
    for j in range(n):
        ops = [Z] * j + [X] + [I] * (n - j - 1)
        M = ops[0]
        for op in ops[1:]:
            M = np.kron(M, op)
        out.append(M)
    return out


def _matrix_unit_basis(offset, size, d, w):
    """Hermitian τ-orthonormal basis of one full block, weight w per diagonal entry."""
    out = []
    for k in range(size):
        E = np.zeros((d, d), dtype=complex)
        E[offset + k, offset + k] = 1.0 / np.sqrt(w)
        out.append(E)
    for k in range(size):
        for p in range(k + 1, size):
            E = np.zeros((d, d), dtype=complex)
            E[offset + k, offset + p] = E[offset + p, offset + k] = 1.0 / np.sqrt(2 * w)
            out.append(E)
            F = np.zeros((d, d), dtype=complex)
            F[offset + k, offset + p] = 1j / np.sqrt(2 * w)
            F[offset + p, offset + k] = -1j / np.sqrt(2 * w)
            out.append(F)
    return out


@dataclass(frozen=True, eq=False)
class Algebra:
    """A *-subalgebra of M_d with τ[A] = Σ_i w_i A_ii.

    kinds: full(n), block(sizes), diagonal(n), clifford(n). ``basis`` is a
    stack of Hermitian elements orthonormal for ⟨A,B⟩ = τ[A*B].
    """

    kind:          str
    sizes:         tuple
    trace_weights: np.ndarray
    basis:         np.ndarray
    generators:    tuple = ()

    # ── constructors ──

    @classmethod
    def full(cls, n, weight=None):
        w = 1.0 / n if weight is None else float(weight)
        basis = np.array(_matrix_unit_basis(0, n, n, w))
        return cls("full", (n,), np.full(n, w), basis)

    @classmethod
    def block(cls, sizes, block_weights=None):
        sizes = tuple(int(s) for s in sizes)
        d = sum(sizes)
        if block_weights is None:
            block_weights = [1.0 / d] * len(sizes)
        weights, basis, offset = [], [], 0
        for size, w in zip(sizes, block_weights):
            if w <= 0:
                raise QmsError("trace weights must be positive")
            weights += [float(w)] * size
            basis += _matrix_unit_basis(offset, size, d, float(w))
            offset += size
        return cls("block", sizes, np.array(weights), np.array(basis))

    @classmethod
    def diagonal(cls, n, weights=None):
        w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
        if w.shape != (n,) or np.any(w <= 0):
            raise QmsError("trace weights must be a positive vector of length n")
        basis = np.zeros((n, n, n), dtype=complex)
        for k in range(n):
            basis[k, k, k] = 1.0 / np.sqrt(w[k])
        return cls("diagonal", (n,), w, basis)

    @classmethod
    def clifford(cls, n):
        if not 1 <= n <= config.CLIFFORD_MAX_N:
            raise QmsError(f"clifford(n) supports 1 ≤ n ≤ {config.CLIFFORD_MAX_N}")
        Q = _jordan_wigner(n)
        d = 2 ** n
        basis = []
        for mask in range(2 ** n):
            S = [j for j in range(n) if mask >> j & 1]
            M = np.eye(d, dtype=complex)
            for j in S:
                M = M @ Q[j]
            k = len(S)
            basis.append((1j ** (k * (k - 1) // 2)) * M)
        return cls("clifford", (n,), np.full(d, 1.0 / d), np.array(basis), tuple(Q))

    # ── basic data ──

    @property
    def ambient_dim(self):
        return self.basis.shape[1]

    @property
    def dim(self):
        return self.basis.shape[0]

    @functools.cached_property
    def _weighted_basis(self):
        return self.basis * self.trace_weights[None, :, None]

    def unit(self):
        return np.eye(self.ambient_dim, dtype=complex)

    def tau(self, A):
        return complex(np.dot(self.trace_weights, np.diagonal(np.asarray(A))))

    def inner(self, A, B):
        """⟨A,B⟩ = τ[A*B]."""
        return complex(np.sum(self.trace_weights[None, :] * (np.asarray(A).conj() * np.asarray(B))))

    def norm(self, A):
        return float(np.sqrt(max(self.inner(A, A).real, 0.0)))

    def coords(self, A):
        """c_a = τ[e_a A]; real for Hermitian A."""
        return np.einsum("aij,ji->a", self._weighted_basis, np.asarray(A, dtype=complex))

    def coords_real(self, A):
        return self.coords(A).real

    def from_coords(self, c):
        return np.einsum("a,aij->ij", np.asarray(c), self.basis)

    def project(self, A):
        """τ-preserving conditional expectation onto the algebra."""
        return self.from_coords(self.coords(A))

    def contains(self, A, tol=None):
        tol = config.MEMBERSHIP_TOL if tol is None else tol
        A = np.asarray(A, dtype=complex)
        return np.linalg.norm(A - self.project(A)) <= tol * max(np.linalg.norm(A), 1.0)

    def require(self, A, what="matrix"):
        if not self.contains(A):
            raise MembershipError(f"{what} is not in the {self.kind} algebra")
        return np.asarray(A, dtype=complex)

    def gram(self):
        """Gram matrix of the basis under τ[A*B]; the identity up to round-off."""
        return np.einsum("aji,bji,i->ab", self.basis.conj(), self.basis, self.trace_weights)

    # ── sampling ──

    def random_hermitian(self, rng, scale=1.0):
        return self.from_coords(scale * rng.standard_normal(self.dim))

    def random_density(self, rng, boundary=False) -> "DensityMatrix":
        """Dirichlet(1,…,1) spectrum with Haar unitary per block.

        With ``boundary`` the smallest spectral cluster is pushed to
        BOUNDARY_EIG (relative) before renormalizing.
        """
        d = self.ambient_dim
        if self.kind == "clifford":
            H = self.random_hermitian(rng, scale=rng.uniform(0.2, 2.0))
            S = spectral(H)
            rho = S.apply(np.exp)
        else:
            p = rng.dirichlet(np.ones(d))
            lam = p / self.trace_weights
            rho = np.diag(lam).astype(complex)
            if self.kind != "diagonal":
                U = np.zeros((d, d), dtype=complex)
                offset = 0
                blocks = self.sizes
                for size in blocks:
                    U[offset:offset + size, offset:offset + size] = _random_unitary(rng, size)
                    offset += size
                rho = U @ rho @ U.conj().T
        if boundary:
            S = spectral(rho)
            vals = S.eigenvalues.copy()
            vals[0] = config.BOUNDARY_EIG * vals.max()
            rho = (S.vectors * vals[S.labels]) @ S.vectors.conj().T
        rho = 0.5 * (rho + rho.conj().T)
        return DensityMatrix(rho / self.tau(rho).real, self)

    def state(self, matrix) -> "DensityMatrix":
        return DensityMatrix.from_matrix(matrix, self)

    def identity_state(self) -> "DensityMatrix":
        return DensityMatrix(self.unit() / self.tau(self.unit()).real, self)

    def describe(self):
        return {"kind": self.kind, "sizes": list(self.sizes), "ambient_dim": self.ambient_dim,
                "dim": self.dim}


# ─── Density matrices ────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class DensityMatrix:
    """ρ ∈ 𝒜 with ρ ≥ 0 and τ[ρ] = 1."""

    matrix:  np.ndarray
    algebra: Algebra

    @classmethod
    def from_matrix(cls, matrix, algebra, tol=1e-9):
        M = hermitize(matrix, "density matrix must be Hermitian")
        algebra.require(M, "density matrix")
        ev = np.linalg.eigvalsh(M)
        if ev.min() < -tol * max(ev.max(), 1.0):
            raise QmsError(f"density matrix is not positive semidefinite (min eig {ev.min():.3e})")
        t = algebra.tau(M).real
        if abs(t - 1.0) > 1e-8:
            raise QmsError(f"density matrix must satisfy τ[ρ] = 1 (got {t:.12g})")
        return cls(M, algebra)

    @functools.cached_property
    def spectrum(self):
        return spectral(self.matrix)

    @property
    def min_eig(self):
        return float(self.spectrum.values.min())

    @property
    def max_eig(self):
        return float(self.spectrum.values.max())

    def is_singular(self):
        return self.min_eig < config.SIGMA_MIN_EIG * max(self.max_eig, 1.0)

    def power(self, p, message="singular reference state"):
        if p == 0:
            return np.eye(self.matrix.shape[0], dtype=complex)
        if p == 1:
            return self.matrix
        if self.is_singular():
            raise SingularStateError(message)
        return self.spectrum.apply(lambda x: x ** p)

    def log(self, message="singular reference state"):
        if self.is_singular():
            raise SingularStateError(message)
        return self.spectrum.apply(np.log)

    def regularized(self, eps, reference: Optional["DensityMatrix"] = None) -> "DensityMatrix":
        ref = self.algebra.identity_state() if reference is None else reference
        return DensityMatrix((1.0 - eps) * self.matrix + eps * ref.matrix, self.algebra)


def as_density(rho, algebra=None) -> DensityMatrix:
    if isinstance(rho, DensityMatrix):
        return rho
    return DensityMatrix.from_matrix(rho, algebra)


# ─── Superoperators ──────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class Superoperator:
    """Linear map on 𝒜 as a matrix K_ab = τ[e_a K(e_b)] over the Hermitian basis."""

    algebra: Algebra
    matrix:  np.ndarray
    kind:    str = "generic"
    meta:    dict = field(default_factory=dict)

    @classmethod
    def from_callable(cls, algebra, fn, kind="generic", **meta):
        cols = [algebra.coords(fn(e)) for e in algebra.basis]
        M = np.array(cols).T
        if np.allclose(M.imag, 0.0, atol=1e-13 * max(np.abs(M).max(), 1.0)):
            M = M.real
        return cls(algebra, M, kind, dict(meta))

    @classmethod
    def identity(cls, algebra):
        return cls(algebra, np.eye(algebra.dim), "identity")

    def apply(self, A):
        return self.algebra.from_coords(self.matrix @ self.algebra.coords(A))

    def __call__(self, A):
        return self.apply(A)

    def adjoint(self) -> "Superoperator":
        """Adjoint in L²(τ)."""
        return Superoperator(self.algebra, self.matrix.conj().T, self.kind + "†", dict(self.meta))

    def compose(self, other: "Superoperator") -> "Superoperator":
        return Superoperator(self.algebra, self.matrix @ other.matrix)

    def __add__(self, other):
        return Superoperator(self.algebra, self.matrix + other.matrix)

    def __sub__(self, other):
        return Superoperator(self.algebra, self.matrix - other.matrix)

    def scaled(self, c):
        return Superoperator(self.algebra, c * self.matrix, self.kind, dict(self.meta))

    @property
    def is_real(self):
        return np.isrealobj(self.matrix) or np.allclose(self.matrix.imag, 0.0)


# ─── Inner products ──────────────────────────────────────────────────────────

def s_inner(sigma: DensityMatrix, s, A, B):
    """⟨A,B⟩_s = τ[A* σ^s B σ^{1−s}]."""
    if not 0.0 <= s <= 1.0:
        raise QmsError("s must lie in [0,1]")
    A = np.asarray(A, dtype=complex)
    M = sigma.power(s) @ np.asarray(B, dtype=complex) @ sigma.power(1.0 - s)
    return sigma.algebra.tau(A.conj().T @ M)


def bkm_map(sigma: DensityMatrix, A):
    """𝓜A = ∫₀¹ σ^{1−s}Aσ^s ds = Λ(σ,σ)#A."""
    if sigma.is_singular():
        raise SingularStateError("singular reference state")
    S = sigma.spectrum
    return doubsum(logarithmic(), S, S).contract(A)


def bkm_inverse(sigma: DensityMatrix, A):
    """𝓜⁻¹A = δlog(σ,σ)#A."""
    if sigma.is_singular():
        raise SingularStateError("singular reference state")
    S = sigma.spectrum
    return delta_f(LOG, S, S).contract(A)


def bkm_inner(sigma: DensityMatrix, A, B):
    return sigma.algebra.tau(np.asarray(A).conj().T @ bkm_map(sigma, B))


def relative_modular(sigma: DensityMatrix, rho: DensityMatrix, A):
    """Δ_{σ,ρ}(A) = σAρ⁻¹."""
    return sigma.matrix @ np.asarray(A, dtype=complex) @ rho.power(-1, "singular state in modular operator")


def gram_operator(sigma: DensityMatrix, kind) -> np.ndarray:
    """Matrix G with ⟨A,B⟩_kind = c(A)^H G c(B) in basis coordinates."""
    alg = sigma.algebra
    if kind == "bkm":
        return Superoperator.from_callable(alg, lambda X: bkm_map(sigma, X)).matrix
    s = {"gns": 0.0, "kms": 0.5}.get(kind, kind)
    s = float(s)
    left, right = sigma.power(s), sigma.power(1.0 - s)
    return Superoperator.from_callable(alg, lambda X: left @ X @ right).matrix


def symmetry_residual(K: Superoperator, sigma: DensityMatrix, kind) -> float:
    """Relative self-adjointness residual of K in the ``kind`` inner product
    (a float s ∈ [0,1], or "gns", "kms", "bkm")."""
    G = gram_operator(sigma, kind)
    GK = G @ K.matrix
    num = np.linalg.norm(GK - K.matrix.conj().T @ G)
    return float(num / max(np.linalg.norm(GK), np.finfo(float).tiny))


def modular_superoperator(sigma: DensityMatrix) -> Superoperator:
    """Δ_σ(A) = σAσ⁻¹."""
    inv = sigma.power(-1)
    return Superoperator.from_callable(sigma.algebra, lambda X: sigma.matrix @ X @ inv, "modular")


def gns_symmetric_commutes_check(K: Superoperator, sigma: DensityMatrix, s_values=(0.0, 0.25, 0.75, 1.0)):
    """For a GNS-symmetric real map: s-symmetry residuals and ‖[K, Δ_σ]‖."""
    D = modular_superoperator(sigma)
    comm = np.linalg.norm(K.matrix @ D.matrix - D.matrix @ K.matrix) / max(np.linalg.norm(K.matrix), 1e-300)
    return {
        "s_residuals":       {f"{s:g}": symmetry_residual(K, sigma, s) for s in s_values},
        "modular_commutator": float(comm),
    }


def kms_cone_duality_probe(sigma: DensityMatrix, s, samples, rng):
    """min Re⟨X,A⟩_s over sampled PSD pairs (≥ 0 at s=½)."""
    alg = sigma.algebra
    worst = np.inf
    for _ in range(int(samples)):
        X = alg.random_density(rng).matrix
        A = alg.random_density(rng, boundary=True).matrix
        worst = min(worst, s_inner(sigma, s, X, A).real)
    return float(worst)


# ─── KMS Moreau decomposition ────────────────────────────────────────────────

def moreau_kms(sigma: DensityMatrix, X):
    """X = X₊ − X₋ with X₊ the KMS-closest PSD element.

    X₊ = σ^{−1/4}(σ^{1/4}Xσ^{1/4})₊σ^{−1/4}.
    """
    X = hermitize(X, "Moreau requires self-adjoint input")
    q = sigma.power(0.25)
    qi = sigma.power(-0.25)
    S = spectral(q @ X @ q)
    Yp = S.apply(lambda x: np.maximum(x, 0.0))
    Ym = S.apply(lambda x: np.maximum(-x, 0.0))
    return qi @ Yp @ qi, qi @ Ym @ qi


def kms_inner(sigma: DensityMatrix, A, B):
    return s_inner(sigma, 0.5, A, B)


# ─── BKM tilde construction ──────────────────────────────────────────────────

def kms_tilde_map(sigma: DensityMatrix, P: Superoperator) -> Superoperator:
    """P̃(A) = 𝓜⁻¹(σ^{1/2} P(A) σ^{1/2})."""
    alg = sigma.algebra
    one = alg.unit()
    if np.linalg.norm(P.apply(one) - one) > config.VALIDATION_TOL * np.linalg.norm(one):
        raise NonUnitalMapError("non-unital input map")
    h = sigma.power(0.5)
    return Superoperator.from_callable(alg, lambda X: bkm_inverse(sigma, h @ P.apply(X) @ h), "kms_tilde")


def kms_tilde_witness(sigma: DensityMatrix, rng, eps=0.1):
    """A unital KMS-symmetric map P = τ[σ·]1 + εY⟨Y,·⟩_KMS not commuting with Δ_σ.

    Returns (P, P̃). Y is Hermitian, τ[σY] = 0 and [Y,σ] ≠ 0.
    """
    alg = sigma.algebra
    for _ in range(50):
        Y = alg.random_hermitian(rng)
        Y = Y - alg.tau(sigma.matrix @ Y).real * alg.unit()
        if np.linalg.norm(Y @ sigma.matrix - sigma.matrix @ Y) > 1e-3 * np.linalg.norm(Y):
            break
    else:
        raise QmsError("σ commutes with the whole algebra; no KMS/GNS separation exists")
    c = eps / kms_inner(sigma, Y, Y).real
    one = alg.unit()

    def P_fn(A):
        return alg.tau(sigma.matrix @ A) * one + c * Y * kms_inner(sigma, Y, A)

    P = Superoperator.from_callable(alg, P_fn, "kms_witness")
    return P, kms_tilde_map(sigma, P)


# ─── Choi matrices ───────────────────────────────────────────────────────────

def choi_matrix(K: Superoperator):
    """Choi matrix Σ_ij E_ij ⊗ (K∘E_𝒜)(E_ij) on the ambient algebra."""
    alg = K.algebra
    d = alg.ambient_dim
    C = np.zeros((d * d, d * d), dtype=complex)
    for i in range(d):
        for j in range(d):
            Eij = np.zeros((d, d), dtype=complex)
            Eij[i, j] = 1.0
            C += np.kron(Eij, K.apply(alg.project(Eij)))
    return C


def is_completely_positive(K: Superoperator, tol=1e-9):
    C = choi_matrix(K)
    C = 0.5 * (C + C.conj().T)
    return bool(np.linalg.eigvalsh(C).min() >= -tol * max(np.abs(C).max(), 1.0))


def bkm_positivity_witness(sigma: DensityMatrix, rng, trials=200):
    """𝓜⁻¹ is completely positive; 𝓜 in general is not even positive.

    Reports the smallest Choi eigenvalue of 𝓜⁻¹ and searches rank-one
    projectors X ∈ 𝒜 for 𝓜X with a negative eigenvalue. The first candidates
    are (u_i + u_j)/√2 over σ-eigenvectors, then top eigenprojectors of random
    Hermitian elements. ``witness`` is None when σ is central in 𝒜.
    """
    alg = sigma.algebra
    inverse = Superoperator.from_callable(alg, lambda A: bkm_inverse(sigma, A), "bkm_inverse")
    C = choi_matrix(inverse)
    choi_min = float(np.linalg.eigvalsh(0.5 * (C + C.conj().T)).min())

    def candidates():
        _, U = np.linalg.eigh(sigma.matrix)
        d = U.shape[1]
        for i in range(d):
            for j in range(i + 1, d):
                v = (U[:, i] + U[:, j]) / np.sqrt(2.0)
                yield np.outer(v, v.conj())
        for _ in range(int(trials)):
            _, V = np.linalg.eigh(alg.random_hermitian(rng))
            yield np.outer(V[:, -1], V[:, -1].conj())

    worst, witness = np.inf, None
    for X in candidates():
        if not alg.contains(X):
            continue
        low = float(np.linalg.eigvalsh(hermitize(bkm_map(sigma, X))).min())
        if low < worst:
            worst, witness = low, X
    tol = config.VALIDATION_TOL * max(sigma.max_eig, 1.0)
    if worst >= -tol:
        witness = None
    logger.debug("BKM positivity: Choi(𝓜⁻¹) min %.3e, min eig 𝓜X %.3e", choi_min, worst)
    return {"inverse_cp": is_completely_positive(inverse), "inverse_choi_min": choi_min,
            "map_min_eig": worst, "witness": witness}
