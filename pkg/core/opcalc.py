"""
core/opcalc.py
──────────────
Matrix functional calculus: clustered spectral decompositions, double
operator sums θ(A,B) and the contraction #, discrete derivatives, the
tree-indexed second divided differences, mean functions and quasi-entropies
with their convexity / contractivity probes.

Double operator sums are never materialized as n²×n² matrices. Contraction
goes through the eigenbases: θ(A,B)#C = U [Θ ∘ (U* C W)] W*.
"""

import functools
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from shared import config
from shared.errors import (
    ChannelError, MeanDomainError, NotHermitianError, TreeShapeError,
)

logger = logging.getLogger("OpCalc")


# ─── Hermitian input guard ───────────────────────────────────────────────────

def hermitize(A, message="non-Hermitian input"):
    """Symmetrize A if its asymmetry is round-off, reject it otherwise."""
    A = np.asarray(A, dtype=complex)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise NotHermitianError(f"{message}: expected a square matrix, got shape {A.shape}")
    scale = max(np.linalg.norm(A), np.finfo(float).tiny)
    asym = np.linalg.norm(A - A.conj().T)
    if asym > config.HERMITIAN_TOL * scale:
        raise NotHermitianError(f"{message} (asymmetry {asym:.3e})")
    return 0.5 * (A + A.conj().T)


# ─── Spectral decomposition ──────────────────────────────────────────────────

@dataclass(frozen=True)
class SpectralDecomposition:
    """Clustered eigendecomposition A = Σ λ_i E_i.

    ``vectors`` holds an orthonormal eigenbasis (columns), ``labels`` the
    cluster index of each column. Cluster values are the means of their
    members, so confluent limits downstream compare representatives exactly.
    """

    eigenvalues: np.ndarray
    vectors:     np.ndarray
    labels:      np.ndarray

    @property
    def size(self):
        return self.vectors.shape[0]

    @property
    def cluster_count(self):
        return len(self.eigenvalues)

    @property
    def values(self):
        """Clustered eigenvalue of each eigenvector column."""
        return self.eigenvalues[self.labels]

    @property
    def projectors(self) -> List[np.ndarray]:
        out = []
        for i in range(self.cluster_count):
            cols = self.vectors[:, self.labels == i]
            out.append(cols @ cols.conj().T)
        return out

    def apply(self, f):
        """f(A) for a vectorized scalar function f."""
        fv = np.asarray(f(self.values), dtype=complex)
        return (self.vectors * fv) @ self.vectors.conj().T

    def reconstruct(self):
        return self.apply(lambda x: x)


def spectral(A, tol=None) -> SpectralDecomposition:
    """Clustered spectral decomposition of a Hermitian matrix.

    Eigenvalues closer than ``tol``·‖A‖ to the first member of the current
    cluster are merged.
    """
    tol = config.EIG_CLUSTER_TOL if tol is None else tol
    A = hermitize(A)
    w, U = np.linalg.eigh(A)
    scale = np.max(np.abs(w)) if w.size else 0.0
    labels = np.zeros(len(w), dtype=int)
    starts = [0]
    for k in range(1, len(w)):
        if w[k] - w[starts[-1]] > tol * scale:
            starts.append(k)
        labels[k] = len(starts) - 1
    values = np.array([w[labels == i].mean() for i in range(len(starts))])
    return SpectralDecomposition(eigenvalues=values, vectors=U, labels=labels)


# ─── Scalar functions and discrete derivatives ───────────────────────────────

@dataclass(frozen=True)
class ScalarFunction:
    """A differentiable scalar function with optional stable divided difference."""

    name:       str
    value:      Callable
    derivative: Callable
    second:     Optional[Callable] = None
    divided:    Optional[Callable] = None   # stable (f(x)-f(y))/(x-y) off the diagonal


def _log_divided(x, y):
    return 1.0 / logarithmic().value(x, y)


IDENTITY = ScalarFunction("id", lambda x: x, lambda x: np.ones_like(x), lambda x: np.zeros_like(x))
SQUARE   = ScalarFunction("square", lambda x: x ** 2, lambda x: 2 * x, lambda x: 2 * np.ones_like(x))
EXP      = ScalarFunction("exp", np.exp, np.exp, np.exp)
LOG      = ScalarFunction("log", np.log, lambda x: 1.0 / x, lambda x: -1.0 / x ** 2, _log_divided)
XLOGX    = ScalarFunction(
    "xlogx",
    lambda x: np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0)), 0.0),
    lambda x: np.log(x) + 1.0,
    lambda x: 1.0 / x,
)


def _confluent(x, y):
    scale = np.maximum(np.maximum(np.abs(x), np.abs(y)), 1.0)
    return np.abs(x - y) <= config.EIG_CLUSTER_TOL * scale


def discrete_derivative(f: ScalarFunction, lam, mu):
    """δf(λ,μ) = (f(λ)−f(μ))/(λ−μ), and f'(λ) when the arguments are clustered."""
    lam = np.asarray(lam, dtype=float)
    mu = np.asarray(mu, dtype=float)
    lam, mu = np.broadcast_arrays(lam, mu)
    same = _confluent(lam, mu)
    out = np.empty(lam.shape)
    if np.any(same):
        out[same] = f.derivative(lam[same])
    diff = ~same
    if np.any(diff):
        if f.divided is not None:
            out[diff] = f.divided(lam[diff], mu[diff])
        else:
            out[diff] = (f.value(lam[diff]) - f.value(mu[diff])) / (lam[diff] - mu[diff])
    return out if out.ndim else float(out)


# ─── Mean functions ──────────────────────────────────────────────────────────

@functools.lru_cache(maxsize=8)
def _gauss_legendre(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _is(m, target):
    return abs(m - target) < 1e-12


def _h_closed(m, x):
    """h(x) = θ_m(x,1) and its first two derivatives, closed form (x away from 1)."""
    if _is(m, 1.0):
        L = np.log(x)
        h = (x - 1.0) / L
        h1 = (L - 1.0 + 1.0 / x) / L ** 2
        h2 = ((1.0 / x - 1.0 / x ** 2) * L - 2.0 * (L - 1.0 + 1.0 / x) / x) / L ** 3
        return h, h1, h2
    if _is(m, 0.0):
        L = np.log(x)
        d = x - 1.0
        h = x * L / d
        h1 = (d - L) / d ** 2
        h2 = ((1.0 - 1.0 / x) * d - 2.0 * (d - L)) / d ** 3
        return h, h1, h2
    c = (m - 1.0) / m
    N = x ** m - 1.0
    D = x ** (m - 1.0) - 1.0
    N1 = m * x ** (m - 1.0)
    D1 = (m - 1.0) * x ** (m - 2.0)
    N2 = m * (m - 1.0) * x ** (m - 2.0)
    D2 = (m - 1.0) * (m - 2.0) * x ** (m - 3.0)
    h = c * N / D
    h1 = c * (N1 * D - N * D1) / D ** 2
    h2 = c * ((N2 * D - N * D2) * D - 2.0 * D1 * (N1 * D - N * D1)) / D ** 3
    return h, h1, h2


def _h_quadrature(m, x):
    """h, h', h'' from θ_m(x,1) = ∫₀¹((1−α)x^{m−1} + α)^{1/(m−1)} dα."""
    a, w = _gauss_legendre(config.QUADRATURE_NODES)
    x = x[..., None]
    if _is(m, 1.0):
        xa = x ** (-a)
        h = x * xa
        h1 = (1.0 - a) * xa
        h2 = -(1.0 - a) * a * xa / x
    else:
        p = 1.0 / (m - 1.0)
        g = (1.0 - a) * x ** (m - 1.0) + a
        h = g ** p
        h1 = (1.0 - a) * g ** (p - 1.0) * x ** (m - 2.0)
        h2 = (1.0 - a) * a * (m - 2.0) * x ** (m - 3.0) * g ** (p - 2.0)
    return h @ w, h1 @ w, h2 @ w


def _h_power(m, x):
    x = np.asarray(x, dtype=float)
    h = np.empty(x.shape)
    h1 = np.empty(x.shape)
    h2 = np.empty(x.shape)
    t = np.abs(np.log(x))
    near = t < 0.5
    if np.any(near):
        h[near], h1[near], h2[near] = _h_quadrature(m, x[near])
    far = ~near
    if np.any(far):
        h[far], h1[far], h2[far] = _h_closed(m, x[far])
    if _is(m, 1.0):
        # series of (e^t − 1)/t for the value only
        tiny = t < config.LOG_MEAN_SERIES
        if np.any(tiny):
            s = np.log(x[tiny])
            h[tiny] = 1.0 + s / 2.0 + s ** 2 / 6.0 + s ** 3 / 24.0 + s ** 4 / 120.0
    return h, h1, h2


_PARTIALS = ("1", "2", "11", "22", "12")


@dataclass(frozen=True)
class MeanFunction:
    """A two-variable mean θ(r,s) with the partial derivatives its confluent
    limits need.

    tags: ``power`` (θ_{m,β}, m=1 is the tilted logarithmic mean),
    ``reciprocal`` (1/θ of ``base``) and ``custom`` (user callables).
    """

    tag:      str
    m:        float = 1.0
    beta:     float = 0.0
    base:     Optional["MeanFunction"] = None
    fn:       Optional[Callable] = None
    partials: Dict[str, Callable] = field(default_factory=dict)
    convex:   bool = False
    label:    str = ""

    # ── evaluation ──

    def _check_domain(self, r, s):
        if self.tag == "custom":
            return
        if np.any(~np.isfinite(r)) or np.any(~np.isfinite(s)) or np.any(r <= 0) or np.any(s <= 0):
            raise MeanDomainError("mean undefined on spectrum")

    def _tilt(self):
        return np.exp(-self.beta / 2.0), np.exp(self.beta / 2.0)

    def value(self, r, s):
        r, s = np.broadcast_arrays(np.asarray(r, dtype=float), np.asarray(s, dtype=float))
        self._check_domain(r, s)
        if self.tag == "power":
            a, b = self._tilt()
            rr, ss = a * r, b * s
            h, _, _ = _h_power(self.m, rr / ss)
            return ss * h
        if self.tag == "reciprocal":
            return 1.0 / self.base.value(r, s)
        out = np.asarray(self.fn(r, s), dtype=float)
        if np.any(~np.isfinite(out)):
            raise MeanDomainError("mean undefined on spectrum")
        return np.broadcast_to(out, r.shape).astype(float)

    def partial(self, r, s, which):
        """Partial derivative ∂₁, ∂₂, ∂₁², ∂₂² or ∂₁∂₂ (``which`` in 1,2,11,22,12)."""
        if which not in _PARTIALS:
            raise ValueError(f"unknown partial {which!r}")
        r, s = np.broadcast_arrays(np.asarray(r, dtype=float), np.asarray(s, dtype=float))
        self._check_domain(r, s)
        if self.tag == "power":
            a, b = self._tilt()
            rr, ss = a * r, b * s
            x = rr / ss
            h, h1, h2 = _h_power(self.m, x)
            if which == "1":
                return a * h1
            if which == "2":
                return b * (h - x * h1)
            if which == "11":
                return a * a * h2 / ss
            if which == "22":
                return b * b * x * x * h2 / ss
            return -a * b * x * h2 / ss
        if self.tag == "reciprocal":
            t = self.base.value(r, s)
            if which in ("1", "2"):
                return -self.base.partial(r, s, which) / t ** 2
            i, j = which[0], which[1]
            ti = self.base.partial(r, s, i)
            tj = self.base.partial(r, s, j)
            return 2.0 * ti * tj / t ** 3 - self.base.partial(r, s, which) / t ** 2
        if which not in self.partials:
            raise MeanDomainError(
                f"custom mean '{self.label}' has no ∂{which} for a confluent spectrum"
            )
        return np.broadcast_to(np.asarray(self.partials[which](r, s), dtype=float), r.shape)

    # ── properties ──

    @property
    def symmetric(self):
        return self.tag == "power" and self.beta == 0.0

    def reciprocal(self) -> "MeanFunction":
        return MeanFunction(tag="reciprocal", base=self, label=f"1/{self.label}")

    def __call__(self, r, s):
        return self.value(r, s)


def logarithmic() -> MeanFunction:
    return MeanFunction(tag="power", m=1.0, convex=True, label="logarithmic")


def tilted_log(beta) -> MeanFunction:
    """θ_{1,β}(r,s) = Λ(e^{−β/2}r, e^{β/2}s)."""
    return MeanFunction(tag="power", m=1.0, beta=float(beta), convex=True, label=f"tilted_log({beta:g})")


def power_mean(m, beta=0.0) -> MeanFunction:
    """Power difference mean θ_{m,β}; harmonic at m=−1, arithmetic at m=2."""
    m = float(m)
    return MeanFunction(
        tag="power", m=m, beta=float(beta),
        convex=-1.0 <= m <= 2.0,
        label=f"power({m:g},{beta:g})",
    )


def arithmetic() -> MeanFunction:
    return power_mean(2.0)


def custom_mean(fn, partials=None, convex=False, label="custom") -> MeanFunction:
    return MeanFunction(tag="custom", fn=fn, partials=dict(partials or {}), convex=convex, label=label)


def constant_mean(c=1.0) -> MeanFunction:
    zero = lambda r, s: np.zeros(np.broadcast(r, s).shape)
    return custom_mean(
        lambda r, s: np.full(np.broadcast(r, s).shape, float(c)),
        {k: zero for k in _PARTIALS}, convex=True, label=f"const({c:g})",
    )


def product_mean() -> MeanFunction:
    """θ(r,s) = rs; a test function for tree differences, not a mean."""
    one = lambda r, s: np.ones(np.broadcast(r, s).shape)
    zero = lambda r, s: np.zeros(np.broadcast(r, s).shape)
    return custom_mean(
        lambda r, s: r * s,
        {"1": lambda r, s: s * one(r, s), "2": lambda r, s: r * one(r, s),
         "11": zero, "22": zero, "12": one},
        label="product",
    )


def flow_mean(phi, phi_prime, f_prime, f_second, label="flow") -> MeanFunction:
    """θ(r,s) = (φ(r)−φ(s))/(f'(r)−f'(s)), with φ'/f'' on the diagonal."""
    def fn(r, s):
        same = _confluent(r, s)
        out = np.empty(np.broadcast(r, s).shape)
        rr, ss = np.broadcast_arrays(r, s)
        if np.any(same):
            out[same] = phi_prime(rr[same]) / f_second(rr[same])
        d = ~same
        if np.any(d):
            out[d] = (phi(rr[d]) - phi(ss[d])) / (f_prime(rr[d]) - f_prime(ss[d]))
        return out
    return custom_mean(fn, label=label)


def mean_eval(theta, r, s):
    """Evaluate a mean (object or tag name) at scalar or array arguments."""
    if isinstance(theta, str):
        theta = {"logarithmic": logarithmic(), "arithmetic": arithmetic(),
                 "harmonic": power_mean(-1.0), "geometric": power_mean(0.5)}[theta]
    out = theta.value(r, s)
    return float(out) if np.ndim(out) == 0 else out


# ─── Double operator sums ────────────────────────────────────────────────────

@dataclass(frozen=True)
class OperatorSum2:
    """θ(A,B) = Σ c_ik A_i ⊗ B_k over the clustered spectra of A and B."""

    left:   SpectralDecomposition
    right:  SpectralDecomposition
    coeffs: np.ndarray

    def multiplier(self):
        """Coefficients expanded to eigenvector pairs."""
        return self.coeffs[np.ix_(self.left.labels, self.right.labels)]

    def contract(self, C):
        """θ(A,B)#C = Σ c_ik A_i C B_k."""
        U, W = self.left.vectors, self.right.vectors
        Ct = U.conj().T @ np.asarray(C, dtype=complex) @ W
        return U @ (self.multiplier() * Ct) @ W.conj().T

    def contract_stack(self, Cs):
        """Contraction of a stack of matrices (k, n, m)."""
        U, W = self.left.vectors, self.right.vectors
        Ct = np.einsum("ia,kij,jb->kab", U.conj(), np.asarray(Cs, dtype=complex), W)
        Ct *= self.multiplier()[None]
        return np.einsum("ia,kab,jb->kij", U, Ct, W.conj())

    def compose(self, other: "OperatorSum2") -> "OperatorSum2":
        """Pointwise product of coefficient tables on the same spectra."""
        return OperatorSum2(self.left, self.right, self.coeffs * other.coeffs)


def _as_spectral(A):
    return A if isinstance(A, SpectralDecomposition) else spectral(A)


def doubsum(theta, A, B) -> OperatorSum2:
    """θ(A,B) for a MeanFunction (or any vectorized θ(r,s))."""
    SA, SB = _as_spectral(A), _as_spectral(B)
    r, s = np.meshgrid(SA.eigenvalues, SB.eigenvalues, indexing="ij")
    value = theta.value if isinstance(theta, MeanFunction) else theta
    c = np.asarray(value(r, s), dtype=float)
    if np.any(~np.isfinite(c)):
        raise MeanDomainError("mean undefined on spectrum")
    return OperatorSum2(SA, SB, c)


def delta_f(f: ScalarFunction, A, B) -> OperatorSum2:
    """δf(A,B) with coefficients δf(λ_i, μ_k)."""
    SA, SB = _as_spectral(A), _as_spectral(B)
    r, s = np.meshgrid(SA.eigenvalues, SB.eigenvalues, indexing="ij")
    return OperatorSum2(SA, SB, np.asarray(discrete_derivative(f, r, s), dtype=float))


def chain_partial(f: ScalarFunction, ell_A, r_A, partial_A):
    """∂_V f(A) = δf(ℓ(A), r(A)) # ∂_V A."""
    return delta_f(f, ell_A, r_A).contract(partial_A)


def frechet_derivative(f: ScalarFunction, A, H):
    """d/dt f(A + tH) at t=0, i.e. δf(A,A)#H."""
    S = _as_spectral(A)
    return delta_f(f, S, S).contract(H)


# ─── Tree-indexed divided differences ────────────────────────────────────────

TREE_SHAPES = ("((x,y),z)", "(x,(y,z))", "(((x,y),z),w)")


def _first_difference_1(theta, x, y, z):
    """((x,y),z): divided difference of θ(·,z) at x, y."""
    x, y, z = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, y, z)))
    same = _confluent(x, y)
    out = np.empty(x.shape)
    if np.any(same):
        out[same] = theta.partial(x[same], z[same], "1")
    d = ~same
    if np.any(d):
        out[d] = (theta.value(x[d], z[d]) - theta.value(y[d], z[d])) / (x[d] - y[d])
    return out


def _first_difference_2(theta, x, y, z):
    """(x,(y,z)): divided difference of θ(x,·) at y, z."""
    x, y, z = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, y, z)))
    same = _confluent(y, z)
    out = np.empty(x.shape)
    if np.any(same):
        out[same] = theta.partial(x[same], y[same], "2")
    d = ~same
    if np.any(d):
        out[d] = (theta.value(x[d], y[d]) - theta.value(x[d], z[d])) / (y[d] - z[d])
    return out


def _second_difference_1(theta, x, y, z, w):
    """(((x,y),z),w): second divided difference of θ(·,w) at x, y, z."""
    x, y, z, w = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, y, z, w)))
    out = np.empty(x.shape)
    xy = _confluent(x, y)
    all3 = xy & _confluent(x, z)
    if np.any(all3):
        out[all3] = 0.5 * theta.partial(x[all3], w[all3], "11")
    two = xy & ~all3
    if np.any(two):
        xx, zz, ww = x[two], z[two], w[two]
        out[two] = ((xx - zz) * theta.partial(xx, ww, "1")
                    - (theta.value(xx, ww) - theta.value(zz, ww))) / (xx - zz) ** 2
    d = ~xy
    if np.any(d):
        out[d] = (_first_difference_1(theta, x[d], z[d], w[d])
                  - _first_difference_1(theta, y[d], z[d], w[d])) / (x[d] - y[d])
    return out


def tree_coefficients(theta: MeanFunction, shape, *args):
    """Scalar (vectorized) tree difference for one of TREE_SHAPES."""
    if shape == "((x,y),z)":
        return _first_difference_1(theta, *args)
    if shape == "(x,(y,z))":
        return _first_difference_2(theta, *args)
    if shape == "(((x,y),z),w)":
        return _second_difference_1(theta, *args)
    raise TreeShapeError(f"unsupported tree shape {shape!r}")


def tree_delta(theta: MeanFunction, shape, spectra: Sequence, inserts: Sequence):
    """Contract a tree difference over spectral grids.

    ((x,y),z)      spectra (A1,A2,A3), inserts (B, X): Σ T A1_i B A2_j X A3_k
    (x,(y,z))      spectra (A1,A2,A3), inserts (B, X): Σ T A1_i X A2_j B A3_k
    (((x,y),z),w)  spectra (A1..A4), inserts (B, C, X): Σ T A1_i B A2_j C A3_k X A4_l

    B sits at the innermost node, X at the root.
    """
    if shape not in TREE_SHAPES:
        raise TreeShapeError(f"unsupported tree shape {shape!r}")
    S = [_as_spectral(a) for a in spectra]
    U = [s.vectors for s in S]
    vals = [s.values for s in S]

    def rot(M, i, j):
        return U[i].conj().T @ np.asarray(M, dtype=complex) @ U[j]

    if shape == "((x,y),z)":
        B, X = inserts
        T = tree_coefficients(theta, shape, *np.meshgrid(*vals[:3], indexing="ij"))
        R = np.einsum("abc,ab,bc->ac", T, rot(B, 0, 1), rot(X, 1, 2))
        return U[0] @ R @ U[2].conj().T
    if shape == "(x,(y,z))":
        B, X = inserts
        T = tree_coefficients(theta, shape, *np.meshgrid(*vals[:3], indexing="ij"))
        R = np.einsum("abc,ab,bc->ac", T, rot(X, 0, 1), rot(B, 1, 2))
        return U[0] @ R @ U[2].conj().T
    B, C, X = inserts
    T = tree_coefficients(theta, shape, *np.meshgrid(*vals[:4], indexing="ij"))
    R = np.einsum("abcd,ab,bc,cd->ad", T, rot(B, 0, 1), rot(C, 1, 2), rot(X, 2, 3))
    return U[0] @ R @ U[3].conj().T


# ─── Entropy expansion ───────────────────────────────────────────────────────

def entropy_second_derivative(rho, nu):
    """Tr[ν δlog(ρ,ρ)#ν], the second derivative of Tr[ρ log ρ] along ρ + tν."""
    S = spectral(rho)
    return float(np.real(np.trace(np.asarray(nu).conj().T @ delta_f(LOG, S, S).contract(nu))))


def entropy_second_derivative_quadrature(rho, nu, nodes=200):
    """∫₀^∞ Tr[ν(x+ρ)⁻¹ν(x+ρ)⁻¹] dx by Gauss–Legendre in s = x/(1+x)."""
    rho = hermitize(rho, "entropy expansion needs a Hermitian state")
    nu = np.asarray(nu, dtype=complex)
    eye = np.eye(rho.shape[0])
    s, w = _gauss_legendre(int(nodes))
    total = 0.0
    for sk, wk in zip(s, w):
        # Jacobian cancels: (x+ρ)⁻¹ν(x+ρ)⁻¹ν dx = M ν M ν ds, M = (s + (1−s)ρ)⁻¹
        G = np.linalg.solve(sk * eye + (1.0 - sk) * rho, nu)
        total += wk * np.trace(G @ G).real
    return float(total)


# ─── Quasi-entropies ─────────────────────────────────────────────────────────

def quasi_entropy(theta: MeanFunction, p, R, S, A):
    """Υ(R,S;A) = Tr[A* θ^{−p}(R,S)#A]."""
    SR, SS = spectral(R), spectral(S)
    r, s = np.meshgrid(SR.eigenvalues, SS.eigenvalues, indexing="ij")
    op = OperatorSum2(SR, SS, np.asarray(theta.value(r, s), dtype=float) ** (-p))
    A = np.asarray(A, dtype=complex)
    return float(np.real(np.trace(A.conj().T @ op.contract(A))))


def _log_uniform_spectrum(rng, n):
    return np.exp(rng.uniform(np.log(0.1), np.log(10.0), size=n))


def _random_unitary(rng, n):
    Z = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / np.sqrt(2.0)
    Q, Rm = np.linalg.qr(Z)
    return Q * (np.diag(Rm) / np.abs(np.diag(Rm)))


def _random_positive(rng, n, commuting=False):
    lam = _log_uniform_spectrum(rng, n)
    if commuting:
        return np.diag(lam).astype(complex)
    U = _random_unitary(rng, n)
    return (U * lam) @ U.conj().T


def _random_matrix(rng, n, real_diag=False):
    if real_diag:
        return np.diag(rng.standard_normal(n)).astype(complex)
    return rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))


def convexity_probe(theta: MeanFunction, p, trials, n=3, seed=0, tol=1e-9):
    """Falsifier for joint convexity of Υ_{θ,p}.

    Cycles through three sample families: global random pairs, local
    symmetric perturbations around a random point, and commuting diagonal
    pairs. Reports the worst relative midpoint excess.
    """
    rng = np.random.default_rng(seed)
    worst = -np.inf
    witness = None
    for t in range(int(trials)):
        family = ("global", "local", "commuting")[t % 3]
        commuting = family == "commuting"
        if family == "local":
            R0 = _random_positive(rng, n)
            S0 = _random_positive(rng, n)
            A0 = _random_matrix(rng, n)
            h = 1e-2
            dR = hermitize_random(rng, n)
            dS = hermitize_random(rng, n)
            dA = _random_matrix(rng, n)
            lo = (R0 - h * dR, S0 - h * dS, A0 - h * dA)
            hi = (R0 + h * dR, S0 + h * dS, A0 + h * dA)
            if min(np.linalg.eigvalsh(lo[0]).min(), np.linalg.eigvalsh(lo[1]).min()) <= 0:
                continue
        else:
            lo = (_random_positive(rng, n, commuting), _random_positive(rng, n, commuting),
                  _random_matrix(rng, n, commuting))
            hi = (_random_positive(rng, n, commuting), _random_positive(rng, n, commuting),
                  _random_matrix(rng, n, commuting))
        mid = tuple(0.5 * (a + b) for a, b in zip(lo, hi))
        y0 = quasi_entropy(theta, p, *lo)
        y1 = quasi_entropy(theta, p, *hi)
        ym = quasi_entropy(theta, p, *mid)
        avg = 0.5 * (y0 + y1)
        excess = (ym - avg) / max(abs(avg), np.finfo(float).tiny)
        if excess > worst:
            worst = excess
            witness = {"family": family, "trial": t, "midpoint": ym, "average": avg}
    status = "violation" if worst > tol else "consistent"
    logger.debug("convexity_probe %s p=%g: %s (worst %.3e)", theta.label, p, status, worst)
    return {
        "method":        "random-midpoint",
        "status":        status,
        "max_violation": float(worst),
        "trials":        int(trials),
        "witness":       witness,
    }


def hermitize_random(rng, n):
    X = _random_matrix(rng, n)
    return 0.5 * (X + X.conj().T)


def random_kraus(rng, n_in, n_out=None, rank=3):
    """Kraus operators of a random channel from the QR of a stacked isometry."""
    n_out = n_in if n_out is None else n_out
    Z = rng.standard_normal((rank * n_out, n_in)) + 1j * rng.standard_normal((rank * n_out, n_in))
    Q, _ = np.linalg.qr(Z)
    return [Q[k * n_out:(k + 1) * n_out, :] for k in range(rank)]


def apply_channel(kraus, X):
    return sum(K @ X @ K.conj().T for K in kraus)


def cptp_contractivity_probe(theta: MeanFunction, R, S, A, channel, p=1.0) -> Tuple[float, float]:
    """(Υ(𝒯R,𝒯S;𝒯A), Υ(R,S;A)) for a channel given by Kraus operators."""
    kraus = [np.asarray(K, dtype=complex) for K in channel]
    n_in = kraus[0].shape[1]
    tp = sum(K.conj().T @ K for K in kraus)
    if np.linalg.norm(tp - np.eye(n_in)) > 1e-10:
        raise ChannelError("channel is not trace preserving")
    lhs = quasi_entropy(theta, p, apply_channel(kraus, R), apply_channel(kraus, S),
                        apply_channel(kraus, A))
    rhs = quasi_entropy(theta, p, R, S, A)
    return lhs, rhs
