"""
core/transport.py
─────────────────
The transport metric: the multiplication operators ρ̂_j = θ_j(ℓ_j(ρ), r_j(ρ)),
the metric operator 𝒦_ρA = −div(ρ̂ # ∇A), continuity-equation solves, action
and norms, the Benamou–Brenier distance 𝒲, geodesic shooting, the dual
metric W₁ and the comparison constants M, N.

All matrices handled here are in ambient coordinates; states and potentials
are Hermitian elements of the algebra, tangent fields live in the ℬ_j.
"""

import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.optimize

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from shared import config
from shared.errors import (
    ConvergenceError, MeanDomainError, NonConvexThetaError, NotConnectedError,
    RangeError, SingularStateError, StructureError,
)
from core.opcalc import (
    MeanFunction, OperatorSum2, doubsum, spectral, tilted_log, power_mean,
    tree_coefficients, tree_delta,
)
from core.matalg import DensityMatrix, as_density
from core.diffstruct import (
    DifferentialStructure, generator, partial, partial_adjoint, zero_mean_basis,
)

logger = logging.getLogger("Transport")


# ─── θ assignment ────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class ThetaAssignment:
    """One mean per direction."""

    means: Tuple[MeanFunction, ...]
    label: str = "custom"

    @classmethod
    def default(cls, ds: DifferentialStructure):
        """θ_j(r,s) = Λ(e^{ω_j/2}r, e^{−ω_j/2}s)."""
        return cls(tuple(tilted_log(-d.omega) for d in ds.directions), "logarithmic")

    @classmethod
    def power(cls, ds: DifferentialStructure, m):
        return cls(tuple(power_mean(m, -d.omega) for d in ds.directions), f"power({m:g})")

    @classmethod
    def uniform(cls, ds: DifferentialStructure, mean: MeanFunction):
        return cls(tuple(mean for _ in ds.directions), mean.label)

    def __getitem__(self, j):
        return self.means[j]

    def __len__(self):
        return len(self.means)

    @property
    def convex(self):
        return all(m.convex for m in self.means)

    def check(self, ds: DifferentialStructure, grid=None):
        """Positivity on a log grid and θ_j(r,s) = θ_{j*}(s,r)."""
        if len(self.means) != len(ds.directions):
            raise StructureError("θ assignment does not match the direction list")
        g = np.geomspace(1e-3, 1e3, 13) if grid is None else np.asarray(grid, dtype=float)
        r, s = np.meshgrid(g, g, indexing="ij")
        min_value, sym = np.inf, 0.0
        for j, d in enumerate(ds.directions):
            a = self.means[j].value(r, s)
            b = self.means[d.j_star].value(s, r)
            min_value = min(min_value, float(a.min()))
            sym = max(sym, float(np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-300))))
        return {"min_value": min_value, "symmetry_residual": sym,
                "passed": bool(min_value > 0 and sym <= 1e-10)}


# ─── Tangent fields & curves ─────────────────────────────────────────────────

@dataclass(frozen=True)
class TangentField:
    """𝐁 = (B_j)_j with B_j ∈ ℬ_j."""

    components: Tuple[np.ndarray, ...]

    @classmethod
    def zeros(cls, ds: DifferentialStructure):
        return cls(tuple(np.zeros((d.target.ambient_dim,) * 2, dtype=complex) for d in ds.directions))

    @classmethod
    def gradient(cls, ds: DifferentialStructure, A):
        return cls(tuple(partial(ds, j, A) for j in range(len(ds.directions))))

    @classmethod
    def random(cls, ds: DifferentialStructure, rng):
        comps = []
        for d in ds.directions:
            c = rng.standard_normal(d.target.dim) + 1j * rng.standard_normal(d.target.dim)
            comps.append(d.target.from_coords(c))
        return cls(tuple(comps))

    def check(self, ds: DifferentialStructure):
        if len(self.components) != len(ds.directions):
            raise StructureError("tangent field shape does not match the direction list")
        return self

    def __add__(self, other):
        return TangentField(tuple(a + b for a, b in zip(self.components, other.components)))

    def scaled(self, c):
        return TangentField(tuple(c * a for a in self.components))

    def __iter__(self):
        return iter(self.components)

    def __len__(self):
        return len(self.components)


def _flat(M):
    M = np.asarray(M, dtype=complex)
    return [[float(z.real), float(z.imag)] for z in M.ravel()]


@dataclass
class Curve:
    times:      np.ndarray
    states:     List[np.ndarray]
    potentials: List[np.ndarray]
    meta:       Dict = field(default_factory=dict)

    def __len__(self):
        return len(self.times)

    def export(self):
        """[{t, rho, A}] with matrices flattened row-major as (re, im) pairs."""
        return [{"t": float(t), "rho": _flat(r), "A": _flat(a)}
                for t, r, a in zip(self.times, self.states, self.potentials)]


# ─── ρ̂, ρ̌ and 𝒦_ρ ───────────────────────────────────────────────────────────

class MetricState:
    """Spectral data of ℓ_j(ρ), r_j(ρ) and the θ_j tables at one state."""

    def __init__(self, ds: DifferentialStructure, theta: ThetaAssignment, rho):
        self.ds = ds
        self.theta = theta
        self.rho = np.asarray(rho.matrix if isinstance(rho, DensityMatrix) else rho, dtype=complex)
        if len(theta) != len(ds.directions):
            raise StructureError("θ assignment does not match the direction list")
        self.left, self.right, self.hat = [], [], []
        for j, d in enumerate(ds.directions):
            SL, SR = spectral(d.ell(self.rho)), spectral(d.r(self.rho))
            self.left.append(SL)
            self.right.append(SR)
            self.hat.append(doubsum(theta[j], SL, SR))
        self._trees: Dict = {}

    def check(self, j):
        return OperatorSum2(self.hat[j].left, self.hat[j].right, 1.0 / self.hat[j].coeffs)

    def tree(self, j, form):
        key = (j, form)
        if key not in self._trees:
            lam, mu = self.left[j].values, self.right[j].values
            if form == 1:
                grid = np.meshgrid(lam, lam, mu, indexing="ij")
                self._trees[key] = tree_coefficients(self.theta[j], "((x,y),z)", *grid)
            else:
                grid = np.meshgrid(lam, mu, mu, indexing="ij")
                self._trees[key] = tree_coefficients(self.theta[j], "(x,(y,z))", *grid)
        return self._trees[key]


def _state(ds, theta, rho) -> MetricState:
    return rho if isinstance(rho, MetricState) else MetricState(ds, theta, rho)


def rho_hat(ds: DifferentialStructure, theta: ThetaAssignment, rho) -> List[OperatorSum2]:
    """ρ̂_j = θ_j(ℓ_j(ρ), r_j(ρ)) per direction."""
    return list(_state(ds, theta, rho).hat)


def rho_check(ds: DifferentialStructure, theta: ThetaAssignment, rho) -> List[OperatorSum2]:
    """ρ̌_j = (1/θ_j)(ℓ_j(ρ), r_j(ρ)); needs ρ ∈ 𝔓₊."""
    st = _state(ds, theta, rho)
    for h in st.hat:
        if np.any(h.coeffs <= 0):
            raise SingularStateError("inverse multiplier needs a strictly positive state")
    return [st.check(j) for j in range(len(ds.directions))]


def _tau_j_inner(d, X, Y):
    return d.target.inner(X, Y)


def k_matrix(ds: DifferentialStructure, theta: ThetaAssignment, rho) -> np.ndarray:
    """Matrix of 𝒦_ρ on the Hermitian basis, K_ab = ⟨e_a, 𝒦_ρ e_b⟩ (real symmetric)."""
    st = _state(ds, theta, rho)
    D = ds.algebra.dim
    K = np.zeros((D, D), dtype=complex)
    for j, d in enumerate(ds.directions):
        G = ds.gradient_stack(j)
        C = st.hat[j].contract_stack(G)
        K += np.einsum("axy,bxy,y->ab", G.conj(), C, d.target.trace_weights)
    K = 0.5 * (K + K.conj().T)
    return K.real


def metric_operator(ds: DifferentialStructure, theta: ThetaAssignment, rho, A):
    """𝒦_ρA = −div(ρ̂ # ∇A) = Σ_j ∂_j†(ρ̂_j # ∂_jA)."""
    ds.require_validated()
    st = _state(ds, theta, rho)
    return sum(partial_adjoint(ds, j, st.hat[j].contract(partial(ds, j, A)))
               for j in range(len(ds.directions)))


def _coords(ds, A):
    return ds.algebra.coords(A).real


def solve_continuity(ds: DifferentialStructure, theta: ThetaAssignment, rho, nu):
    """Minimum-norm potential A ∈ 𝒜₀ with 𝒦_ρA = ν."""
    ds.require_validated()
    Z = zero_mean_basis(ds)
    c = _coords(ds, nu)
    y = Z.T @ c
    if np.linalg.norm(c - Z @ y) > config.CONSTRAINT_TOL * max(np.linalg.norm(c), 1.0):
        raise RangeError("source not in divergence range")
    if Z.shape[1] == 0:
        return np.zeros_like(ds.algebra.unit())
    Kr = Z.T @ k_matrix(ds, theta, rho) @ Z
    x = np.linalg.pinv(Kr, rcond=config.PINV_RCOND) @ y
    return ds.algebra.from_coords(Z @ x)


# ─── Norms & action ──────────────────────────────────────────────────────────

def inner_rho(ds, theta, rho, B: TangentField, C: TangentField):
    """⟨𝐁,𝐂⟩_ρ = Σ_j τ_j[B_j* (ρ̂_j # C_j)]."""
    st = _state(ds, theta, rho)
    return sum(_tau_j_inner(d, B.components[j], st.hat[j].contract(C.components[j]))
               for j, d in enumerate(ds.directions))


def norm_rho(ds, theta, rho, B: TangentField):
    return float(np.sqrt(max(inner_rho(ds, theta, rho, B, B).real, 0.0)))


def norm_minus1_rho(ds, theta, rho, B: TangentField):
    """‖𝐁‖_{−1,ρ} with ρ̌ in place of ρ̂."""
    checks = rho_check(ds, theta, rho)
    val = sum(_tau_j_inner(d, B.components[j], checks[j].contract(B.components[j])).real
              for j, d in enumerate(ds.directions))
    return float(np.sqrt(max(val, 0.0)))


def action(ds, theta, rho, B: TangentField):
    """𝒜(ρ,𝐁) = ‖𝐁‖²_{−1,ρ}."""
    return norm_minus1_rho(ds, theta, rho, B.check(ds)) ** 2


def norm_B2(ds: DifferentialStructure, B: TangentField):
    """‖𝐁‖_{ℬ,2} = (½ Σ_j ‖ℓ_j†(B_jB_j*) + r_j†(B_j*B_j)‖_𝒜)^{1/2}."""
    total = 0.0
    for j, d in enumerate(ds.directions):
        Bj = B.components[j]
        X = d.ell.adjoint(Bj @ Bj.conj().T) + d.r.adjoint(Bj.conj().T @ Bj)
        total += np.linalg.norm(0.5 * (X + X.conj().T), 2)
    return float(np.sqrt(0.5 * total))


def action_convexity_check(ds, theta, samples=20, seed=0):
    """Midpoint convexity of (ρ,𝐁) ↦ 𝒜(ρ,𝐁) on random pairs."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(int(samples)):
        r0, r1 = ds.algebra.random_density(rng).matrix, ds.algebra.random_density(rng).matrix
        B0, B1 = TangentField.random(ds, rng), TangentField.random(ds, rng)
        a0, a1 = action(ds, theta, r0, B0), action(ds, theta, r1, B1)
        am = action(ds, theta, 0.5 * (r0 + r1), (B0 + B1).scaled(0.5))
        worst = max(worst, (am - 0.5 * (a0 + a1)) / max(0.5 * (a0 + a1), 1e-300))
    return {"samples": int(samples), "max_excess": float(worst), "passed": bool(worst <= 1e-9)}


# ─── First variation of 𝒦 ────────────────────────────────────────────────────

def phi(ds: DifferentialStructure, theta: ThetaAssignment, rho, A, form=1):
    """Φ(ρ,A) with D_B⟨𝒦_ρA, A⟩ = 2τ[BΦ(ρ,A)].

    form 1 collects the ℓ-side tree ((x,y),z), form 2 the r-side tree
    (x,(y,z)); they agree when θ_j(r,s) = θ_{j*}(s,r).
    """
    if form not in (1, 2):
        raise ValueError("form must be 1 or 2")
    st = _state(ds, theta, rho)
    out = np.zeros_like(ds.algebra.unit())
    for j, d in enumerate(ds.directions):
        C = partial(ds, j, A)
        w = d.target.trace_weights
        P, Q = st.left[j].vectors, st.right[j].vectors
        Y = P.conj().T @ C @ Q
        Y2 = P.conj().T @ (C * w[None, :]) @ Q
        T = st.tree(j, form)
        if form == 1:
            N = np.einsum("abc,bc,ac->ba", T, Y, Y2.conj())
            X = (P @ N @ P.conj().T) / w[:, None]
            out += d.ell.adjoint(X)
        else:
            N = np.einsum("abc,ab,ac->cb", T, Y, Y2.conj())
            X = (Q @ N @ Q.conj().T) / w[None, :]
            out += d.r.adjoint(X)
    return 0.5 * (out + out.conj().T)


def k_derivative(ds: DifferentialStructure, theta: ThetaAssignment, rho, A, B):
    """∂_ε|₀ ⟨𝒦_{ρ+εB}A, A⟩ from tree_delta contractions."""
    st = _state(ds, theta, rho)
    total = 0.0
    for j, d in enumerate(ds.directions):
        C = partial(ds, j, A)
        SL, SR = st.left[j], st.right[j]
        t1 = tree_delta(theta[j], "((x,y),z)", (SL, SL, SR), (d.ell(B), C))
        t2 = tree_delta(theta[j], "(x,(y,z))", (SL, SR, SR), (d.r(B), C))
        total += _tau_j_inner(d, C, t1 + t2).real
    return float(total)


def k_derivative_check(ds, theta, rho, A, B, h=1e-6):
    """Finite-difference vs exact directional derivative of ⟨𝒦_ρA,A⟩ and 2τ[BΦ]."""
    alg = ds.algebra
    rho = np.asarray(rho.matrix if isinstance(rho, DensityMatrix) else rho, dtype=complex)

    def energy(r):
        x = _coords(ds, A)
        return float(x @ k_matrix(ds, theta, r) @ x)

    fd = (energy(rho + h * B) - energy(rho - h * B)) / (2 * h)
    exact = k_derivative(ds, theta, rho, A, B)
    via1 = 2 * alg.tau(B @ phi(ds, theta, rho, A, 1)).real
    via2 = 2 * alg.tau(B @ phi(ds, theta, rho, A, 2)).real
    scale = max(abs(exact), 1e-12)
    return {"finite_difference": fd, "exact": exact, "phi_form1": via1, "phi_form2": via2,
            "fd_residual": abs(fd - exact) / scale,
            "phi_residual": max(abs(via1 - exact), abs(via2 - exact)) / scale}


# ─── Distance ────────────────────────────────────────────────────────────────

@dataclass
class SolverOptions:
    grid_n:          int = 0
    max_iter:        int = 0
    primal_tol:      float = 0.0
    eps_boundary:    float = 0.0
    allow_nonconvex: bool = False

    def resolved(self):
        return SolverOptions(
            self.grid_n or config.GRID_N,
            self.max_iter or config.MAX_ITER,
            self.primal_tol or config.PRIMAL_TOL,
            self.eps_boundary or config.EPS_BOUNDARY,
            self.allow_nonconvex,
        )


@dataclass
class DistanceResult:
    value:               float
    curve:               Curve
    primal_residual:     float
    constraint_residual: float
    iterations:          int
    converged:           bool
    grid_n:              int
    epsilon:             float = 0.0
    runtime:             float = 0.0

    def to_dict(self):
        return {"value": self.value, "primal_residual": self.primal_residual,
                "constraint_residual": self.constraint_residual, "iterations": self.iterations,
                "converged": self.converged, "grid_n": self.grid_n, "epsilon": self.epsilon,
                "runtime": self.runtime}


class _PathProblem:
    """Reduced discrete action over interior states.

    States ρ_k = ρ₀ + Σ (Z x_k), x₀ = 0, x_N = d; interval momenta are
    eliminated: g(ρ,y) = yᵀ K_r(ρ)⁻¹ y, each interval averaging its two
    endpoint states.
    """

    def __init__(self, ds, theta, c0, d, Z, N):
        self.ds, self.theta, self.Z, self.N = ds, theta, Z, N
        self.c0, self.d = c0, d
        self.dt = 1.0 / N
        self.r = Z.shape[1]

    def states(self, X):
        xs = np.vstack([np.zeros(self.r), X.reshape(self.N - 1, self.r), self.d])
        return xs, [self.ds.algebra.from_coords(self.c0 + self.Z @ x) for x in xs]

    def evaluate(self, X, need_grad=True):
        xs, rhos = self.states(X)
        for R in rhos:
            if np.linalg.eigvalsh(0.5 * (R + R.conj().T)).min() <= 0:
                return np.inf, None, None
        try:
            sts = [MetricState(self.ds, self.theta, R) for R in rhos]
        except MeanDomainError:
            return np.inf, None, None
        Kr = [self.Z.T @ k_matrix(self.ds, self.theta, s) @ self.Z for s in sts]
        F = 0.0
        left, right = [], []
        for i in range(self.N):
            y = (xs[i + 1] - xs[i]) / self.dt
            try:
                aL = scipy.linalg.solve(Kr[i], y, assume_a="pos")
                aR = scipy.linalg.solve(Kr[i + 1], y, assume_a="pos")
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
                return np.inf, None, None
            F += 0.5 * self.dt * (y @ aL + y @ aR)
            left.append(aL)
            right.append(aR)
        info = {"sts": sts, "left": left, "right": right, "rhos": rhos}
        if not need_grad:
            return F, None, info
        grad = np.zeros((self.N - 1, self.r))
        alg = self.ds.algebra
        for k in range(1, self.N):
            A_prev = alg.from_coords(self.Z @ right[k - 1])
            A_next = alg.from_coords(self.Z @ left[k])
            ph = phi(self.ds, self.theta, sts[k], A_prev) + phi(self.ds, self.theta, sts[k], A_next)
            grad[k - 1] = (left[k - 1] + right[k - 1]) - (left[k] + right[k]) \
                - self.dt * (self.Z.T @ _coords(self.ds, ph))
        return F, grad.ravel(), info

    def continuity_residual(self, info):
        """max over intervals of ‖(ρ_{i+1} − ρ_i)/Δt − 𝒦_ρA_i‖ / ‖(ρ_{i+1} − ρ_i)/Δt‖,
        on the full algebra, with ρ either endpoint of the interval."""
        K = [k_matrix(self.ds, self.theta, s) for s in info["sts"]]
        c = [_coords(self.ds, R) for R in info["rhos"]]
        worst = 0.0
        for i in range(self.N):
            v = (c[i + 1] - c[i]) / self.dt
            scale = max(np.linalg.norm(v), 1e-300)
            for Ki, a in ((K[i], info["left"][i]), (K[i + 1], info["right"][i])):
                worst = max(worst, np.linalg.norm(Ki @ (self.Z @ a) - v) / scale)
        return float(worst)


def _lbfgs(problem: _PathProblem, X0, max_iter, tol):
    """Limited-memory BFGS with Armijo backtracking that rejects states
    leaving 𝔓₊."""
    X = X0.copy()
    F, g, info = problem.evaluate(X)
    if not np.isfinite(F):
        raise ConvergenceError("initial path leaves the positive cone")
    S, Yh = [], []
    it = 0
    for it in range(1, max_iter + 1):
        gnorm = np.abs(g).max() if g.size else 0.0
        if gnorm <= tol * max(1.0, abs(F)):
            return X, F, g, info, it - 1, True
        q = g.copy()
        alphas = []
        for s, y in reversed(list(zip(S, Yh))):
            a = (s @ q) / (y @ s)
            alphas.append(a)
            q -= a * y
        if S:
            q *= (S[-1] @ Yh[-1]) / (Yh[-1] @ Yh[-1])
        else:
            q *= min(1.0, 1.0 / max(gnorm, 1e-300)) * 1e-2
        for (s, y), a in zip(zip(S, Yh), reversed(alphas)):
            b = (y @ q) / (y @ s)
            q += (a - b) * s
        p = -q
        slope = g @ p
        if slope >= 0:
            S, Yh = [], []
            p = -g * 1e-2 / max(gnorm, 1e-300)
            slope = g @ p
        step = 1.0
        accepted = False
        for _ in range(60):
            Xn = X + step * p
            Fn, gn, info_n = problem.evaluate(Xn)
            if np.isfinite(Fn) and Fn <= F + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            logger.debug("line search stalled at iteration %d (F=%.12g)", it, F)
            return X, F, g, info, it, gnorm <= 1e3 * tol * max(1.0, abs(F))
        s_vec, y_vec = Xn - X, gn - g
        if s_vec @ y_vec > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            S.append(s_vec)
            Yh.append(y_vec)
            if len(S) > config.LBFGS_MEMORY:
                S.pop(0)
                Yh.pop(0)
        X, F, g, info = Xn, Fn, gn, info_n
        logger.debug("iter %d  F=%.12g  |g|=%.3e", it, F, np.abs(g).max())
    gnorm = np.abs(g).max() if g.size else 0.0
    return X, F, g, info, it, gnorm <= tol * max(1.0, abs(F))


def _interior_distance(ds, theta, rho0, rho1, opts: SolverOptions) -> DistanceResult:
    start = time.perf_counter()
    Z = zero_mean_basis(ds)
    c0, c1 = _coords(ds, rho0), _coords(ds, rho1)
    diff = c1 - c0
    d = Z.T @ diff
    if np.linalg.norm(diff - Z @ d) > config.CONSTRAINT_TOL * max(np.linalg.norm(diff), 1.0):
        raise NotConnectedError("endpoints not connected")
    N = int(opts.grid_n)
    problem = _PathProblem(ds, theta, c0, d, Z, N)
    if np.linalg.norm(d) <= 1e-15:
        xs, rhos = problem.states(np.zeros((N - 1) * Z.shape[1]))
        zero = np.zeros_like(ds.algebra.unit())
        curve = Curve(np.linspace(0, 1, N + 1), rhos, [zero] * (N + 1), {"kind": "distance"})
        return DistanceResult(0.0, curve, 0.0, 0.0, 0, True, N, runtime=time.perf_counter() - start)
    X0 = np.outer(np.arange(1, N) / N, d).ravel()
    X, F, g, info, iters, ok = _lbfgs(problem, X0, int(opts.max_iter), float(opts.primal_tol))
    alg = ds.algebra
    pots = [alg.from_coords(Z @ a) for a in info["left"]]
    pots.append(alg.from_coords(Z @ info["right"][-1]))
    curve = Curve(np.linspace(0, 1, N + 1), info["rhos"], pots, {"kind": "distance"})
    primal = float(np.abs(g).max() / max(1.0, abs(F))) if g is not None and g.size else 0.0
    cres = problem.continuity_residual(info)
    if cres > config.CONSTRAINT_TOL:
        logger.warning("continuity residual %.2e above CONSTRAINT_TOL", cres)
        ok = False
    res = DistanceResult(float(np.sqrt(max(F, 0.0))), curve, primal, cres,
                         iters, bool(ok), N, runtime=time.perf_counter() - start)
    if ok:
        logger.info("distance %.10g (N=%d, %d iterations, primal %.2e)", res.value, N, iters, primal)
    else:
        logger.warning("distance solver stopped unconverged after %d iterations (primal %.2e)", iters, primal)
    return res


def distance(ds: DifferentialStructure, theta: ThetaAssignment, rho0, rho1,
             grid_n=None, options: Optional[SolverOptions] = None) -> DistanceResult:
    """𝒲(ρ₀,ρ₁) by minimizing the discrete Benamou–Brenier action.

    Endpoints on the boundary of 𝔓 are pulled towards σ by ε and the value
    is extrapolated to ε → 0 over EPS_LADDER.
    """
    ds.require_validated()
    opts = (options or SolverOptions()).resolved()
    if grid_n:
        opts.grid_n = int(grid_n)
    if opts.grid_n < 1:
        raise StructureError("grid_n must be positive")
    if not theta.convex and not opts.allow_nonconvex:
        raise NonConvexThetaError("θ is not flagged convex; pass allow_nonconvex to proceed")
    alg = ds.algebra
    r0 = as_density(rho0, alg)
    r1 = as_density(rho1, alg)

    def interior(r: DensityMatrix):
        return r.min_eig >= opts.eps_boundary * r.max_eig

    if interior(r0) and interior(r1):
        return _interior_distance(ds, theta, r0.matrix, r1.matrix, opts)

    values, last = [], None
    for eps in config.EPS_LADDER:
        last = _interior_distance(ds, theta, r0.regularized(eps, ds.sigma).matrix,
                                  r1.regularized(eps, ds.sigma).matrix, opts)
        values.append((eps, last.value))
    (e1, v1), (e2, v2) = values[-2], values[-1]
    extrapolated = v2 + (v2 - v1) * e2 / (e1 - e2)
    logger.info("boundary distance: ladder %s → %.10g", [f"{v:.8g}" for _, v in values], extrapolated)
    last.value = float(max(extrapolated, 0.0))
    last.epsilon = 0.0
    last.curve.meta["eps_ladder"] = values
    return last


def distance_matrix(ds, theta, states: Sequence, reference: Optional[Sequence] = None, options=None, workers=1):
    """Table of 𝒲 between ``states`` and ``reference`` (default: ``states``,
    symmetric with zero diagonal), the per-entry residuals and convergence flags."""
    rows = list(states)
    cols = rows if reference is None else list(reference)
    if reference is None:
        pairs = [(a, b) for a in range(len(rows)) for b in range(a + 1, len(rows))]
    else:
        pairs = [(a, b) for a in range(len(rows)) for b in range(len(cols))]
    W = np.zeros((len(rows), len(cols)))
    R = np.zeros_like(W)
    ok = np.ones(W.shape, dtype=bool)

    def run(pair):
        a, b = pair
        return pair, distance(ds, theta, rows[a], cols[b], options=options)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for (a, b), res in pool.map(run, pairs):
            cells = [(a, b), (b, a)] if reference is None else [(a, b)]
            for i, k in cells:
                W[i, k] = res.value
                R[i, k] = max(res.primal_residual, res.constraint_residual)
                ok[i, k] = res.converged
    return W, R, ok


# ─── Geodesics ───────────────────────────────────────────────────────────────

def geodesic_shoot(ds: DifferentialStructure, theta: ThetaAssignment, rho0, A0, T=1.0, steps=100) -> Curve:
    """Explicit midpoint integration of ∂ρ = 𝒦_ρA, ∂A = −Φ(ρ,A).

    Steps are halved while the relative energy change per step exceeds
    GEODESIC_DRIFT_TOL; the curve stops early if ρ leaves 𝔓₊.
    """
    ds.require_validated()
    alg = ds.algebra
    Z = zero_mean_basis(ds)
    P0 = Z @ Z.T

    def project(A):
        return alg.from_coords(P0 @ _coords(ds, A))

    def rhs(r, A):
        st = MetricState(ds, theta, r)
        K = k_matrix(ds, theta, st)
        x = _coords(ds, A)
        return alg.from_coords(K @ x), -project(phi(ds, theta, st, A)), float(x @ K @ x)

    rho = np.asarray(as_density(rho0, alg).matrix, dtype=complex)
    A = project(A0)
    h = T / steps
    t = 0.0
    times, states, pots, energies = [0.0], [rho], [A], []
    drho, dA, E0 = rhs(rho, A)
    energies.append(E0)
    aborted = False
    while t < T - 1e-14:
        h = min(h, T - t)
        for _ in range(30):
            r_mid = rho + 0.5 * h * drho
            if np.linalg.eigvalsh(0.5 * (r_mid + r_mid.conj().T)).min() <= config.GEODESIC_MIN_EIG:
                h *= 0.5
                continue
            dr_mid, dA_mid, _ = rhs(r_mid, A + 0.5 * h * dA)
            r_new, A_new = rho + h * dr_mid, A + h * dA_mid
            if np.linalg.eigvalsh(0.5 * (r_new + r_new.conj().T)).min() <= config.GEODESIC_MIN_EIG:
                h *= 0.5
                continue
            drho_new, dA_new, E_new = rhs(r_new, A_new)
            if abs(E_new - energies[-1]) <= config.GEODESIC_DRIFT_TOL * max(abs(E0), 1e-300) or h < 1e-8:
                break
            h *= 0.5
        else:
            aborted = True
        if aborted or np.linalg.eigvalsh(0.5 * (r_new + r_new.conj().T)).min() <= config.GEODESIC_MIN_EIG:
            aborted = True
            logger.warning("geodesic left the positive cone at t=%.6g", t)
            break
        t += h
        rho, A, drho, dA = 0.5 * (r_new + r_new.conj().T), A_new, drho_new, dA_new
        times.append(t)
        states.append(rho)
        pots.append(A)
        energies.append(E_new)
    drift = float(max(abs(e - E0) for e in energies) / max(abs(E0), 1e-300)) if E0 else 0.0
    return Curve(np.array(times), states, pots,
                 {"kind": "geodesic", "energies": energies, "energy_drift": drift, "aborted": aborted})


def phi_form_agreement(ds, theta, rho, A):
    p1, p2 = phi(ds, theta, rho, A, 1), phi(ds, theta, rho, A, 2)
    return float(np.linalg.norm(p1 - p2) / max(np.linalg.norm(p1), 1e-300))


# ─── W₁ and comparison constants ─────────────────────────────────────────────

def _grad_b2(ds, Z, x):
    A = ds.algebra.from_coords(Z @ x)
    return norm_B2(ds, TangentField.gradient(ds, A))


def w1(ds: DifferentialStructure, rho0, rho1, theta: Optional[ThetaAssignment] = None, seed=0):
    """sup τ[(ρ₁−ρ₀)A] over ‖∇A‖_{ℬ,2} ≤ 1; a certified feasible lower bound."""
    ds.require_validated()
    Z = zero_mean_basis(ds)
    alg = ds.algebra
    c = Z.T @ (_coords(ds, rho1) - _coords(ds, rho0))
    if np.linalg.norm(c) <= 1e-15 or Z.shape[1] == 0:
        return 0.0
    theta = theta or ThetaAssignment.default(ds)

    def ratio(x):
        n = _grad_b2(ds, Z, x)
        return (c @ x) / n if n > 0 else 0.0

    starts = [np.sign(c)]
    try:
        starts.append(Z.T @ _coords(ds, solve_continuity(ds, theta, ds.sigma.matrix, alg.from_coords(Z @ c))))
    except (RangeError, MeanDomainError, np.linalg.LinAlgError):
        pass
    rng = np.random.default_rng(seed)
    starts += [rng.standard_normal(len(c)) for _ in range(2)]
    best_x, best = None, -np.inf
    for x0 in starts:
        if np.linalg.norm(x0) == 0:
            continue
        x0 = x0 / _grad_b2(ds, Z, x0)
        res = scipy.optimize.minimize(
            lambda x: -(c @ x), x0, jac=lambda x: -c, method="SLSQP",
            constraints=[{"type": "ineq", "fun": lambda x: 1.0 - _grad_b2(ds, Z, x) ** 2}],
            options={"maxiter": 300, "ftol": 1e-12},
        )
        for x in (x0, res.x):
            val = ratio(x)
            if val > best:
                best, best_x = val, x
    logger.debug("W1 = %.10g", best)
    return float(best)


@dataclass
class ComparisonConstants:
    M:                 float
    M_sampled:         float
    N:                 float
    arithmetic_bound:  bool
    samples:           int

    def to_dict(self):
        return {"M": self.M, "M_sampled": self.M_sampled, "N": self.N,
                "arithmetic_bound": self.arithmetic_bound, "samples": self.samples}


def comparison_constants(ds: DifferentialStructure, theta: ThetaAssignment, samples=50, seed=0) -> ComparisonConstants:
    """M ≥ ‖𝐁‖_ρ/‖𝐁‖_{ℬ,2} and N = sup ‖∇A‖_{ℬ,2} over ‖A‖_𝒜 ≤ 1, by sampling;
    M = 1 whenever θ_j ≤ arithmetic mean on the sample grid."""
    if not ds.directions:
        raise StructureError("comparison constants need at least one direction")
    rng = np.random.default_rng(seed)
    alg = ds.algebra
    g = np.geomspace(1e-4, 1e4, 17)
    r, s = np.meshgrid(g, g, indexing="ij")
    arith = all(np.all(theta[j].value(r, s) <= 0.5 * (r + s) * (1 + 1e-12)) for j in range(len(theta)))

    M = 0.0
    for k in range(int(samples)):
        rho = alg.random_density(rng, boundary=(k % 4 == 3)).matrix
        B = TangentField.random(ds, rng)
        nb = norm_B2(ds, B)
        if nb > 0:
            M = max(M, norm_rho(ds, theta, rho, B) / nb)
    M_sampled = M
    if arith:
        M = 1.0

    def ratio(x):
        A = alg.from_coords(x)
        op = np.linalg.norm(A, 2)
        return _grad_b2(ds, np.eye(alg.dim), x) / op if op > 0 else 0.0

    cands = []
    for _ in range(int(samples)):
        x = rng.standard_normal(alg.dim)
        cands.append((ratio(x), x))
    cands.sort(key=lambda t: -t[0])
    N = cands[0][0]
    for _, x0 in cands[:3]:
        res = scipy.optimize.minimize(lambda x: -ratio(x), x0, method="Nelder-Mead",
                                      options={"maxiter": 400 * alg.dim, "xatol": 1e-10, "fatol": 1e-12})
        N = max(N, -res.fun)
    return ComparisonConstants(float(M), float(M_sampled), float(N), bool(arith), int(samples))


# ─── Representation comparison & boundary condition ──────────────────────────

def compare_representations(ds_a: DifferentialStructure, ds_b: DifferentialStructure, states: Sequence,
                            theta_a=None, theta_b=None, options=None):
    """Distance tables of two structures side by side; nothing is asserted."""
    La, Lb = generator(ds_a).matrix, generator(ds_b).matrix
    gen_res = float(np.linalg.norm(La - Lb) / max(np.linalg.norm(La), 1e-300))
    theta_a = theta_a or ThetaAssignment.default(ds_a)
    theta_b = theta_b or ThetaAssignment.default(ds_b)
    Wa = distance_matrix(ds_a, theta_a, states, options=options)[0]
    Wb = distance_matrix(ds_b, theta_b, states, options=options)[0]
    return {"generator_residual": gen_res, "table_a": Wa.tolist(), "table_b": Wb.tolist(),
            "max_difference": float(np.abs(Wa - Wb).max()) if len(states) else 0.0}


def boundary_precondition(theta: MeanFunction, grid=None):
    """Largest C with θ(a,b) ≥ C·min(a,b) on a log grid."""
    g = np.geomspace(1e-8, 1.0, 25) if grid is None else np.asarray(grid, dtype=float)
    a, b = np.meshgrid(g, g, indexing="ij")
    C = float(np.min(theta.value(a, b) / np.minimum(a, b)))
    return {"C": C, "passed": C > 0}


# ─── Metric property checks ──────────────────────────────────────────────────

def triangle_check(ds, theta, triples, options=None):
    """max over (ρ₀,ρ₁,ρ₂) of 𝒲(ρ₀,ρ₂) − 𝒲(ρ₀,ρ₁) − 𝒲(ρ₁,ρ₂) with the worst residual."""
    worst, slack = -np.inf, 0.0
    for r0, r1, r2 in triples:
        d01 = distance(ds, theta, r0, r1, options=options)
        d12 = distance(ds, theta, r1, r2, options=options)
        d02 = distance(ds, theta, r0, r2, options=options)
        worst = max(worst, d02.value - d01.value - d12.value)
        slack = max(slack, d01.primal_residual, d12.primal_residual, d02.primal_residual)
    return {"triples": len(triples), "max_excess": float(worst), "solver_residual": float(slack)}


def refinement_check(ds, theta, rho0, rho1, grids=(4, 8, 16)):
    vals = [distance(ds, theta, rho0, rho1, grid_n=n).value for n in grids]
    mono = all(b <= a + 1e-9 for a, b in zip(vals, vals[1:]))
    return {"grids": list(grids), "values": vals, "monotone": mono}


def squared_distance_convexity_check(ds, theta, quads, options=None):
    """𝒲²(midpoints) ≤ average of 𝒲² over sampled endpoint pairs."""
    worst = -np.inf
    for a0, a1, b0, b1 in quads:
        w0 = distance(ds, theta, a0, a1, options=options).value ** 2
        w1_ = distance(ds, theta, b0, b1, options=options).value ** 2
        wm = distance(ds, theta, 0.5 * (a0 + b0), 0.5 * (a1 + b1), options=options).value ** 2
        worst = max(worst, wm - 0.5 * (w0 + w1_))
    return {"samples": len(quads), "max_excess": float(worst)}
