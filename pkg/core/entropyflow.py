"""
core/entropyflow.py
───────────────────
Relative entropy, Fisher information, the gradient-flow identities, the
entropy Hessian along 𝒲-geodesics and Ricci lower bounds (Rayleigh scans,
intertwining) together with the flow inequalities that follow from them.
"""

import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.linalg
import scipy.optimize

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from shared import config
from shared.errors import ErgodicityError, MeanDomainError, SingularStateError, StructureError
from core.opcalc import (
    IDENTITY, XLOGX, MeanFunction, ScalarFunction, flow_mean, logarithmic, spectral,
)
from core.matalg import DensityMatrix, as_density
from core.diffstruct import (
    DifferentialStructure, _generator_apply, adjoint_generator, generator, is_ergodic, partial,
    semigroup_apply, zero_mean_basis,
)
from core.transport import (
    MetricState, SolverOptions, ThetaAssignment, distance, geodesic_shoot, k_matrix,
)

logger = logging.getLogger("EntropyFlow")


def _matrix(rho):
    return np.asarray(rho.matrix if isinstance(rho, DensityMatrix) else rho, dtype=complex)


def _theta(ds, theta):
    return theta or ThetaAssignment.default(ds)


# ─── Entropy functionals ─────────────────────────────────────────────────────

@dataclass(frozen=True)
class EntropySpec:
    """ℱ(ρ) = τ[f(ρ)] flowing along ∂ρ = ℒφ(ρ).

    The associated mean is θ(r,s) = (φ(r)−φ(s))/(f'(r)−f'(s)).
    """

    kind:  str
    f:     ScalarFunction
    phi:   ScalarFunction
    mean:  Optional[MeanFunction] = None
    label: str = ""

    @classmethod
    def relative(cls):
        return cls("relative", XLOGX, IDENTITY, logarithmic(), "relative entropy")

    @classmethod
    def quadratic(cls):
        f = ScalarFunction("x²/2", lambda x: 0.5 * x ** 2, lambda x: x, lambda x: np.ones_like(x))
        return cls("quadratic", f, IDENTITY, None, "quadratic")

    @classmethod
    def power(cls, m):
        """Porous-medium pair f = x^m/(m−1), φ = x^m."""
        m = float(m)
        if m <= 0 or m == 1.0:
            raise StructureError("porous-medium exponent must be positive and ≠ 1")
        f = ScalarFunction(f"x^{m:g}/({m:g}-1)",
                           lambda x: x ** m / (m - 1.0),
                           lambda x: m * x ** (m - 1.0) / (m - 1.0),
                           lambda x: m * x ** (m - 2.0))
        phi = ScalarFunction(f"x^{m:g}", lambda x: x ** m, lambda x: m * x ** (m - 1.0))
        return cls("power", f, phi, None, f"porous({m:g})")

    @classmethod
    def general(cls, f, f_prime, f_second, phi, phi_prime, label="general"):
        return cls("general", ScalarFunction("f", f, f_prime, f_second),
                   ScalarFunction("φ", phi, phi_prime), None, label)

    def theta_mean(self) -> MeanFunction:
        if self.mean is not None:
            return self.mean
        return flow_mean(self.phi.value, self.phi.derivative, self.f.derivative, self.f.second, self.label)

    def check(self, grid=None):
        """θ > 0 and f'' > 0 on a log grid."""
        g = np.geomspace(1e-3, 1e3, 13) if grid is None else np.asarray(grid, dtype=float)
        r, s = np.meshgrid(g, g, indexing="ij")
        theta = self.theta_mean().value(r, s)
        fpp = np.asarray(self.f.second(g), dtype=float)
        sign = np.sign(fpp.min())
        ok = bool(np.all(theta > 0) and np.all(sign * fpp > 0))
        return {"min_theta": float(theta.min()), "min_f_second": float(np.abs(fpp).min()), "passed": ok}

    def value(self, algebra, rho):
        S = spectral(_matrix(rho))
        return float(algebra.tau(S.apply(self.f.value)).real)


def entropy(sigma: DensityMatrix, rho) -> float:
    """Ent_σ(ρ) = τ[ρ(log ρ − log σ)] with 0·log 0 = 0."""
    alg = sigma.algebra
    R = _matrix(rho)
    S = spectral(R)
    val = alg.tau(S.apply(XLOGX.value)) - alg.tau(R @ sigma.log())
    return float(val.real)


def fisher(ds: DifferentialStructure, rho, theta: Optional[ThetaAssignment] = None, form="trace") -> float:
    """ℐ_σ(ρ) = −τ[(log ρ − log σ)ℒ†ρ], or ‖∇(log ρ − log σ)‖²_ρ with form="metric"."""
    R = _matrix(rho)
    if as_density(R, ds.algebra).is_singular():
        raise SingularStateError("Fisher information needs a strictly positive state")
    G = spectral(R).apply(np.log) - ds.sigma.log()
    if form == "trace":
        return float(-ds.algebra.tau(G @ adjoint_generator(ds).apply(R)).real)
    if form == "metric":
        x = ds.algebra.coords(G).real
        return float(x @ k_matrix(ds, _theta(ds, theta), R) @ x)
    raise ValueError("form must be 'trace' or 'metric'")


def fisher_forms(ds, rho, theta=None):
    a, b = fisher(ds, rho, theta, "trace"), fisher(ds, rho, theta, "metric")
    return {"trace": a, "metric": b, "residual": abs(a - b) / max(abs(a), 1e-12)}


# ─── Gradient-flow identities ────────────────────────────────────────────────

def chain_rule_log_residual(ds: DifferentialStructure, rho, theta=None) -> List[float]:
    """ρ̂_j # ∂_j(log ρ − log σ) against e^{−ω_j/2}V_j r_j(ρ) − e^{ω_j/2}ℓ_j(ρ)V_j, per direction."""
    R = _matrix(rho)
    st = MetricState(ds, _theta(ds, theta), R)
    G = spectral(R).apply(np.log) - ds.sigma.log()
    out = []
    for j, d in enumerate(ds.directions):
        lhs = st.hat[j].contract(partial(ds, j, G))
        rhs = np.exp(-0.5 * d.omega) * d.V @ d.r(R) - np.exp(0.5 * d.omega) * d.ell(R) @ d.V
        out.append(float(np.linalg.norm(lhs - rhs) / max(np.linalg.norm(rhs), 1e-12)))
    return out


def gradient_flow_residual(ds: DifferentialStructure, rho, theta=None) -> float:
    """‖ℒ†ρ + 𝒦_ρ(log ρ − log σ)‖ in L²(τ), relative to ‖ℒ†ρ‖ (absolute when ρ = σ)."""
    ds.require_validated()
    R = _matrix(rho)
    alg = ds.algebra
    G = spectral(R).apply(np.log) - ds.sigma.log()
    x = alg.coords(G).real
    KG = alg.from_coords(k_matrix(ds, _theta(ds, theta), R) @ x)
    LR = adjoint_generator(ds).apply(R)
    res = alg.norm(LR + KG) / max(alg.norm(LR), 1.0)
    logger.debug("gradient-flow residual %.3e", res)
    return float(res)


def general_flow_residual(ds: DifferentialStructure, spec: EntropySpec, rho) -> float:
    """‖ℒφ(ρ) + 𝒦_ρ f'(ρ)‖ for a σ = 1 structure, θ from ``spec``."""
    ds.require_validated()
    if not ds.sigma_is_trivial or any(d.omega != 0.0 for d in ds.directions):
        raise StructureError("general entropy flows need σ = 1 and ω_j = 0")
    alg = ds.algebra
    S = spectral(_matrix(rho))
    theta = ThetaAssignment.uniform(ds, spec.theta_mean())
    x = alg.coords(S.apply(spec.f.derivative)).real
    K_fp = alg.from_coords(k_matrix(ds, theta, _matrix(rho)) @ x)
    L_phi = generator(ds).apply(S.apply(spec.phi.value))
    return float(alg.norm(L_phi + K_fp) / max(alg.norm(L_phi), 1.0))


# ─── Hessian ─────────────────────────────────────────────────────────────────

def _hessian_and_metric(ds, theta, rho, eta=1):
    """Hess Ent_σ(ρ) and 𝒦_ρ as real symmetric matrices on the Hermitian basis.

    Hess[A,A] = −⟨ℒA, 𝒦_ρA⟩ + τ[(ℒ†ρ) Φ(ρ,A)], with Φ taken from the
    ℓ-side tree (η = 1) or the r-side tree (η = 2).
    """
    if eta not in (1, 2):
        raise ValueError("eta must be 1 or 2")
    R = _matrix(rho)
    st = MetricState(ds, theta, R)
    K = k_matrix(ds, theta, st)
    L = np.real(generator(ds).matrix)
    H = -0.5 * (L.T @ K + K @ L)
    LR = adjoint_generator(ds).apply(R)
    H2 = np.zeros_like(H, dtype=complex)
    for j, d in enumerate(ds.directions):
        G = ds.gradient_stack(j)
        w = d.target.trace_weights
        P, Q = st.left[j].vectors, st.right[j].vectors
        Y = np.einsum("ia,kij,jb->kab", P.conj(), G, Q)
        Y2 = np.einsum("ia,kij,jb->kab", P.conj(), G * w[None, None, :], Q)
        if eta == 1:
            Rb = P.conj().T @ d.ell(LR) @ P
            H2 += np.einsum("ab,abc,dbc,eac->de", Rb, st.tree(j, 1), Y, Y2.conj())
        else:
            Rr = Q.conj().T @ d.r(LR) @ Q
            H2 += np.einsum("bc,abc,dab,eac->de", Rr, st.tree(j, 2), Y, Y2.conj())
    H = H + np.real(0.5 * (H2 + H2.T))
    return 0.5 * (H + H.T), K


def hessian_matrix(ds: DifferentialStructure, rho, theta=None, eta=1) -> np.ndarray:
    ds.require_validated()
    return _hessian_and_metric(ds, _theta(ds, theta), rho, eta)[0]


def hessian_entropy(ds: DifferentialStructure, rho, A, theta=None, eta=1) -> float:
    """Hess_𝒦 Ent_σ(ρ)[A,A]."""
    x = ds.algebra.coords(A).real
    return float(x @ hessian_matrix(ds, rho, theta, eta) @ x)


def hessian_bilinear(ds, rho, A, B, theta=None, eta=1) -> float:
    """Polarized Hess[A,B]."""
    H = hessian_matrix(ds, rho, theta, eta)
    a, b = ds.algebra.coords(A).real, ds.algebra.coords(B).real
    return float(0.25 * ((a + b) @ H @ (a + b) - (a - b) @ H @ (a - b)))


def hessian_form_agreement(ds, rho, theta=None) -> float:
    H1, H2 = hessian_matrix(ds, rho, theta, 1), hessian_matrix(ds, rho, theta, 2)
    return float(np.linalg.norm(H1 - H2) / max(np.linalg.norm(H1), 1e-12))


def hessian_shooting_check(ds, rho, A, theta=None, h=1e-3, steps=20):
    """Second difference of Ent_σ along the geodesic through ρ with velocity 𝒦_ρA."""
    theta = _theta(ds, theta)
    fwd = geodesic_shoot(ds, theta, rho, A, T=h, steps=steps)
    bwd = geodesic_shoot(ds, theta, rho, -np.asarray(A), T=h, steps=steps)
    e0 = entropy(ds.sigma, rho)
    second = (entropy(ds.sigma, fwd.states[-1]) - 2 * e0 + entropy(ds.sigma, bwd.states[-1])) / h ** 2
    exact = hessian_entropy(ds, rho, A, theta)
    return {"second_difference": float(second), "hessian": exact,
            "residual": abs(second - exact) / max(abs(exact), 1e-12)}


# ─── Ricci scan ──────────────────────────────────────────────────────────────

@dataclass
class RicciEstimate:
    lambda_hat: float
    method:     str
    label:      str
    residual:   float
    witnesses:  list = field(default_factory=list)
    samples:    int = 0
    stable:     bool = False
    certificate: Optional[float] = None   # exact intertwining λ, kept when too weak to use

    def to_dict(self, with_witnesses=False):
        out = {"lambda_hat": self.lambda_hat, "method": self.method, "label": self.label,
               "residual": self.residual, "witness_count": len(self.witnesses),
               "samples": self.samples, "stable": self.stable, "certificate": self.certificate}
        if with_witnesses:
            out["witnesses"] = [{"rho": _pairs(r), "A": _pairs(a)} for r, a in self.witnesses]
        return out


def _pairs(M):
    return [[[float(z.real), float(z.imag)] for z in row] for row in np.asarray(M, dtype=complex)]


def rayleigh_minimum(ds, rho, theta=None, eta=1):
    """(min over A ∈ 𝒜₀ of Hess/⟨A,𝒦_ρA⟩, minimizer A, eigen-residual)."""
    theta = _theta(ds, theta)
    Z = zero_mean_basis(ds)
    H, K = _hessian_and_metric(ds, theta, rho, eta)
    Hr, Kr = Z.T @ H @ Z, Z.T @ K @ Z
    vals, vecs = scipy.linalg.eigh(Hr, Kr)
    v = vecs[:, 0]
    res = np.linalg.norm(Hr @ v - vals[0] * Kr @ v) / max(np.linalg.norm(Hr @ v), 1e-12)
    return float(vals[0]), ds.algebra.from_coords(Z @ v), float(res)


def _exp_state(alg, h):
    E = spectral(alg.from_coords(h)).apply(np.exp)
    return E / alg.tau(E).real


def ricci_scan(ds: DifferentialStructure, theta=None, samples=None, refine=None, seed=0) -> RicciEstimate:
    """Sampled upper bound on the Ricci constant: min over ρ of the exact
    per-ρ Rayleigh minimum, refined by Nelder–Mead from the best samples."""
    ds.require_validated()
    if not is_ergodic(ds):
        raise ErgodicityError("Ricci scan requires ergodicity")
    theta = _theta(ds, theta)
    samples = config.RICCI_SAMPLES if samples is None else int(samples)
    refine = config.RICCI_REFINE if refine is None else int(refine)
    alg = ds.algebra
    rng = np.random.default_rng(seed)
    states = [ds.sigma.matrix] + [alg.random_density(rng).matrix for _ in range(max(samples - 1, 0))]

    def evaluate(R):
        try:
            return (*rayleigh_minimum(ds, R, theta), R)
        except (MeanDomainError, np.linalg.LinAlgError, scipy.linalg.LinAlgError) as e:
            logger.debug("Ricci sample skipped: %s", e)
            return (np.inf, None, np.inf, R)

    with ThreadPoolExecutor(max_workers=config.QMS_THREADS) as pool:
        results = list(pool.map(evaluate, states))
    results.sort(key=lambda r: r[0])
    sampled_min = results[0][0]

    refined = []
    for lam0, A0, res0, R0 in results[:refine]:
        if not np.isfinite(lam0):
            continue
        h0 = alg.coords(spectral(R0).apply(np.log)).real

        def objective(h):
            try:
                return rayleigh_minimum(ds, _exp_state(alg, h), theta)[0]
            except (MeanDomainError, np.linalg.LinAlgError, scipy.linalg.LinAlgError):
                return np.inf

        opt = scipy.optimize.minimize(objective, h0, method="Nelder-Mead",
                                      options={"maxiter": 200 * alg.dim, "xatol": 1e-9, "fatol": 1e-12})
        if opt.fun < lam0:
            R = _exp_state(alg, opt.x)
            refined.append((*rayleigh_minimum(ds, R, theta), R))
        else:
            refined.append((lam0, A0, res0, R0))
    pool_all = sorted(refined + results[:max(refine, 1)], key=lambda r: r[0])
    best = pool_all[0]
    stable = abs(best[0] - sampled_min) <= 1e-4 * max(1.0, abs(sampled_min))
    witnesses = [(r[3], r[1]) for r in pool_all[:max(refine, 1)] if r[1] is not None]
    logger.info("Ricci scan: λ̂ = %.8g over %d samples (sampled %.8g, stable=%s)",
                best[0], samples, sampled_min, stable)
    return RicciEstimate(best[0], "rayleigh-scan", "estimate", best[2], witnesses, samples, stable)


# ─── Intertwining ────────────────────────────────────────────────────────────

def intertwining_report(ds: DifferentialStructure):
    """Least-squares λ with ∂_jℒ = (ℒ − λ)∂_j over all directions, and the
    worst relative commutation residual. ℒ acts on ℬ_j, so every ℬ_j must be 𝒜."""
    ds.require_validated()
    alg = ds.algebra
    for d in ds.directions:
        if d.target is not alg and (d.target.kind, d.target.sizes) != (alg.kind, alg.sizes):
            return {"lambda": None, "residual": np.inf, "reason": "ℬ_j differs from 𝒜"}
    L = generator(ds)
    num, den = 0.0, 0.0
    pairs = []
    for j in range(len(ds.directions)):
        for e in alg.basis:
            dA = partial(ds, j, e)
            diff = partial(ds, j, L.apply(e)) - _generator_apply(ds, dA)
            pairs.append((j, dA, diff))
            num += -np.vdot(dA, diff).real
            den += np.vdot(dA, dA).real
    lam = num / den if den > 0 else 0.0
    worst = 0.0
    for j in range(len(ds.directions)):
        r = sum(np.linalg.norm(diff + lam * dA) ** 2 for jj, dA, diff in pairs if jj == j)
        s = sum(np.linalg.norm(dA) ** 2 for jj, dA, _ in pairs if jj == j)
        worst = max(worst, np.sqrt(r / max(s, 1e-300)))
    return {"lambda": float(lam), "residual": float(worst), "reason": ""}


def intertwining_lambda(ds: DifferentialStructure) -> Optional[float]:
    """λ when ∂_jℒ = (ℒ − λ)∂_j holds to INTERTWINING_TOL, else None."""
    rep = intertwining_report(ds)
    if rep["lambda"] is None or rep["residual"] >= config.INTERTWINING_TOL:
        return None
    return rep["lambda"]


def ricci_estimate(ds, theta=None, samples=None, refine=None, seed=0) -> RicciEstimate:
    """Intertwining certificate when it gives λ > 0, otherwise a Rayleigh scan.

    A non-positive certificate (depolarizing gives exactly 0) is carried on the
    scan result as ``certificate``, with round-off below INTERTWINING_TOL clamped to 0.
    """
    rep = intertwining_report(ds)
    lam = rep["lambda"] if rep["residual"] < config.INTERTWINING_TOL else None
    if lam is not None and abs(lam) < config.INTERTWINING_TOL:
        lam = 0.0
    if lam is not None and lam > config.INTERTWINING_TOL:
        logger.info("intertwining certificate λ = %.12g (residual %.2e)", lam, rep["residual"])
        return RicciEstimate(lam, "intertwining", "certificate", rep["residual"], certificate=lam)
    est = ricci_scan(ds, theta, samples, refine, seed)
    if lam is not None:
        logger.info("intertwining λ = %.3g is not positive; using the scan", lam)
        est.certificate = lam
    return est


# ─── Flow inequalities ───────────────────────────────────────────────────────

def _evolve_state(ds, rho, t):
    return semigroup_apply(ds, t, _matrix(rho), dual=True)


def gradient_estimate_check(ds, lam, rho, A, t_grid, theta=None, slack=1e-9):
    """‖∇𝒫_tA‖²_ρ ≤ e^{−2λt}‖∇A‖²_{𝒫_t†ρ} along ``t_grid``."""
    theta = _theta(ds, theta)
    alg = ds.algebra
    x = alg.coords(A).real
    rows = []
    for t in t_grid:
        PA = alg.coords(semigroup_apply(ds, t, A)).real
        lhs = float(PA @ k_matrix(ds, theta, _matrix(rho)) @ PA)
        rhs = float(np.exp(-2 * lam * t) * (x @ k_matrix(ds, theta, _evolve_state(ds, rho, t)) @ x))
        rows.append({"t": float(t), "lhs": lhs, "rhs": rhs, "holds": lhs <= rhs + slack * max(1.0, rhs)})
    return {"lambda": lam, "rows": rows, "holds": all(r["holds"] for r in rows)}


def contraction_check(ds, lam, rho0, rho1, t, theta=None, options: Optional[SolverOptions] = None):
    """𝒲(𝒫_t†ρ₀, 𝒫_t†ρ₁) against e^{−λt}𝒲(ρ₀,ρ₁)."""
    theta = _theta(ds, theta)
    before = distance(ds, theta, _matrix(rho0), _matrix(rho1), options=options)
    after = distance(ds, theta, _evolve_state(ds, rho0, t), _evolve_state(ds, rho1, t), options=options)
    lhs, rhs = after.value, float(np.exp(-lam * t) * before.value)
    slack = 2 * max(after.primal_residual, before.primal_residual, config.PRIMAL_TOL) * max(1.0, rhs)
    return {"lhs": lhs, "rhs": rhs, "slack": slack, "holds": lhs <= rhs + slack}


def de_bruijn_residual(ds, rho, t, h=1e-5):
    """d/dt Ent(𝒫_t†ρ) + ℐ(𝒫_t†ρ), relative, by central differences."""
    e_p = entropy(ds.sigma, _evolve_state(ds, rho, t + h))
    e_m = entropy(ds.sigma, _evolve_state(ds, rho, max(t - h, 0.0)))
    step = (t + h) - max(t - h, 0.0)
    rate = (e_p - e_m) / step
    fi = fisher(ds, _evolve_state(ds, rho, t))
    return float(abs(rate + fi) / max(fi, 1e-12))


def evi_check(ds, lam, rho, nu, theta=None, h=1e-3, options=None):
    """Forward difference of ½𝒲²(𝒫_t†ρ, ν) at t = 0 against
    Ent(ν) − Ent(ρ) − (λ/2)𝒲²(ρ,ν)."""
    theta = _theta(ds, theta)
    d0 = distance(ds, theta, _matrix(rho), _matrix(nu), options=options)
    dh = distance(ds, theta, _evolve_state(ds, rho, h), _matrix(nu), options=options)
    lhs = (0.5 * dh.value ** 2 - 0.5 * d0.value ** 2) / h
    rhs = entropy(ds.sigma, nu) - entropy(ds.sigma, rho) - 0.5 * lam * d0.value ** 2
    slack = 2 * max(d0.primal_residual, dh.primal_residual, config.PRIMAL_TOL) / h + h
    return {"lhs": float(lhs), "rhs": float(rhs), "slack": float(slack), "holds": lhs <= rhs + slack}


def metric_derivative_check(ds, rho, t=0.0, h=1e-2, theta=None, options=None):
    """𝒲(𝒫_{t+h}†ρ, 𝒫_t†ρ)/h against √ℐ(𝒫_t†ρ)."""
    theta = _theta(ds, theta)
    a, b = _evolve_state(ds, rho, t), _evolve_state(ds, rho, t + h)
    speed = distance(ds, theta, a, b, options=options).value / h
    bound = float(np.sqrt(max(fisher(ds, a), 0.0)))
    return {"speed": float(speed), "sqrt_fisher": bound, "ratio": float(speed / max(bound, 1e-12))}


def entropy_trajectory(ds, rho, times) -> List[dict]:
    """(t, Ent, Fisher, trace residual) along 𝒫_t†ρ."""
    rows = []
    for t in times:
        R = _evolve_state(ds, rho, t)
        rows.append({"t": float(t), "entropy": entropy(ds.sigma, R), "fisher": fisher(ds, R),
                     "trace_residual": float(abs(ds.algebra.tau(R).real - 1.0))})
    return rows


def entropy_monotone_check(ds, rho, times, tol=1e-12):
    rows = entropy_trajectory(ds, rho, times)
    ent = [r["entropy"] for r in rows]
    mono = all(b <= a + tol for a, b in zip(ent, ent[1:]))
    nonneg = all(r["fisher"] >= -tol for r in rows)
    return {"rows": rows, "monotone": mono, "fisher_nonnegative": nonneg}


def depolarizing_improved_bound_check(ds, samples=20, seed=0, theta=None):
    """Sampled Rayleigh minima against (γ/2)(1 + 1/n); reported, not asserted."""
    if ds.meta.get("builder") != "depolarizing":
        raise StructureError("improved bound applies to depolarizing structures only")
    gamma = float(ds.meta.get("gamma", 1.0))
    n = ds.algebra.ambient_dim
    bound = 0.5 * gamma * (1.0 + 1.0 / n)
    rng = np.random.default_rng(seed)
    lows = [rayleigh_minimum(ds, ds.algebra.random_density(rng).matrix, theta)[0] for _ in range(int(samples))]
    return {"bound": bound, "min_ratio": float(min(lows)), "holds": min(lows) >= bound - 1e-8}
