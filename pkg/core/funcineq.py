"""
core/funcineq.py
────────────────
Functional inequalities: MLSI, H𝒲I, modified Talagrand, T₁ and Poincaré.
Sampled constants are one-sided (upper bounds on the true constants); only
the Poincaré constant is computed exactly.
"""

import logging
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.stats

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from shared import config
from shared.errors import ConvergenceError, ErgodicityError, MeanDomainError, SingularStateError
from core.opcalc import spectral
from core.matalg import gram_operator
from core.diffstruct import DifferentialStructure, is_ergodic, semigroup_apply
from core.transport import ThetaAssignment, comparison_constants, distance, k_matrix, w1
from core.entropyflow import entropy, fisher, ricci_estimate

logger = logging.getLogger("FuncIneq")


@dataclass
class ConstantEstimate:
    value:    float
    method:   str
    samples:  int = 0
    witness:  Optional[np.ndarray] = None
    residual: float = 0.0
    extra:    Dict = field(default_factory=dict)

    def to_dict(self):
        return {"value": self.value, "method": self.method, "samples": self.samples,
                "residual": self.residual, **self.extra}


def _states(ds, rng, samples):
    """Dirichlet spectra with Haar unitaries; every fourth sample boundary-biased."""
    return [ds.algebra.random_density(rng, boundary=(k % 4 == 3)).matrix for k in range(int(samples))]


def _exp_state(alg, h):
    E = spectral(alg.from_coords(h)).apply(np.exp)
    return E / alg.tau(E).real


def _require_ergodic(ds, what):
    ds.require_validated()
    if not is_ergodic(ds):
        raise ErgodicityError(f"{what} requires ergodicity")


# ─── MLSI ────────────────────────────────────────────────────────────────────

def mlsi_ratio(ds, rho):
    """ℐ_σ(ρ) / (2 Ent_σ(ρ)); inf when Ent_σ(ρ) ≤ ENTROPY_FLOOR."""
    ent = entropy(ds.sigma, rho)
    if ent <= config.ENTROPY_FLOOR:
        return np.inf
    return fisher(ds, rho) / (2.0 * ent)


def entropy_decay_fit(ds, rho, t_max=2.0, points=20):
    """Fitted rate r in Ent(𝒫_t†ρ) ≈ C e^{−2rt}."""
    times = np.linspace(0.0, t_max, points)
    ents = np.array([entropy(ds.sigma, semigroup_apply(ds, t, rho, dual=True)) for t in times])
    keep = ents > 1e-13
    if keep.sum() < 3:
        return np.inf
    fit = scipy.stats.linregress(times[keep], np.log(ents[keep]))
    return float(-fit.slope / 2.0)


def mlsi_constant(ds: DifferentialStructure, samples=None, seed=0, refine=3, trajectories=3) -> ConstantEstimate:
    """inf over sampled ρ of ℐ/(2·Ent), refined locally; cross-checked by
    linearization near σ and by entropy-decay fits."""
    _require_ergodic(ds, "MLSI estimate")
    samples = config.INEQ_SAMPLES if samples is None else int(samples)
    rng = np.random.default_rng(seed)
    alg = ds.algebra
    scored = []
    for R in _states(ds, rng, samples):
        try:
            scored.append((mlsi_ratio(ds, R), R))
        except (SingularStateError, MeanDomainError):
            continue
    if not scored:
        raise ConvergenceError("no admissible MLSI samples")
    scored.sort(key=lambda t: t[0])
    best, witness = scored[0]

    for val, R in scored[:refine]:
        h0 = alg.coords(spectral(R).apply(np.log)).real

        def objective(h):
            try:
                return mlsi_ratio(ds, _exp_state(alg, h))
            except (SingularStateError, MeanDomainError):
                return np.inf

        opt = scipy.optimize.minimize(objective, h0, method="Nelder-Mead",
                                      options={"maxiter": 200 * alg.dim, "fatol": 1e-12, "xatol": 1e-9})
        if opt.fun < best:
            best, witness = float(opt.fun), _exp_state(alg, opt.x)

    lin = np.inf
    for _ in range(4):
        H = alg.random_hermitian(rng)
        H = H - alg.tau(H).real * ds.sigma.matrix
        H /= max(np.linalg.norm(H, 2), 1e-300)
        lin = min(lin, mlsi_ratio(ds, ds.sigma.matrix + 1e-3 * np.linalg.eigvalsh(ds.sigma.matrix).min() * H))

    decay = min(entropy_decay_fit(ds, R) for _, R in scored[:max(1, trajectories)])
    logger.info("MLSI: λ̂ = %.8g (linearized %.6g, decay fit %.6g)", best, lin, decay)
    return ConstantEstimate(float(best), "sampling+nelder-mead", samples, witness, 0.0,
                            {"linearized": float(lin), "decay_rate": float(decay)})


# ─── Poincaré ────────────────────────────────────────────────────────────────

def poincare_constant(ds: DifferentialStructure, theta: Optional[ThetaAssignment] = None) -> ConstantEstimate:
    """Smallest generalized eigenvalue of (‖∇·‖²_σ, ‖·‖²_BKM) on the BKM
    complement of 1."""
    _require_ergodic(ds, "Poincaré constant")
    alg = ds.algebra
    theta = theta or ThetaAssignment.default(ds)
    K = k_matrix(ds, theta, ds.sigma.matrix)
    G = np.real(gram_operator(ds.sigma, "bkm"))
    G = 0.5 * (G + G.T)
    u = alg.coords(alg.unit()).real
    C = scipy.linalg.null_space((G @ u)[None, :])
    vals, vecs = scipy.linalg.eigh(C.T @ K @ C, C.T @ G @ C)
    witness = alg.from_coords(C @ vecs[:, 0])
    logger.info("Poincaré constant %.12g", vals[0])
    return ConstantEstimate(float(vals[0]), "generalized-eigenproblem", 0, witness)


# ─── Transport inequalities ──────────────────────────────────────────────────

def hwi_check(ds, kappa, rho, theta=None, options=None):
    """rhs − lhs of Ent ≤ 𝒲√ℐ − (κ/2)𝒲²."""
    theta = theta or ThetaAssignment.default(ds)
    d = distance(ds, theta, rho, ds.sigma.matrix, options=options)
    ent = entropy(ds.sigma, rho)
    rhs = d.value * np.sqrt(max(fisher(ds, rho), 0.0)) - 0.5 * kappa * d.value ** 2
    slack = 2 * max(d.primal_residual, config.PRIMAL_TOL) * max(1.0, abs(rhs))
    return {"lhs": ent, "rhs": float(rhs), "residual": float(rhs - ent), "slack": float(slack),
            "holds": rhs - ent >= -slack}


def talagrand_check(ds, lam, rho, theta=None, options=None):
    """√((2/λ)Ent) − 𝒲(ρ,σ)."""
    theta = theta or ThetaAssignment.default(ds)
    d = distance(ds, theta, rho, ds.sigma.matrix, options=options)
    bound = float(np.sqrt(2.0 * max(entropy(ds.sigma, rho), 0.0) / lam))
    slack = 2 * max(d.primal_residual, config.PRIMAL_TOL) * max(1.0, bound)
    return {"distance": d.value, "bound": bound, "residual": bound - d.value, "slack": float(slack),
            "holds": bound - d.value >= -slack}


def t1_check(ds, lam, rho, M=1.0):
    """√((2M²/λ)Ent) − W₁(ρ,σ); with M from the comparison lemma T𝒲(λ) gives T₁(λ/M²)."""
    val = w1(ds, rho, ds.sigma.matrix)
    bound = float(M * np.sqrt(2.0 * max(entropy(ds.sigma, rho), 0.0) / lam))
    return {"w1": val, "bound": bound, "residual": bound - val, "holds": bound - val >= -1e-8}


def entropy_decay_check(ds, lam, rho, times, slack=1e-6):
    """Ent(𝒫_t†ρ) ≤ e^{−2λt}Ent(ρ) along ``times``."""
    e0 = entropy(ds.sigma, rho)
    rows = []
    for t in times:
        e = entropy(ds.sigma, semigroup_apply(ds, t, rho, dual=True))
        rows.append({"t": float(t), "entropy": e, "bound": float(np.exp(-2 * lam * t) * e0)})
    holds = all(r["entropy"] <= r["bound"] + slack for r in rows)
    return {"lambda": lam, "rows": rows, "holds": holds}


# ─── Chain report ────────────────────────────────────────────────────────────

@dataclass
class InequalityReport:
    structure_id: str
    constants:    Dict[str, ConstantEstimate]
    chain:        Dict[str, bool]
    runtimes:     Dict[str, float]

    def to_dict(self, with_witnesses=False):
        out = {
            "structure_id": self.structure_id,
            "constants": {k: v.value for k, v in self.constants.items()},
            "methods": {k: v.method for k, v in self.constants.items()},
            "details": {k: v.to_dict() for k, v in self.constants.items()},
            "chain": self.chain,
            "runtimes": self.runtimes,
        }
        if with_witnesses:
            out["witnesses"] = {
                k: [[[float(z.real), float(z.imag)] for z in row] for row in np.asarray(v.witness)]
                for k, v in self.constants.items() if v.witness is not None
            }
        return out


def inequality_chain(ds: DifferentialStructure, theta=None, samples=None, transport_samples=None,
                     seed=0, options=None, tol=1e-6) -> InequalityReport:
    """Ric → MLSI → T𝒲 → (P, T₁) with every constant estimated independently."""
    theta = theta or ThetaAssignment.default(ds)
    runtimes, constants = {}, {}

    def timed(name, fn):
        start = time.perf_counter()
        out = fn()
        runtimes[name] = time.perf_counter() - start
        return out

    ric = timed("ric", lambda: ricci_estimate(ds, theta, samples, seed=seed))
    constants["ric"] = ConstantEstimate(ric.lambda_hat, ric.method, ric.samples, None, ric.residual,
                                        {"label": ric.label, "certificate": ric.certificate})
    constants["mlsi"] = timed("mlsi", lambda: mlsi_constant(ds, samples, seed))
    constants["poincare"] = timed("poincare", lambda: poincare_constant(ds, theta))

    rng = np.random.default_rng(seed + 1)
    transport_samples = config.INEQ_SAMPLES if transport_samples is None else int(transport_samples)
    states = _states(ds, rng, transport_samples)

    def transport_constants():
        tal, t1v, tal_w, t1_w = np.inf, np.inf, None, None
        for R in states:
            ent = entropy(ds.sigma, R)
            d = distance(ds, theta, R, ds.sigma.matrix, options=options).value
            a = w1(ds, R, ds.sigma.matrix)
            if d > 1e-12 and 2 * ent / d ** 2 < tal:
                tal, tal_w = 2 * ent / d ** 2, R
            if a > 1e-12 and 2 * ent / a ** 2 < t1v:
                t1v, t1_w = 2 * ent / a ** 2, R
        return (ConstantEstimate(float(tal), "sampling", len(states), tal_w),
                ConstantEstimate(float(t1v), "sampling", len(states), t1_w))

    constants["talagrand"], constants["t1"] = timed("transport", transport_constants)
    M = timed("comparison", lambda: comparison_constants(ds, theta, samples=20, seed=seed)).M

    lam = constants["mlsi"].value
    chain = {
        "ric_le_mlsi": ric.lambda_hat <= lam + tol,
        "decay_at_mlsi": constants["mlsi"].extra["decay_rate"] >= lam - config.DECAY_SLACK,
        "talagrand_at_mlsi": constants["talagrand"].value >= lam - tol,
        "poincare_at_talagrand": constants["poincare"].value >= min(lam, constants["talagrand"].value) - tol,
        "t1_at_talagrand": constants["t1"].value >= min(lam, constants["talagrand"].value) / M ** 2 - tol,
    }
    for k, ok in chain.items():
        if not ok:
            logger.warning("inequality chain link %s fails on the samples", k)
    return InequalityReport(ds.name, constants, chain, runtimes)
