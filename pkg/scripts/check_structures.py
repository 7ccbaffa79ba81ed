"""
scripts/check_structures.py
Builder and calculus diagnostics, one PASS/FAIL line per check.

    python scripts/check_structures.py
"""
import sys, os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np

from shared.config import VALIDATION_TOL, INTERTWINING_TOL
from core.builders import BUILDERS, random_lindblad
from core.diffstruct import generator, is_ergodic, semigroup_cp_check
from core.transport import ThetaAssignment, phi_form_agreement, k_derivative_check
from core.entropyflow import chain_rule_log_residual, hessian_form_agreement, intertwining_report

results = []

def check(label, ok, detail=""):
    icon = "PASS" if ok else "FAIL"
    print(f"  [{icon}]  {label}")
    if detail:
        print(f"          -> {detail}")
    results.append(ok)
    return ok


print("")
print("==============================================")
print("  QMS  -  Structure Diagnostics")
print("==============================================")

rng = np.random.default_rng(0)
structures = {}

# ── 1. Builders ───────────────────────────────────────────────────────────────
print("\n--- 1. Builders ---")
recipes = {
    "depolarizing M2":  lambda: BUILDERS["depolarizing"](1.0, 2),
    "depolarizing M3":  lambda: BUILDERS["depolarizing"](0.7, 3),
    "two-point chain":  lambda: BUILDERS["markov_graph"]([[0, 1], [1, 0]], [0.5, 0.5]),
    "markov lindblad":  lambda: BUILDERS["markov_lindblad"]([[0, 2], [1, 0]], [1 / 3, 2 / 3]),
    "hypercube n=2":    lambda: BUILDERS["hypercube"](2),
    "fermion n=2":      lambda: BUILDERS["fermion_ou"](2),
    "random lindblad":  lambda: random_lindblad(rng, 3),
}
for label, make in recipes.items():
    try:
        ds = make()
        structures[label] = ds
        check(f"{label:<18} validated", ds.validated, f"{len(ds.directions)} directions, dim {ds.algebra.dim}")
    except Exception as e:
        check(f"{label:<18} validated", False, str(e))

# ── 2. Semigroup ──────────────────────────────────────────────────────────────
print("\n--- 2. Semigroup ---")
for label, ds in structures.items():
    L = generator(ds).matrix
    cp = semigroup_cp_check(ds, 0.5)
    check(f"{label:<18} ergodic, CP at t=0.5", is_ergodic(ds) and cp["passed"],
          f"|L| = {np.linalg.norm(L):.3e}, Choi min eig {cp['choi_min_eig']:.2e}")

# ── 3. Metric calculus ────────────────────────────────────────────────────────
print("\n--- 3. Metric calculus ---")
for label, ds in structures.items():
    theta = ThetaAssignment.default(ds)
    rho = ds.algebra.random_density(rng).matrix
    A = ds.algebra.random_hermitian(rng)
    B = ds.algebra.random_hermitian(rng)
    B = B - ds.algebra.tau(B).real * ds.algebra.unit()
    try:
        agree = phi_form_agreement(ds, theta, rho, A)
        dk = k_derivative_check(ds, theta, rho, A, B)
        check(f"{label:<18} Phi forms / dK", agree < 1e-8 and dk["phi_residual"] < 1e-7,
              f"forms {agree:.2e}, phi vs exact {dk['phi_residual']:.2e}, fd {dk['fd_residual']:.2e}")
        chain = max(chain_rule_log_residual(ds, rho), default=0.0)
        check(f"{label:<18} log chain rule", chain < 1e-8, f"{chain:.2e}")
        hess = hessian_form_agreement(ds, rho)
        check(f"{label:<18} Hessian forms", hess < 1e-7, f"{hess:.2e}")
    except Exception as e:
        check(f"{label:<18} metric calculus", False, str(e))

# ── 4. Intertwining ───────────────────────────────────────────────────────────
print("\n--- 4. Intertwining ---")
expected = {"depolarizing M2": 0.0, "depolarizing M3": 0.0, "fermion n=2": 4.0}
for label, ds in structures.items():
    rep = intertwining_report(ds)
    if rep["lambda"] is None:
        print(f"  [SKIP]  {label:<18} {rep['reason']}")
        continue
    if label not in expected:
        print(f"  [INFO]  {label:<18} lambda = {rep['lambda']:.6g}, residual {rep['residual']:.2e}")
        continue
    check(f"{label:<18} lambda = {rep['lambda']:.6g}",
          rep["residual"] <= INTERTWINING_TOL and abs(rep["lambda"] - expected[label]) < 1e-8,
          f"expected {expected[label]:g}, residual {rep['residual']:.2e}")

print("\n==============================================")
passed = sum(results)
print(f"  {passed}/{len(results)} checks passed  (tol {VALIDATION_TOL:g})")
print("==============================================")
sys.exit(0 if all(results) else 1)
