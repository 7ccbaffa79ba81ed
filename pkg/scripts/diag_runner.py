"""
scripts/diag_runner.py
Run the closed-form checks and save the report as diag_report.json beside this script.
"""
import sys, os, json, time
import numpy as np
import scipy.integrate
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from shared.config import GRID_N, PRIMAL_TOL
from core.opcalc import logarithmic
from core.builders import BUILDERS
from core.transport import ThetaAssignment, SolverOptions, comparison_constants, distance, geodesic_shoot, w1
from core.entropyflow import ricci_estimate, ricci_scan
from core.funcineq import inequality_chain, poincare_constant

report = {}
chain = BUILDERS["markov_graph"]([[0.0, 1.0], [1.0, 0.0]], [0.5, 0.5])
depol = BUILDERS["depolarizing"](1.0, 2)
rho0 = np.diag([1.8, 0.2]).astype(complex)
rho1 = np.diag([0.2, 1.8]).astype(complex)

# 1. Two-point chain distance against the 1-D integral
try:
    lam = logarithmic()
    exact, _ = scipy.integrate.quad(lambda x: 1.0 / np.sqrt(lam.value(x, 1.0 - x)), 0.1, 0.9)
    start = time.perf_counter()
    res = distance(chain, ThetaAssignment.default(chain), rho0, rho1, options=SolverOptions(grid_n=64))
    report["chain_distance"] = {
        "value": res.value, "exact": exact, "relative_error": abs(res.value - exact) / exact,
        "converged": res.converged, "grid_n": res.grid_n, "runtime": time.perf_counter() - start,
    }
except Exception as e:
    report["chain_distance_error"] = str(e)

# 2. W1 and comparison constants
try:
    report["chain_w1"] = {"value": w1(chain, rho0, rho1), "exact": 0.8 * np.sqrt(2.0)}
    cc = comparison_constants(chain, ThetaAssignment.default(chain), samples=30)
    report["chain_comparison"] = {**cc.to_dict(), "N_exact": np.sqrt(2.0)}
except Exception as e:
    report["chain_w1_error"] = str(e)

# 3. Poincare constants
try:
    report["poincare"] = {
        "chain": poincare_constant(chain).value, "chain_exact": 2.0,
        "depolarizing": poincare_constant(depol).value, "depolarizing_exact": 1.0,
    }
except Exception as e:
    report["poincare_error"] = str(e)

# 4. Ricci lower bounds
try:
    fermion = BUILDERS["fermion_ou"](2)
    cert = ricci_estimate(fermion)
    scan = ricci_scan(depol, samples=40, refine=2)
    report["ricci"] = {
        "fermion": cert.to_dict(), "fermion_exact": 4.0,
        "depolarizing": scan.to_dict(), "depolarizing_floor": 0.5,
    }
except Exception as e:
    report["ricci_error"] = str(e)

# 5. Inequality chain
try:
    rep = inequality_chain(chain, samples=30, transport_samples=3)
    out = rep.to_dict()
    out.pop("details")
    report["inequality_chain"] = out
except Exception as e:
    report["inequality_chain_error"] = str(e)

# 6. Geodesic energy conservation
try:
    A0 = 0.1 * np.diag([1.0, -1.0]).astype(complex)
    curve = geodesic_shoot(depol, ThetaAssignment.default(depol), depol.sigma.matrix, A0, 1.0, 100)
    report["geodesic"] = {"energy_drift": curve.meta["energy_drift"], "aborted": curve.meta["aborted"]}
except Exception as e:
    report["geodesic_error"] = str(e)

# 7. Tolerances
report["grid_n"]     = GRID_N
report["primal_tol"] = PRIMAL_TOL

# Save report
out = os.path.join(os.path.dirname(os.path.abspath(__file__)), "diag_report.json")
with open(out, 'w') as f:
    json.dump(report, f, indent=2, default=float)

print("Report written to:", out)
print(json.dumps(report, indent=2, default=float))
