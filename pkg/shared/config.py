import os

# Base Directory (Project Root)
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DATA_DIR = os.path.join(BASE_DIR, "data")

# ─── Scenario Files ───────────────────────────────────────────────────────────
SCENARIO_DIR = os.path.join(DATA_DIR, "scenarios")
RESULTS_DIR  = os.path.join(DATA_DIR, "results")

# ─── Workers ──────────────────────────────────────────────────────────────────
# Task-level parallelism for the CLI and sample-parallel scans
QMS_THREADS = max(1, int(os.environ.get("QMS_THREADS", "1")))

# ─── Linear Algebra ───────────────────────────────────────────────────────────
EIG_CLUSTER_TOL    = 1e-9    # relative to ||A||; merges eigenvalues into one projector
HERMITIAN_TOL      = 1e-12   # relative asymmetry accepted (and symmetrized) as Hermitian
SIGMA_MIN_EIG      = 1e-12   # smallest admitted eigenvalue of a reference state
MEMBERSHIP_TOL     = 1e-10   # algebra membership check
LOG_MEAN_SERIES    = 1e-4    # |log(r/s)| below which mean functions switch to series
QUADRATURE_NODES   = 64      # Gauss-Legendre nodes for power-difference derivatives

# ─── Structure Validation ─────────────────────────────────────────────────────
VALIDATION_TOL      = 1e-9
MULTIPLICATIVE_PAIRS = 20
RANK_TOL            = 1e-9
CLIFFORD_MAX_N      = 6

# ─── Transport Solver ─────────────────────────────────────────────────────────
GRID_N          = 16
MAX_ITER        = 500
PRIMAL_TOL      = 1e-7
CONSTRAINT_TOL  = 1e-8
EPS_BOUNDARY    = 1e-6
EPS_LADDER      = (1e-4, 1e-5, 1e-6)
PINV_RCOND      = 1e-11
LBFGS_MEMORY    = 8

# ─── Geodesics ────────────────────────────────────────────────────────────────
GEODESIC_MIN_EIG    = 1e-10
GEODESIC_DRIFT_TOL  = 1e-7   # per-step relative energy change before halving the step

# ─── Curvature & Inequalities ─────────────────────────────────────────────────
RICCI_SAMPLES       = 200
RICCI_REFINE        = 5
INEQ_SAMPLES        = 100
DECAY_SLACK         = 5e-5   # decay-fit rate may fall this far below the MLSI estimate
ENTROPY_FLOOR       = 1e-9   # MLSI ratios are not formed below this relative entropy
BOUNDARY_EIG        = 1e-6
INTERTWINING_TOL    = 1e-9
