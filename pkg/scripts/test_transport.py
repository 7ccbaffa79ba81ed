"""Transport metric and distance — run from project root: pytest scripts/test_transport.py"""
import sys, os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import numpy as np
import pytest
import scipy.integrate
from numpy.testing import assert_allclose

from shared.errors import NonConvexThetaError, NotConnectedError, RangeError, UnvalidatedStructureError
from core.opcalc import logarithmic, power_mean
from core.builders import BUILDERS, random_lindblad
from core.diffstruct import validate_structure
from core.transport import (
    SolverOptions, TangentField, ThetaAssignment, action, action_convexity_check, boundary_precondition,
    compare_representations, comparison_constants, distance, distance_matrix, geodesic_shoot, inner_rho,
    k_derivative_check, k_matrix, metric_operator, norm_B2, norm_minus1_rho, norm_rho, phi_form_agreement,
    rho_check, rho_hat, solve_continuity, triangle_check, w1,
)

RHO0 = np.diag([1.8, 0.2]).astype(complex)
RHO1 = np.diag([0.2, 1.8]).astype(complex)


def chain_distance_exact(x0, x1):
    lam = logarithmic()
    value, _ = scipy.integrate.quad(lambda x: 1.0 / np.sqrt(lam.value(x, 1.0 - x)), x0, x1, limit=200)
    return value


@pytest.fixture(scope="module")
def chain():
    return BUILDERS["markov_graph"]([[0.0, 1.0], [1.0, 0.0]], [0.5, 0.5])


@pytest.fixture(scope="module")
def thermal():
    E01 = np.array([[0, 1], [0, 0]], dtype=complex)
    return BUILDERS["lindblad"]([0.5 * E01, 0.5 * E01.conj().T], np.diag([1.5, 0.5]))


@pytest.fixture(scope="module")
def lindblad3():
    return random_lindblad(np.random.default_rng(5), 3)


@pytest.fixture
def rng():
    return np.random.default_rng(31)


# ─── θ and the metric operator ───────────────────────────────────────────────

def test_default_theta_is_symmetric_under_star(thermal, lindblad3):
    for ds in (thermal, lindblad3):
        assert ThetaAssignment.default(ds).check(ds)["passed"]


def test_k_matrix_matches_metric_operator(lindblad3, rng):
    ds = lindblad3
    theta = ThetaAssignment.default(ds)
    rho = ds.algebra.random_density(rng).matrix
    A = ds.algebra.random_hermitian(rng)
    K = k_matrix(ds, theta, rho)
    assert_allclose(K, K.T, atol=1e-12)
    assert np.linalg.eigvalsh(K).min() > -1e-10
    assert_allclose(ds.algebra.coords(metric_operator(ds, theta, rho, A)).real,
                    K @ ds.algebra.coords(A).real, atol=1e-10)


def test_solve_continuity_inverts_metric_operator(thermal, rng):
    ds = thermal
    theta = ThetaAssignment.default(ds)
    rho = ds.algebra.random_density(rng).matrix
    nu = ds.algebra.random_hermitian(rng)
    nu = nu - ds.algebra.tau(nu).real * ds.algebra.unit()
    A = solve_continuity(ds, theta, rho, nu)
    assert_allclose(metric_operator(ds, theta, rho, A), nu, atol=1e-9)


def test_solve_continuity_rejects_mass_change(thermal):
    theta = ThetaAssignment.default(thermal)
    with pytest.raises(RangeError, match="divergence range"):
        solve_continuity(thermal, theta, thermal.sigma.matrix, np.eye(2, dtype=complex))


def test_action_of_optimal_field_is_metric_energy(lindblad3, rng):
    ds = lindblad3
    theta = ThetaAssignment.default(ds)
    rho = ds.algebra.random_density(rng).matrix
    grad = TangentField.gradient(ds, ds.algebra.random_hermitian(rng))
    hats = rho_hat(ds, theta, rho)
    B = TangentField(tuple(h.contract(g) for h, g in zip(hats, grad)))
    assert_allclose(action(ds, theta, rho, B), norm_rho(ds, theta, rho, grad) ** 2, rtol=1e-9)
    assert_allclose(inner_rho(ds, theta, rho, grad, grad).real, norm_rho(ds, theta, rho, grad) ** 2, rtol=1e-12)


def test_inverse_multiplier_undoes_rho_hat(lindblad3, rng):
    ds = lindblad3
    theta = ThetaAssignment.default(ds)
    rho = ds.algebra.random_density(rng).matrix
    grad = TangentField.gradient(ds, ds.algebra.random_hermitian(rng))
    hats, checks = rho_hat(ds, theta, rho), rho_check(ds, theta, rho)
    for h, c, g in zip(hats, checks, grad):
        assert_allclose(c.contract(h.contract(g)), g, atol=1e-10)
    B = TangentField(tuple(h.contract(g) for h, g in zip(hats, grad)))
    assert_allclose(norm_minus1_rho(ds, theta, rho, B), norm_rho(ds, theta, rho, grad), rtol=1e-9)


def test_action_is_jointly_convex_on_samples(thermal):
    assert action_convexity_check(thermal, ThetaAssignment.default(thermal), samples=10)["passed"]


# ─── First variation ─────────────────────────────────────────────────────────

@pytest.mark.parametrize("name", ["thermal", "lindblad3", "chain"])
def test_phi_forms_and_directional_derivative(name, request, rng):
    ds = request.getfixturevalue(name)
    theta = ThetaAssignment.default(ds)
    alg = ds.algebra
    rho = alg.random_density(rng).matrix
    A = alg.random_hermitian(rng)
    B = alg.random_hermitian(rng)
    B = B - alg.tau(B).real * alg.unit()
    assert phi_form_agreement(ds, theta, rho, A) < 1e-9
    out = k_derivative_check(ds, theta, rho, A, B)
    assert out["phi_residual"] < 1e-8
    assert out["fd_residual"] < 1e-5


# ─── Distance ────────────────────────────────────────────────────────────────

def test_two_point_chain_distance_matches_integral(chain):
    theta = ThetaAssignment.default(chain)
    res = distance(chain, theta, RHO0, RHO1, grid_n=64)
    assert res.converged
    assert_allclose(res.value, chain_distance_exact(0.1, 0.9), rtol=1e-3)
    back = distance(chain, theta, RHO1, RHO0, grid_n=64)
    assert_allclose(back.value, res.value, rtol=1e-6)


def test_distance_to_itself_is_zero(chain):
    assert distance(chain, ThetaAssignment.default(chain), RHO0, RHO0).value == 0.0


def test_boundary_endpoint_uses_extrapolation(chain):
    theta = ThetaAssignment.default(chain)
    res = distance(chain, theta, np.diag([2.0, 0.0]), np.eye(2), grid_n=32)
    assert res.epsilon == 0.0
    assert len(res.curve.meta["eps_ladder"]) == 3
    assert_allclose(res.value, chain_distance_exact(0.5, 1.0), rtol=3e-2)


def test_distance_matrix_is_symmetric(chain):
    theta = ThetaAssignment.default(chain)
    states = [RHO0, np.eye(2, dtype=complex), RHO1]
    W, R, ok = distance_matrix(chain, theta, states, options=SolverOptions(grid_n=16), workers=2)
    assert ok.all()
    assert_allclose(W, W.T)
    assert_allclose(np.diag(W), 0.0)
    assert W[0, 2] <= (W[0, 1] + W[1, 2]) * (1 + 1e-3)


def test_triangle_inequality_on_qubit(thermal, rng):
    alg = thermal.algebra
    triples = [tuple(alg.random_density(rng).matrix for _ in range(3))]
    out = triangle_check(thermal, ThetaAssignment.default(thermal), triples, SolverOptions(grid_n=16))
    assert out["max_excess"] <= 1e-2


def test_chain_distance_satisfies_continuity(chain):
    res = distance(chain, ThetaAssignment.default(chain), RHO0, RHO1, grid_n=32)
    assert res.converged
    assert res.constraint_residual < 1e-6
    assert res.to_dict()["constraint_residual"] == res.constraint_residual


def test_triangle_inequality_on_chain_triples(chain):
    rng = np.random.default_rng(50)
    xs = rng.uniform(0.05, 0.95, size=(50, 3))
    triples = [tuple(np.diag([2 * x, 2 * (1 - x)]).astype(complex) for x in row) for row in xs]
    out = triangle_check(chain, ThetaAssignment.default(chain), triples, SolverOptions(grid_n=16))
    assert out["triples"] == 50
    assert out["max_excess"] <= 1e-2


def test_chain_representations_share_a_generator(chain):
    lind = BUILDERS["markov_lindblad"]([[0.0, 1.0], [1.0, 0.0]], [0.5, 0.5])
    out = compare_representations(chain, lind, [RHO0, RHO1], options=SolverOptions(grid_n=8))
    assert out["generator_residual"] < 1e-10
    assert len(out["table_a"]) == 2


def test_nonconvex_mean_needs_opt_in(chain):
    theta = ThetaAssignment.power(chain, 3.0)
    with pytest.raises(NonConvexThetaError):
        distance(chain, theta, RHO0, RHO1)
    res = distance(chain, theta, RHO0, RHO1, options=SolverOptions(grid_n=8, allow_nonconvex=True))
    assert res.value > 0


def test_disconnected_endpoints_raise():
    half = BUILDERS["hypercube"](2).without_direction(1)
    validate_structure(half)
    theta = ThetaAssignment.default(half)
    with pytest.raises(NotConnectedError, match="not connected"):
        distance(half, theta, np.eye(4), np.diag([1.5, 1.5, 0.5, 0.5]))


def test_unvalidated_structure_is_refused(chain):
    broken = chain.with_direction(0, omega=0.5)
    with pytest.raises(UnvalidatedStructureError):
        distance(broken, ThetaAssignment.default(broken), RHO0, RHO1)


# ─── Geodesics ───────────────────────────────────────────────────────────────

def test_geodesic_conserves_energy(thermal):
    theta = ThetaAssignment.default(thermal)
    A0 = 0.1 * np.array([[1, 0.3], [0.3, -1]], dtype=complex)
    curve = geodesic_shoot(thermal, theta, thermal.sigma.matrix, A0, T=1.0, steps=100)
    assert not curve.meta["aborted"]
    assert curve.meta["energy_drift"] < 1e-5
    assert_allclose(curve.times[-1], 1.0)
    for R in curve.states:
        assert_allclose(thermal.algebra.tau(R), 1.0, atol=1e-10)
    row = curve.export()[0]
    assert set(row) == {"t", "rho", "A"}


# ─── W₁ and comparison constants ─────────────────────────────────────────────

def test_w1_on_two_point_chain(chain):
    assert_allclose(w1(chain, RHO0, RHO1), 0.8 * np.sqrt(2.0), rtol=1e-6)


def test_w1_is_below_transport_distance(chain):
    W = distance(chain, ThetaAssignment.default(chain), RHO0, RHO1, grid_n=16).value
    cc = comparison_constants(chain, ThetaAssignment.default(chain), samples=20)
    assert cc.M == 1.0 and cc.arithmetic_bound
    assert w1(chain, RHO0, RHO1) <= cc.M * W + 1e-8


def test_comparison_constant_n_on_chain(chain):
    cc = comparison_constants(chain, ThetaAssignment.default(chain), samples=30)
    assert_allclose(cc.N, np.sqrt(2.0), rtol=1e-4)


def test_norm_b2_of_gradient(chain):
    A = np.diag([0.0, 1.0]).astype(complex)
    assert_allclose(norm_B2(chain, TangentField.gradient(chain, A)), 1.0 / np.sqrt(2.0), rtol=1e-12)


def test_boundary_precondition():
    assert boundary_precondition(logarithmic())["C"] >= 1.0 - 1e-12
    assert boundary_precondition(power_mean(-1.0))["passed"]
