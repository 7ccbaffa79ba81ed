"""Functional calculus — run from project root: pytest scripts/test_opcalc.py"""
import sys, os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import numpy as np
import pytest
from numpy.testing import assert_allclose

from shared.errors import ChannelError, MeanDomainError, NotHermitianError, TreeShapeError
from core.opcalc import (
    EXP, IDENTITY, LOG, SQUARE, XLOGX, arithmetic, chain_partial, convexity_probe, cptp_contractivity_probe,
    delta_f, discrete_derivative, doubsum, entropy_second_derivative, entropy_second_derivative_quadrature,
    flow_mean, frechet_derivative, hermitize, logarithmic, mean_eval, power_mean, product_mean, quasi_entropy,
    random_kraus, spectral, tilted_log, tree_coefficients, tree_delta,
)


def random_positive(rng, n):
    X = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return X @ X.conj().T + 0.3 * np.eye(n)


def random_hermitian(rng, n):
    X = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return 0.5 * (X + X.conj().T)


# ─── Spectral ────────────────────────────────────────────────────────────────

def test_hermitize_rejects_asymmetric():
    with pytest.raises(NotHermitianError, match="asymmetry"):
        hermitize(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_spectral_clusters_near_degenerate_eigenvalues():
    S = spectral(np.diag([1.0, 1.0 + 1e-13, 2.0]))
    assert S.cluster_count == 2
    assert_allclose(S.values, [1.0, 1.0, 2.0], atol=1e-12)
    assert_allclose(sum(S.projectors), np.eye(3), atol=1e-12)


def test_spectral_apply_reconstructs():
    rng = np.random.default_rng(1)
    A = random_hermitian(rng, 4)
    assert_allclose(spectral(A).reconstruct(), A, atol=1e-12)


# ─── Means ───────────────────────────────────────────────────────────────────

def test_logarithmic_mean_closed_form_and_diagonal():
    lam = logarithmic()
    assert_allclose(lam.value(np.e, 1.0), np.e - 1.0, rtol=1e-13)
    assert_allclose(lam.value(2.5, 2.5), 2.5, rtol=1e-14)
    # continuous across the series switch
    assert_allclose(lam.value(1.0 + 1e-6, 1.0), 1.0 + 5e-7, rtol=1e-12)


@pytest.mark.parametrize("m, expected", [
    (2.0, lambda r, s: 0.5 * (r + s)),
    (-1.0, lambda r, s: 2 * r * s / (r + s)),
    (0.5, lambda r, s: np.sqrt(r * s)),
])
def test_power_mean_special_cases(m, expected):
    r = np.array([0.3, 1.0, 4.0, 7.0])
    s = np.array([2.0, 1.0, 0.5, 6.9])
    assert_allclose(power_mean(m).value(r, s), expected(r, s), rtol=1e-10)


def test_tilted_log_shifts_arguments():
    beta = 0.7
    assert_allclose(tilted_log(beta).value(2.0, 3.0),
                    logarithmic().value(np.exp(-beta / 2) * 2.0, np.exp(beta / 2) * 3.0), rtol=1e-13)


@pytest.mark.parametrize("theta", [logarithmic(), power_mean(0.5), power_mean(3.0), tilted_log(-0.4)])
@pytest.mark.parametrize("r, s", [(0.4, 2.2), (1.3, 1.3 + 1e-3), (3.0, 3.0)])
def test_mean_partials_match_finite_differences(theta, r, s):
    h = 1e-5
    d1 = (theta.value(r + h, s) - theta.value(r - h, s)) / (2 * h)
    d2 = (theta.value(r, s + h) - theta.value(r, s - h)) / (2 * h)
    assert_allclose(theta.partial(r, s, "1"), d1, rtol=1e-6, atol=1e-8)
    assert_allclose(theta.partial(r, s, "2"), d2, rtol=1e-6, atol=1e-8)
    d12 = (theta.partial(r, s + h, "1") - theta.partial(r, s - h, "1")) / (2 * h)
    assert_allclose(theta.partial(r, s, "12"), d12, rtol=1e-5, atol=1e-7)


def test_mean_rejects_nonpositive_arguments():
    with pytest.raises(MeanDomainError, match="undefined"):
        logarithmic().value(-1.0, 2.0)


def test_flow_mean_recovers_logarithmic_for_relative_entropy():
    theta = flow_mean(lambda x: x, lambda x: np.ones_like(x), lambda x: np.log(x) + 1.0,
                      lambda x: 1.0 / x)
    r = np.array([0.5, 2.0, 3.0])
    s = np.array([1.5, 2.0, 0.1])
    assert_allclose(theta.value(r, s), logarithmic().value(r, s), rtol=1e-10)


# ─── Discrete derivatives ────────────────────────────────────────────────────

def test_discrete_derivative_confluent_limit():
    assert_allclose(discrete_derivative(LOG, 2.0, 2.0), 0.5)
    assert_allclose(discrete_derivative(LOG, 2.0, 3.0), np.log(1.5), rtol=1e-13)
    assert_allclose(discrete_derivative(XLOGX, 1.0, 1.0), 1.0)


def test_frechet_derivative_matches_finite_difference():
    rng = np.random.default_rng(2)
    A, H = random_hermitian(rng, 3), random_hermitian(rng, 3)
    h = 1e-6
    fd = (spectral(A + h * H).apply(np.exp) - spectral(A - h * H).apply(np.exp)) / (2 * h)
    assert_allclose(frechet_derivative(EXP, A, H), fd, atol=1e-7)


def test_entropy_second_derivative_matches_finite_difference():
    rng = np.random.default_rng(3)
    rho = random_positive(rng, 3)
    nu = random_hermitian(rng, 3)

    def f(t):
        return np.trace(spectral(rho + t * nu).apply(lambda x: x * np.log(x))).real

    h = 1e-4
    fd = (f(h) - 2 * f(0.0) + f(-h)) / h ** 2
    assert_allclose(entropy_second_derivative(rho, nu), fd, rtol=1e-5)


def test_entropy_second_derivative_matches_resolvent_integral():
    rng = np.random.default_rng(9)
    for _ in range(10):
        rho = random_positive(rng, 3)
        nu = random_hermitian(rng, 3)
        nu -= np.trace(nu).real / 3 * np.eye(3)
        exact = entropy_second_derivative(rho, nu)
        assert_allclose(entropy_second_derivative_quadrature(rho, nu), exact, rtol=1e-6)


# ─── Divided-difference chain rules ──────────────────────────────────────────

@pytest.mark.parametrize("f", [EXP, LOG, SQUARE])
def test_difference_of_functions_is_divided_difference_contraction(f):
    rng = np.random.default_rng(12)
    for _ in range(20):
        A, B = random_positive(rng, 3), random_positive(rng, 3)
        lhs = spectral(A).apply(f.value) - spectral(B).apply(f.value)
        assert_allclose(delta_f(f, A, B).contract(A - B), lhs, atol=1e-9 * max(1.0, np.abs(lhs).max()))


@pytest.mark.parametrize("f", [EXP, LOG, XLOGX])
def test_derivative_along_a_line(f):
    rng = np.random.default_rng(13)
    h = 1e-5
    for _ in range(10):
        A0, A1 = random_positive(rng, 3), random_hermitian(rng, 3)

        def F(t):
            return spectral(A0 + t * A1).apply(f.value)

        fd = (F(h) - F(-h)) / (2 * h)
        exact = frechet_derivative(f, A0, A1)
        assert np.linalg.norm(fd - exact) <= 1e-6 * np.linalg.norm(exact)
        fd_trace = np.trace(fd).real
        trace_form = np.trace(spectral(A0).apply(f.derivative) @ A1).real
        assert abs(fd_trace - trace_form) <= 1e-6 * max(abs(trace_form), 1.0)


# ─── Double sums and trees ───────────────────────────────────────────────────

def test_doubsum_on_diagonal_matrices_is_a_schur_product():
    a = np.array([0.5, 1.0, 3.0])
    C = np.arange(9.0).reshape(3, 3) + 1j
    out = doubsum(arithmetic(), np.diag(a), np.diag(a)).contract(C)
    assert_allclose(out, 0.5 * (a[:, None] + a[None, :]) * C, rtol=1e-12)


def test_contract_stack_agrees_with_contract():
    rng = np.random.default_rng(4)
    A, B = random_positive(rng, 3), random_positive(rng, 3)
    op = doubsum(logarithmic(), A, B)
    Cs = rng.standard_normal((2, 3, 3)) + 1j * rng.standard_normal((2, 3, 3))
    stacked = op.contract_stack(Cs)
    for k in range(2):
        assert_allclose(stacked[k], op.contract(Cs[k]), atol=1e-12)


def test_product_mean_tree_coefficients():
    theta = product_mean()
    x, y, z, w = 0.3, 1.7, 2.0, 0.9
    assert_allclose(tree_coefficients(theta, "((x,y),z)", x, y, z), z)
    assert_allclose(tree_coefficients(theta, "(x,(y,z))", x, y, z), x)
    assert_allclose(tree_coefficients(theta, "(((x,y),z),w)", x, y, z, w), 0.0, atol=1e-12)


def test_tree_coefficients_confluent_limit_is_continuous():
    theta = logarithmic()
    at = tree_coefficients(theta, "((x,y),z)", 2.0, 2.0, 0.5)
    near = tree_coefficients(theta, "((x,y),z)", 2.0, 2.0 + 1e-6, 0.5)
    assert_allclose(at, near, rtol=1e-5)
    at2 = tree_coefficients(theta, "(((x,y),z),w)", 1.5, 1.5, 1.5, 0.7)
    near2 = tree_coefficients(theta, "(((x,y),z),w)", 1.5, 1.5 + 1e-4, 1.5 - 1e-4, 0.7)
    assert_allclose(at2, near2, rtol=1e-3)


def test_tree_delta_is_derivative_of_double_sum():
    rng = np.random.default_rng(5)
    A, C = random_positive(rng, 3), random_positive(rng, 3)
    B, X = random_hermitian(rng, 3), rng.standard_normal((3, 3)) + 0j
    theta = logarithmic()
    h = 1e-6
    fd = (doubsum(theta, A + h * B, C).contract(X) - doubsum(theta, A - h * B, C).contract(X)) / (2 * h)
    assert_allclose(tree_delta(theta, "((x,y),z)", (A, A, C), (B, X)), fd, atol=1e-6)
    fd2 = (doubsum(theta, C, A + h * B).contract(X) - doubsum(theta, C, A - h * B).contract(X)) / (2 * h)
    assert_allclose(tree_delta(theta, "(x,(y,z))", (C, A, A), (B, X)), fd2, atol=1e-6)


def test_tree_delta_rejects_unknown_shape():
    with pytest.raises(TreeShapeError, match="unsupported"):
        tree_delta(logarithmic(), "((x,y),(z,w))", (np.eye(2),) * 4, (np.eye(2),) * 3)


# ─── Quasi-entropies ─────────────────────────────────────────────────────────

def test_logarithmic_quasi_entropy_is_jointly_convex_on_samples():
    out = convexity_probe(logarithmic(), 1.0, trials=30, n=2, seed=0)
    assert out["status"] == "consistent"


def test_logarithmic_quasi_entropy_contracts_under_channels():
    rng = np.random.default_rng(6)
    R, S = random_positive(rng, 2), random_positive(rng, 2)
    A = random_hermitian(rng, 2)
    lhs, rhs = cptp_contractivity_probe(logarithmic(), R, S, A, random_kraus(rng, 2))
    assert lhs <= rhs * (1 + 1e-9)


def test_power_mean_three_is_not_jointly_convex():
    out = convexity_probe(power_mean(3.0), 1.0, trials=2000, n=3, seed=0)
    assert out["status"] == "violation"
    assert out["witness"] is not None


@pytest.mark.parametrize("m", [-1.0, 0.5, 1.0, 2.0])
def test_power_means_in_the_convex_range(m):
    out = convexity_probe(power_mean(m), 1.0, trials=200, n=3, seed=0)
    assert out["status"] == "consistent", out


def test_quasi_entropy_contracts_under_random_channels():
    rng = np.random.default_rng(15)
    theta = logarithmic()
    for _ in range(200):
        R, S = random_positive(rng, 3), random_positive(rng, 3)
        A = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
        lhs, rhs = cptp_contractivity_probe(theta, R, S, A, random_kraus(rng, 3, rank=int(rng.integers(1, 4))))
        assert lhs <= rhs * (1 + 1e-9)


def test_cptp_contractivity_rejects_non_trace_preserving():
    with pytest.raises(ChannelError, match="trace preserving"):
        cptp_contractivity_probe(logarithmic(), np.eye(2), np.eye(2), np.eye(2), [2 * np.eye(2)])


def test_quasi_entropy_at_scalar_arguments():
    rng = np.random.default_rng(7)
    A = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    val = quasi_entropy(logarithmic(), 1.0, 2.0 * np.eye(2), 2.0 * np.eye(2), A)
    assert_allclose(val, np.linalg.norm(A) ** 2 / 2.0, rtol=1e-12)


# ─── Chain rule for ∂_V ──────────────────────────────────────────────────────

def test_chain_partial_is_commutator_of_function():
    rng = np.random.default_rng(8)
    A = random_hermitian(rng, 3)
    V = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
    F = spectral(A).apply(np.exp)
    assert_allclose(chain_partial(EXP, A, A, V @ A - A @ V), V @ F - F @ V, atol=1e-10)


def test_chain_partial_with_distinct_homomorphisms():
    rng = np.random.default_rng(14)
    U = np.linalg.qr(rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3)))[0]
    V = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
    A = random_hermitian(rng, 3)
    rA = U @ A @ U.conj().T
    F = spectral(A).apply(SQUARE.value)
    expected = V @ (U @ F @ U.conj().T) - F @ V
    assert_allclose(chain_partial(SQUARE, A, rA, V @ rA - A @ V), expected, atol=1e-10)
    assert_allclose(chain_partial(IDENTITY, A, rA, V @ rA - A @ V), V @ rA - A @ V, atol=1e-12)


def test_mean_eval_accepts_tags():
    assert_allclose(mean_eval("harmonic", 1.0, 3.0), 1.5)
    assert_allclose(mean_eval("geometric", 1.0, 3.0), np.sqrt(3.0))
    assert_allclose(mean_eval(arithmetic(), np.array([1.0, 2.0]), 3.0), [2.0, 2.5])
