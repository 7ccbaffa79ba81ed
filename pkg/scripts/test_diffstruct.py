"""Derivations, generator and semigroup — run from project root: pytest scripts/test_diffstruct.py"""
import sys, os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import numpy as np
import pytest
from numpy.testing import assert_allclose

from shared.errors import StructureError, UnvalidatedStructureError
from core.matalg import gns_symmetric_commutes_check, kms_inner, s_inner
from core.builders import BUILDERS
from core.diffstruct import (
    adjoint_generator, complete_dirichlet_check, detailed_balance_check, dirichlet_form,
    dirichlet_positivity_check, domain_rank_check, generator, generator_form, inner_j, is_ergodic,
    kernel_dimension, lindblad_form_generator, partial, partial_adjoint, partial_adjoint_s, semigroup_apply,
    semigroup_cp_check, semigroup_matrix, validate_structure, zero_mean_basis,
)


def thermal_qubit():
    E01 = np.array([[0, 1], [0, 0]], dtype=complex)
    return BUILDERS["lindblad"]([0.5 * E01, 0.5 * E01.conj().T], np.diag([1.5, 0.5]))


@pytest.fixture(scope="module")
def thermal():
    return thermal_qubit()


@pytest.fixture(scope="module")
def depol():
    return BUILDERS["depolarizing"](1.0, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(21)


# ─── Derivations ─────────────────────────────────────────────────────────────

def test_thermal_frequencies_are_read_off_sigma(thermal):
    assert_allclose(sorted(d.omega for d in thermal.directions), [-np.log(3.0), np.log(3.0)], rtol=1e-12)


def test_partial_is_a_skew_derivation(thermal, rng):
    alg = thermal.algebra
    A, B = alg.random_hermitian(rng), alg.random_hermitian(rng)
    for j, d in enumerate(thermal.directions):
        lhs = partial(thermal, j, A @ B)
        rhs = partial(thermal, j, A) @ d.r(B) + d.ell(A) @ partial(thermal, j, B)
        assert_allclose(lhs, rhs, atol=1e-12)
        assert_allclose(partial(thermal, j, alg.unit()), 0.0, atol=1e-14)


def test_partial_adjoint(thermal, rng):
    alg = thermal.algebra
    A = alg.random_hermitian(rng)
    B = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    for j, d in enumerate(thermal.directions):
        assert_allclose(d.target.inner(partial(thermal, j, A), B),
                        alg.inner(A, partial_adjoint(thermal, j, B)), atol=1e-12)


@pytest.mark.parametrize("s", [0.0, 0.5, 1.0])
def test_weighted_partial_adjoint(thermal, rng, s):
    alg = thermal.algebra
    A = alg.random_hermitian(rng)
    B = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    for j in range(len(thermal.directions)):
        lhs = inner_j(thermal, j, partial(thermal, j, A), B, s)
        rhs = s_inner(thermal.sigma, s, A, partial_adjoint_s(thermal, j, s, B))
        assert_allclose(lhs, rhs, atol=1e-12)


def test_direction_index_out_of_range(depol):
    with pytest.raises(StructureError, match="out of range"):
        depol.direction(7)


# ─── Generator ───────────────────────────────────────────────────────────────

def test_depolarizing_generator_closed_form(depol, rng):
    A = depol.algebra.random_hermitian(rng)
    expected = depol.algebra.tau(A) * np.eye(2) - A
    assert_allclose(generator(depol).apply(A), expected, atol=1e-12)


def test_generator_forms_agree(thermal):
    L = generator(thermal).matrix
    for form in (1, 2):
        assert_allclose(generator_form(thermal, form).matrix, L, atol=1e-12)
    assert_allclose(lindblad_form_generator(thermal).matrix, L, atol=1e-12)


def test_sigma_is_invariant(thermal):
    assert_allclose(adjoint_generator(thermal).apply(thermal.sigma.matrix), 0.0, atol=1e-12)


def test_detailed_balance(thermal):
    for kind in ("gns", "kms", "bkm"):
        out = detailed_balance_check(thermal, kind)
        assert out["residual"] < 1e-10
        if kind != "bkm":
            assert out["dirichlet_identity_residual"] < 1e-10


def test_dirichlet_form_is_kms_energy(thermal, rng):
    alg = thermal.algebra
    A, B = alg.random_hermitian(rng), alg.random_hermitian(rng)
    expected = -kms_inner(thermal.sigma, generator(thermal).apply(A), B).real
    assert_allclose(dirichlet_form(thermal, A, B), expected, atol=1e-12)
    assert dirichlet_form(thermal, A, A) >= 0


def test_generator_is_gns_symmetric(thermal):
    out = gns_symmetric_commutes_check(generator(thermal), thermal.sigma)
    assert max(out["s_residuals"].values()) < 1e-9
    assert out["modular_commutator"] < 1e-9


def test_dirichlet_properties(thermal):
    assert dirichlet_positivity_check(thermal, samples=20)["passed"]
    assert complete_dirichlet_check(thermal, m=2, samples=10)["passed"]


@pytest.mark.parametrize("m", [2, 3])
def test_depolarizing_is_completely_dirichlet(depol, m):
    out = complete_dirichlet_check(depol, m=m, samples=40)
    assert out["passed"], out
    assert out["kms_symmetry_residual"] < 1e-10


def test_flipped_frequency_breaks_complete_dirichlet(thermal):
    omega = thermal.directions[0].omega
    assert abs(omega) > 0.5
    flipped = thermal.with_direction(0, omega=-omega)
    out = complete_dirichlet_check(flipped, m=2, samples=40)
    assert not out["passed"]
    assert out["kms_symmetry_residual"] > 1e-3


def test_complete_dirichlet_rejects_large_amplification(thermal):
    with pytest.raises(StructureError, match="amplification"):
        complete_dirichlet_check(thermal, m=4)


# ─── Semigroup ───────────────────────────────────────────────────────────────

def test_semigroup_is_unital_trace_preserving_and_cp(thermal, rng):
    alg = thermal.algebra
    one = alg.unit()
    assert_allclose(semigroup_apply(thermal, 0.7, one), one, atol=1e-12)
    rho = alg.random_density(rng).matrix
    assert_allclose(alg.tau(semigroup_apply(thermal, 0.7, rho, dual=True)), 1.0, atol=1e-12)
    assert semigroup_cp_check(thermal, 0.7)["passed"]
    far = semigroup_apply(thermal, 200.0, rho, dual=True)
    assert_allclose(far, thermal.sigma.matrix, atol=1e-8)


def test_semigroup_rejects_negative_time(thermal):
    with pytest.raises(StructureError, match="nonnegative"):
        semigroup_matrix(thermal, -1.0)


def test_depolarizing_semigroup_closed_form(depol, rng):
    A = depol.algebra.random_hermitian(rng)
    t = 0.4
    tau = depol.algebra.tau(A)
    assert_allclose(semigroup_apply(depol, t, A), np.exp(-t) * A + (1 - np.exp(-t)) * tau * np.eye(2), atol=1e-12)


# ─── Validation, kernels ─────────────────────────────────────────────────────

def test_broken_frequency_fails_validation(depol):
    broken = depol.with_direction(0, omega=0.3)
    report = validate_structure(broken)
    assert not report.passed
    failed = {r.axiom for r in report.failures()}
    assert any("omega antisymmetric" in a for a in failed)
    with pytest.raises(UnvalidatedStructureError):
        generator(broken)


def test_ergodicity_and_kernels(depol):
    assert is_ergodic(depol)
    assert domain_rank_check(depol)["consistent"]
    cube = BUILDERS["hypercube"](2)
    half = cube.without_direction(1)
    assert validate_structure(half).passed
    assert kernel_dimension(half) == 2
    assert not is_ergodic(half)


def test_zero_mean_basis(thermal):
    Z = zero_mean_basis(thermal)
    alg = thermal.algebra
    assert Z.shape == (alg.dim, alg.dim - 1)
    assert_allclose(Z.T @ Z, np.eye(alg.dim - 1), atol=1e-12)
    assert_allclose(Z.T @ alg.coords(alg.unit()).real, 0.0, atol=1e-12)
