"""Structure builders — run from project root: pytest scripts/test_builders.py"""
import sys, os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import numpy as np
import pytest
from numpy.testing import assert_allclose

from shared.errors import StructureError
from core.matalg import Algebra
from core.builders import BUILDERS, random_lindblad
from core.diffstruct import detailed_balance_check, generator, is_ergodic

Q3 = np.array([[0.0, 2.0, 1.0], [1.0, 0.0, 0.5], [1.0, 1.0, 0.0]])


def reversible_chain():
    """Rates reversible w.r.t. π = (0.25, 0.5, 0.25)."""
    pi = np.array([0.25, 0.5, 0.25])
    q = np.array([[0.0, 2.0, 1.0], [1.0, 0.0, 0.6], [1.0, 1.2, 0.0]])
    return q, pi


def markov_action(q, f):
    off = q - np.diag(np.diag(q))
    return off @ f - off.sum(axis=1) * f


@pytest.mark.parametrize("name", ["markov_graph", "markov_lindblad"])
def test_markov_builders_reproduce_the_chain(name):
    q, pi = reversible_chain()
    ds = BUILDERS[name](q, pi)
    assert ds.validated
    f = np.array([0.3, -1.2, 2.0])
    out = generator(ds).apply(np.diag(f).astype(complex))
    assert_allclose(np.diagonal(out), markov_action(q, f), atol=1e-12)
    assert_allclose(ds.algebra.tau(ds.sigma.matrix), 1.0, atol=1e-12)


def test_markov_rejects_irreversible_rates():
    with pytest.raises(StructureError, match="reversible"):
        BUILDERS["markov_graph"](Q3, [1 / 3, 1 / 3, 1 / 3])


def test_markov_rejects_bad_stationary_vector():
    q, _ = reversible_chain()
    with pytest.raises(StructureError, match="probability vector"):
        BUILDERS["markov_graph"](q, [0.5, 0.5, 0.5])


@pytest.mark.parametrize("gamma, algebra", [(1.0, 2), (0.7, 3), (2.0, Algebra.diagonal(3, [0.2, 0.3, 0.5]))])
def test_depolarizing_generator(gamma, algebra):
    ds = BUILDERS["depolarizing"](gamma, algebra)
    alg = ds.algebra
    A = alg.random_hermitian(np.random.default_rng(3))
    expected = gamma * (alg.tau(A) * alg.unit() - A)
    assert_allclose(generator(ds).apply(A), expected, atol=1e-12)
    assert ds.meta["builder"] == "depolarizing"


def test_depolarizing_matrix_units_on_m2():
    ds = BUILDERS["depolarizing"](1.0, 2, pauli=False)
    assert len(ds.directions) == 4
    A = ds.algebra.random_hermitian(np.random.default_rng(4))
    assert_allclose(generator(ds).apply(A), ds.algebra.tau(A) * np.eye(2) - A, atol=1e-12)


def test_depolarizing_rejects_nonpositive_rate():
    with pytest.raises(StructureError, match="positive"):
        BUILDERS["depolarizing"](0.0, 2)


def test_fermion_generator_is_number_operator():
    ds = BUILDERS["fermion_ou"](2)
    Q1, Q2 = ds.algebra.generators
    L = generator(ds)
    assert_allclose(L.apply(Q1), -4.0 * Q1, atol=1e-12)
    assert_allclose(L.apply(Q1 @ Q2), -8.0 * Q1 @ Q2, atol=1e-12)
    assert_allclose(L.apply(np.eye(4)), 0.0, atol=1e-12)


def test_hypercube_is_ergodic_and_flat():
    ds = BUILDERS["hypercube"](3)
    assert is_ergodic(ds)
    assert ds.sigma_is_trivial


def test_lindblad_requires_adjoint_closed_family():
    E01 = np.array([[0, 1], [0, 0]], dtype=complex)
    with pytest.raises(StructureError, match="closed under adjoints"):
        BUILDERS["lindblad"]([E01], np.diag([1.5, 0.5]))


def test_lindblad_requires_modular_eigenvectors():
    X = np.array([[0, 1], [1, 0]], dtype=complex)
    with pytest.raises(StructureError, match="Δ_σV"):
        BUILDERS["lindblad"]([X], np.diag([1.5, 0.5]))


def test_random_lindblad_is_gns_symmetric():
    ds = random_lindblad(np.random.default_rng(8), 3)
    assert ds.validated
    assert detailed_balance_check(ds, "gns")["residual"] < 1e-9
    assert is_ergodic(ds)
