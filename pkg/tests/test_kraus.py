import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import jump, kraus, pops, probs, toy_ops
from conftest import densities, random_density
from qndfeedback.kraus import (
    ConfigurationError,
    ContractError,
    ZeroProbabilityError,
    apply_jump,
    basis_state,
    check_distinguishable,
    constant_family,
    diagonal_state,
    is_density,
    kraus_derivatives,
    kraus_map,
    maximally_mixed,
    outcome_probabilities,
    populations,
    project_psd,
    rotation_generator,
    toy_rotation_family,
    validate_density,
)


def test_kraus_map_fixes_basis_states_at_zero(toy3):
    for n in range(3):
        ket = basis_state(3, n)
        np.testing.assert_allclose(kraus_map(toy3, 0.0, ket), ket, atol=1e-15)


def test_kraus_map_toy_value(toy2):
    # frozen from the dense 2x2 oracle
    out = kraus_map(toy2, 0.05, diagonal_state([0.5, 0.5]))
    np.testing.assert_allclose(out.real, [[0.5, 0.0], [0.0, 0.5]], atol=1e-15)
    np.testing.assert_allclose(out, kraus(toy_ops(0.05, (0.3, 1.1)), np.diag([0.5, 0.5]).astype(complex)), atol=1e-15)


def test_outcome_probabilities_toy(toy2):
    p = outcome_probabilities(toy2, 0.0, diagonal_state([0.5, 0.5]))
    assert p[0] == pytest.approx((np.cos(0.3) ** 2 + np.cos(1.1) ** 2) / 2, abs=1e-15)
    assert p[0] == pytest.approx(0.5592086244135831, abs=1e-15)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_outcome_probabilities_basis_state(toy3):
    c2 = np.abs(toy3.qnd_coefficients) ** 2
    for n in range(3):
        np.testing.assert_allclose(outcome_probabilities(toy3, 0.0, basis_state(3, n)), c2[:, n], atol=1e-15)


def test_apply_jump_toy(toy2):
    out = apply_jump(toy2, 0.0, 0, diagonal_state([0.5, 0.5]))
    c = np.cos([0.3, 1.1]) ** 2
    np.testing.assert_allclose(populations(out), c / c.sum(), atol=1e-15)
    np.testing.assert_allclose(populations(out), [0.8160351679231636, 0.1839648320768365], atol=1e-15)


def test_apply_jump_fixed_point_and_rank(toy3):
    for n in range(3):
        ket = basis_state(3, n)
        for mu in range(2):
            np.testing.assert_allclose(apply_jump(toy3, 0.0, mu, ket), ket, atol=1e-15)
    rho = random_density(np.random.default_rng(0), 3, rank=1)
    out = apply_jump(toy3, 0.03, 1, rho)
    assert np.linalg.matrix_rank(out, tol=1e-10) == 1


def test_apply_jump_zero_probability():
    fam = constant_family(np.stack([np.diag([1.0, 0.0]), np.diag([0.0, 1.0])]))
    with pytest.raises(ZeroProbabilityError):
        apply_jump(fam, 0.0, 1, basis_state(2, 0))


def test_dimension_mismatch(toy2):
    with pytest.raises(ContractError):
        kraus_map(toy2, 0.0, maximally_mixed(3))


def test_distinguishable():
    assert check_distinguishable(toy_rotation_family(3))[0]
    same = constant_family(np.stack([np.diag([0.6, 0.6, 0.8]), np.diag([0.8, 0.8, 0.6])]))
    ok, pairs = check_distinguishable(same)
    assert not ok and pairs == [(0, 1)]


def test_derivatives_analytic_and_fd(toy2):
    d1, d2 = kraus_derivatives(toy2)
    g = rotation_generator(2)
    m0 = toy2.operators(0.0)
    np.testing.assert_allclose(d1, g @ m0, atol=1e-15)
    np.testing.assert_allclose(d2, g @ g @ m0, atol=1e-15)
    h = 1e-4
    f1, f2 = kraus_derivatives(toy2, "finite-difference", h)
    assert np.max(np.abs(f1 - d1)) <= 10 * h**2
    assert np.max(np.abs(f2 - d2)) <= 1e-6
    with pytest.raises(ConfigurationError):
        kraus_derivatives(toy2, "finite-difference", 0.0)


def test_constant_family_derivatives_zero():
    fam = constant_family(np.stack([np.diag([0.6, 0.8]), np.diag([0.8, 0.6])]))
    d1, d2 = kraus_derivatives(fam, "finite-difference")
    assert not d1.any() and not d2.any()


def test_validate_density_and_repair():
    with pytest.raises(ContractError):
        validate_density(np.diag([0.6, 0.6]))
    bad = np.diag([1.0 + 1e-6, -1e-6])
    assert not is_density(bad)
    assert is_density(project_psd(bad))


def test_superoperator_matches_conjugation(toy3):
    rho = random_density(np.random.default_rng(1), 3)
    sup = toy3.superoperator(0.07)
    np.testing.assert_allclose((sup @ rho.reshape(-1)).reshape(3, 3), kraus_map(toy3, 0.07, rho), atol=1e-14)


@settings(max_examples=60, deadline=None)
@given(densities(d=3), st.floats(-0.2, 0.2))
def test_total_expectation_identity(rho, u):
    fam = toy_rotation_family(3)
    p = outcome_probabilities(fam, u, rho)
    avg = sum(p[mu] * apply_jump(fam, u, mu, rho) for mu in range(2) if p[mu] > 1e-12)
    np.testing.assert_allclose(avg, kraus_map(fam, u, rho), atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(densities(d=3), st.floats(-0.2, 0.2))
def test_completeness_and_trace(rho, u):
    fam = toy_rotation_family(3)
    assert fam.completeness_defect(u) <= 1e-10
    assert abs(np.trace(kraus_map(fam, u, rho)) - 1) <= 1e-10
    assert is_density(kraus_map(fam, u, rho))


@settings(max_examples=40, deadline=None)
@given(densities(d=2), st.floats(0.1, 10.0), st.integers(0, 1))
def test_jump_is_projective(rho, c, mu):
    fam = toy_rotation_family(2, (0.3, 1.1))
    np.testing.assert_allclose(apply_jump(fam, 0.02, mu, c * rho), apply_jump(fam, 0.02, mu, rho), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(densities(d=2), st.floats(-0.1, 0.1), st.integers(0, 1))
def test_jump_matches_oracle(rho, u, mu):
    fam = toy_rotation_family(2, (0.3, 1.1))
    ops = toy_ops(u, (0.3, 1.1))
    if probs(ops, rho)[mu] > 1e-9:
        np.testing.assert_allclose(apply_jump(fam, u, mu, rho), jump(ops, mu, rho), atol=1e-12)
        np.testing.assert_allclose(populations(apply_jump(fam, u, mu, rho)), pops(jump(ops, mu, rho)), atol=1e-12)
