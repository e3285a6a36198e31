import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import expected_w_enum, toy_ops
from conftest import densities, random_density
from qndfeedback.controller import (
    ControllerConfig,
    GridEvaluator,
    LyapunovGridController,
    control_grid,
    expected_w,
    feedback,
    q1_chain,
    q2,
    quadratic_argmax,
    select_min,
    w_epsilon_batch,
)
from qndfeedback.dynamics import DelayChainState
from qndfeedback.kraus import ConfigurationError, basis_state, kraus_map, maximally_mixed, toy_rotation_family
from qndfeedback.lyapunov import synthesize, v_epsilon, w_epsilon

PHASES3 = np.linspace(0.3, 1.1, 3)


@pytest.fixture
def spec3(toy3):
    return synthesize(toy3, 0, epsilon="ceiling", u_bar=0.05).spec


def test_grid_contains_zero():
    g = control_grid(0.1, 21)
    assert len(g) == 21 and g[10] == 0.0 and g[0] == -0.1 and g[-1] == 0.1
    with pytest.raises(ConfigurationError):
        ControllerConfig(None, grid_points=20)


def test_expected_w_tau0_at_zero(toy3, spec3):
    rho = random_density(np.random.default_rng(0), 3)
    chi = DelayChainState(rho)
    assert expected_w(spec3.with_epsilon(0.0), toy3, chi, 0.0) == pytest.approx(v_epsilon(spec3.with_epsilon(0.0), rho), abs=1e-14)
    assert v_epsilon(spec3, kraus_map(toy3, 0.0, rho)) == pytest.approx(v_epsilon(spec3, rho), abs=1e-14)


@pytest.mark.parametrize("tau", [0, 1, 2, 3])
def test_expected_w_matches_enumeration(toy3, spec3, tau):
    rng = np.random.default_rng(tau)
    for _ in range(5):
        rho = random_density(rng, 3)
        pending = tuple(rng.uniform(-0.05, 0.05, tau))
        xi = rng.uniform(-0.05, 0.05)
        ref = expected_w_enum(lambda u: toy_ops(u, PHASES3), spec3.sigma, spec3.epsilon, rho, list(pending), xi)
        assert expected_w(spec3, toy3, DelayChainState(rho, pending), xi) == pytest.approx(ref, abs=1e-13)


def test_expected_w_monte_carlo(toy3, spec3):
    rng = np.random.default_rng(5)
    rho = random_density(rng, 3)
    pending = (0.03, -0.02)
    xi = 0.04
    chi = DelayChainState(rho, pending)
    exact = expected_w(spec3, toy3, chi, xi)
    # sample the next delay-chain state and evaluate W there
    ops = toy3.operators(pending[-1])
    p = np.real(np.einsum("mij,jk,mik->m", ops, rho, ops.conj()))
    mus = rng.choice(2, size=100_000, p=p / p.sum())
    w_mu = [w_epsilon(spec3, toy3, DelayChainState(ops[m] @ rho @ ops[m].conj().T / p[m], (xi, pending[0]))) for m in range(2)]
    samples = np.asarray(w_mu)[mus]
    assert abs(samples.mean() - exact) <= 3 * samples.std() / np.sqrt(len(samples)) + 1e-15


def test_batched_grid_matches_scalar(toy3, spec3):
    rng = np.random.default_rng(6)
    grid = control_grid(0.05, 21)
    ev = GridEvaluator(spec3, toy3, grid)
    rho = np.stack([random_density(rng, 3) for _ in range(4)])
    pending = rng.uniform(-0.05, 0.05, (4, 2))
    vals = ev.values(rho, pending)
    for b in range(4):
        chi = DelayChainState(rho[b], tuple(pending[b]))
        ref = [expected_w(spec3, toy3, chi, x) for x in grid]
        np.testing.assert_allclose(vals[b], ref, atol=1e-14)
    w = w_epsilon_batch(spec3, toy3, rho, pending)
    ref_w = [w_epsilon(spec3, toy3, DelayChainState(rho[b], tuple(pending[b]))) for b in range(4)]
    np.testing.assert_allclose(w, ref_w, atol=1e-14)


def test_feedback_at_target_is_zero(toy3, spec3):
    cfg = ControllerConfig(spec3, u_bar=0.05, tau=2)
    assert feedback(cfg, toy3, DelayChainState(basis_state(3, 0), (0.0, 0.0))) == 0.0


def test_feedback_away_from_target_moves(toy3, spec3):
    cfg = ControllerConfig(spec3, u_bar=0.05)
    for n in (1, 2):
        assert feedback(cfg, toy3, DelayChainState(basis_state(3, n))) != 0.0


def test_tie_rule():
    grid = control_grid(0.1, 5)  # -0.1 -0.05 0 0.05 0.1
    vals = np.array([[1.0, 0.0, 1.0, 0.0, 1.0]])
    assert grid[select_min(vals, grid)[0]] == -0.05
    vals = np.array([[0.0, 1.0, 0.0, 1.0, 0.0]])
    assert grid[select_min(vals, grid)[0]] == 0.0


def test_even_expected_w_breaks_tie_toward_zero():
    fam = toy_rotation_family(2, (0.3, 1.1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        spec = synthesize(fam, 0, epsilon=0.0).spec
    # basis state of a two-level rotation: expected_w is even in xi
    cfg = ControllerConfig(spec, u_bar=0.1)
    u = feedback(cfg, fam, DelayChainState(basis_state(2, 1)))
    assert u == -0.1


def test_q2(toy3, spec3):
    grid = control_grid(0.05, 21)
    assert q2(spec3, toy3, DelayChainState(basis_state(3, 0), (0.0, 0.0)), grid) == pytest.approx(0.0, abs=1e-15)
    assert q2(spec3, toy3, DelayChainState(basis_state(3, 2), (0.0, 0.0)), grid) > 0


@settings(max_examples=40, deadline=None)
@given(densities(d=3), st.lists(st.floats(-0.05, 0.05), min_size=0, max_size=2))
def test_identity_and_signs(rho, pending):
    fam = toy_rotation_family(3)
    spec = synthesize(fam, 0, epsilon="ceiling", u_bar=0.05).spec
    chi = DelayChainState(rho, tuple(pending))
    grid = control_grid(0.05, 21)
    u = feedback(ControllerConfig(spec, u_bar=0.05, tau=len(pending)), fam, chi)
    lhs = expected_w(spec, fam, chi, u)
    a, b = q1_chain(spec, fam, chi), q2(spec, fam, chi, grid)
    assert a >= -1e-12 and b >= -1e-12
    assert abs(lhs - (w_epsilon(spec, fam, chi) - a - b)) <= 1e-9
    assert lhs <= w_epsilon(spec, fam, chi) + 1e-9


def test_controller_rejects_quadratic(toy3, spec3):
    with pytest.raises(ConfigurationError):
        LyapunovGridController(ControllerConfig(spec3, mode="quadratic"), toy3)


def test_quadratic_argmax_cases():
    assert quadratic_argmax(0.0, -1.0, 0.1)[0] == 0.0
    assert quadratic_argmax(0.02, -1.0, 0.1)[0] == pytest.approx(0.02)
    assert quadratic_argmax(1.0, -1.0, 0.1)[0] == 0.1
    assert quadratic_argmax(-1.0, 2.0, 0.1)[0] == -0.1
    # even and convex: both endpoints tie, smaller xi wins
    assert quadratic_argmax(0.0, 1.0, 0.1)[0] == -0.1
    assert quadratic_argmax(0.0, 0.0, 0.1)[0] == 0.0
