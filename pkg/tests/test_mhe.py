import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from submhe.errors import ConfigurationError, ContractViolation, WindowUnderflowError
from submhe.mhe import (
    ConstraintSets,
    CostWeights,
    Decision,
    MheConfig,
    MovingHorizonEstimator,
    Window,
    accept,
    candidate_nominal,
    candidate_observer,
    cost_nd,
    cost_td,
    is_feasible,
    prior_from_observer,
    repair_states,
    rollout,
)
from submhe.model import BoxSet, REACTOR_XBAR0, reactor_model
from submhe.observer import reactor_observer, reinit_and_roll
from submhe.solver import SolverSettings

U0 = np.zeros(0)
CP, CW, CV = 4.282, 4.347, 1.322


@pytest.fixture(scope="module")
def reactor():
    return reactor_model()


def _window(t, N, T, ys, xhat_past=(1.0, 0.5, 0.1)):
    ys = np.asarray(ys, dtype=float).reshape(-1, 1)
    return Window(t, N, T, np.zeros((ys.shape[0], 0)), ys, np.asarray(xhat_past, dtype=float))


def test_rollout_of_zero_stage_decision_is_nominal(reactor):
    z = np.array([0.5, 0.05, 0.0])
    states, zetas = rollout(reactor, Decision.zeros(z, 2, 3, 1))
    np.testing.assert_allclose(states[1], [0.475, 0.07475, 0.025125], atol=1e-15)
    np.testing.assert_array_equal(states[2], reactor.f_n(states[1], U0))
    assert zetas.shape == (2, 1)


def test_rollout_empty_horizon(reactor):
    states, zetas = rollout(reactor, Decision.zeros(np.ones(3), 0, 3, 1))
    assert states.shape == (1, 3) and zetas.shape[0] == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rollout_satisfies_dynamics(seed):
    sys = reactor_model()
    rng = np.random.default_rng(seed)
    dec = Decision(rng.uniform(0, 2, 3), rng.uniform(-2e-3, 2e-3, (4, 3)), rng.uniform(-1e-2, 1e-2, (4, 1)))
    states, zetas = rollout(sys, dec)
    for k in range(4):
        np.testing.assert_array_equal(states[k + 1], sys.step_map(states[k], U0, dec.omegas[k]))
        np.testing.assert_array_equal(zetas[k], sys.output_map(states[k], U0, dec.nus[k]))


def test_cost_perfect_fit_is_zero(reactor):
    prior = np.array([0.5, 0.05, 0.0])
    dec = Decision.zeros(prior, 3, 3, 1)
    _, zetas = rollout(reactor, dec)
    w = CostWeights(CP, CW, CV, CV)
    assert cost_nd(reactor, dec, _window(3, 3, 5, zetas[:, 0]), prior, w) == 0.0


def test_cost_prior_only(reactor):
    w = CostWeights(4.282, CW, CV, CV, a=2)
    prior = np.array([0.5, 0.05, 0.0])
    dec = Decision.zeros(prior + [0.1, 0, 0], 0, 3, 1)
    win = _window(0, 3, 5, np.zeros((0, 1)))
    assert cost_nd(reactor, dec, win, prior, w) == pytest.approx(0.04282, rel=1e-12)


def test_discounted_cost_single_fit_term(reactor):
    w = CostWeights(CP, CW, CV, 1.322, a=1, eta_bar=0.985)
    prior = np.array([0.5, 0.05, 0.0])
    dec = Decision.zeros(prior, 1, 3, 1)
    y = reactor.h_n(prior, U0)[0] + 0.01
    win = _window(1, 3, 5, [y])
    assert cost_td(reactor, dec, win, prior, w) == pytest.approx(0.985 * 1.322 * 0.01, rel=1e-9)
    assert cost_td(reactor, dec, _window(1, 3, 5, [y - 0.01]), prior, w) == 0.0


def test_discounted_cost_without_discount_is_plain_cost(reactor):
    rng = np.random.default_rng(0)
    prior = np.array([0.4, 0.2, 0.1])
    dec = Decision(prior + rng.normal(0, 0.05, 3), rng.normal(0, 1e-3, (3, 3)), rng.normal(0, 1e-2, (3, 1)))
    win = _window(6, 3, 5, rng.uniform(0.5, 0.8, 5))
    w1 = CostWeights(CP, CW, CV, CV, a=1, eta_bar=1.0)
    assert cost_td(reactor, dec, win, prior, w1) == pytest.approx(cost_nd(reactor, dec, win, prior, w1), rel=1e-14)


def test_discounted_cost_rejects_quadratic_weights(reactor):
    w = CostWeights(CP, CW, CV, CV, a=2)
    with pytest.raises(ConfigurationError):
        cost_td(reactor, Decision.zeros(np.zeros(3), 0, 3, 1), _window(0, 3, 5, np.zeros(0)), np.zeros(3), w)


def test_prior_projection():
    X = BoxSet(np.zeros(3), np.full(3, 4.0))
    inside = np.array([1.0, 2.0, 3.0])
    for project in (True, False):
        p, eps = prior_from_observer(inside, project, X)
        np.testing.assert_array_equal(p, inside)
        assert not eps.any()
    p, eps = prior_from_observer([-0.02, 5.0, 1.0], True, X)
    np.testing.assert_array_equal(p, [0.0, 4.0, 1.0])
    np.testing.assert_allclose(eps, [-0.02, 1.0, 0.0])


def test_nominal_candidate(reactor):
    X = reactor.state_set
    z = np.array([0.5, 0.05, 0.0])
    dec = candidate_nominal(z, 3, True, X, reactor)
    np.testing.assert_array_equal(dec.chi, z)
    assert not dec.omegas.any() and not dec.nus.any()
    assert is_feasible(reactor, dec)


def test_projected_nominal_candidate_is_feasible(reactor):
    X = reactor.state_set
    # x3 decays out of the box along the nominal rollout from this corner
    dec = candidate_nominal([0.0, 0.0, -0.5], 4, True, X, reactor)
    states, _ = rollout(reactor, dec)
    assert X.contains(states)
    assert is_feasible(reactor, dec, sets=ConstraintSets(X, BoxSet.unbounded(3), reactor.noise_set))


def test_nominal_candidate_cost_has_only_fit_terms(reactor):
    z = np.array([0.6, 0.1, 0.05])
    ys = np.array([0.7, 0.72, 0.75])
    dec = candidate_nominal(z, 3, True, reactor.state_set, reactor)
    w = CostWeights(CP, CW, CV, CV)
    _, zetas = rollout(reactor, dec)
    expected = CV * np.sum((ys - zetas[:, 0]) ** 2)
    assert cost_nd(reactor, dec, _window(3, 3, 5, ys), z, w) == pytest.approx(expected, rel=1e-13)


def test_observer_candidate_reproduces_observer(reactor):
    obs = reactor_observer()
    ys = np.array([[0.62], [0.64], [0.66]])
    zs, inj = reinit_and_roll(obs, reactor, [0.5, 0.1, 0.05], None, ys, 3, return_injections=True)
    dec = candidate_observer(zs, inj, False, reactor.state_set, reactor)
    states, _ = rollout(reactor, dec)
    np.testing.assert_allclose(states, zs, atol=1e-12)
    dec_p = candidate_observer(zs, inj, True, reactor.state_set, reactor)
    assert reactor.state_set.contains(zs)
    np.testing.assert_allclose(rollout(reactor, dec_p)[0], zs, atol=1e-12)


def test_observer_candidate_with_zero_injection_is_nominal(reactor):
    z = np.array([0.5, 0.05, 0.0])
    zs = rollout(reactor, Decision.zeros(z, 3, 3, 1))[0]
    dec = candidate_observer(zs, np.zeros((3, 3)), False, reactor.state_set, reactor)
    assert dec.same_as(candidate_nominal(z, 3, False, reactor.state_set, reactor))


def test_projected_observer_candidate_outside_box(reactor):
    X = reactor.state_set
    zs = np.array([[0.5, 0.05, -0.01], [0.47, 0.07, -0.005], [0.45, 0.09, 0.01]])
    dec = candidate_observer(zs, None, True, X, reactor)
    states, _ = rollout(reactor, dec)
    assert X.contains(states)
    np.testing.assert_allclose(states, X.project(zs), atol=1e-15)


def test_feasibility_bounds(reactor):
    z = np.array([0.5, 0.05, 0.0])
    dec = Decision.zeros(z, 1, 3, 1)
    assert is_feasible(reactor, dec)
    bad = Decision(z, np.full((1, 3), 2e-3 + 2e-9), np.zeros((1, 1)))
    assert not is_feasible(reactor, bad, tol=1e-9)
    face = Decision(np.array([0.0, 4.0, 0.0]), np.zeros((0, 3)), np.zeros((0, 1)))
    assert is_feasible(reactor, face)


def test_accept_rules(reactor):
    prior = np.array([0.5, 0.05, 0.0])
    win = _window(1, 3, 5, [0.6])
    w = CostWeights(CP, CW, CV, CV)
    cost = lambda d: cost_nd(reactor, d, win, prior, w)  # noqa: E731
    cand = Decision.zeros(prior, 1, 3, 1)
    assert accept(cand, cand.copy(), cost, reactor)[1]
    bad = Decision(prior, np.full((1, 3), 1.0), np.zeros((1, 1)))
    chosen, took = accept(cand, bad, cost, reactor)
    assert chosen is cand and not took
    with pytest.raises(ContractViolation):
        accept(bad, cand, cost, reactor)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-4, 0.5))
def test_acceptance_invariant(seed, scale):
    sys = reactor_model()
    rng = np.random.default_rng(seed)
    prior = rng.uniform(0, 1, 3)
    win = _window(2, 3, 5, rng.uniform(0.3, 1.2, 2))
    w = CostWeights(CP, CW, CV, CV)
    cost = lambda d: cost_nd(sys, d, win, prior, w)  # noqa: E731
    cand = candidate_nominal(prior, 2, True, sys.state_set, sys)
    prop = Decision(prior + rng.normal(0, scale, 3), rng.normal(0, scale * 1e-2, (2, 3)), rng.normal(0, scale, (2, 1)))
    chosen, _ = accept(cand, prop, cost, sys)
    assert cost(chosen) <= cost(cand)
    assert is_feasible(sys, chosen)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_repair_keeps_states_in_box(seed):
    sys = reactor_model()
    X = sys.state_set
    rng = np.random.default_rng(seed)
    dec = Decision(rng.uniform(0, 0.05, 3), rng.normal(0, 0.05, (5, 3)), np.zeros((5, 1)))
    fixed = repair_states(sys, dec, X)
    assert X.contains(rollout(sys, fixed)[0])


def test_window_indexing():
    win = _window(7, 3, 5, [1, 2, 3, 4, 5])
    assert (win.N_eff, win.T_eff) == (3, 5)
    np.testing.assert_array_equal(win.stage_outputs[:, 0], [3, 4, 5])
    early = _window(2, 3, 5, [1, 2])
    assert (early.N_eff, early.T_eff) == (2, 2)
    with pytest.raises(WindowUnderflowError):
        _window(7, 3, 5, [1, 2, 3])
    with pytest.raises(ConfigurationError):
        _window(7, 3, 3, [1, 2, 3])


def _estimator(budget=0, T=5, kind="nominal", cost="quadratic", project=True):
    sys = reactor_model()
    obs = reactor_observer()
    from submhe.observer import contraction_check

    cert = contraction_check(obs, sys)
    cfg = MheConfig(N=3, T=T, cost_kind=cost, candidate_kind=kind, project=project,
                    solver=SolverSettings(budget=budget))
    return sys, obs, MovingHorizonEstimator(sys, obs, cfg, REACTOR_XBAR0, CostWeights.from_eioss(cert.eioss, cost))


def test_initial_estimate_is_prior_guess():
    _, _, est = _estimator()
    res = est.estimate_step()
    np.testing.assert_array_equal(res.x_hat, [1.0, 0.5, 0.1])


def test_zero_budget_is_observer_prior_rollout():
    sys, obs, est = _estimator(budget=0)
    rng = np.random.default_rng(5)
    ys = rng.uniform(0.5, 0.7, 12)
    est.estimate_step()
    for t in range(1, 13):
        res = est.estimate_step(None, [ys[t - 1]])
        n, Teff = min(t, 3), min(t, 5)
        past = est.x_hats[t - Teff]
        zs = reinit_and_roll(obs, sys, past, None, ys[t - Teff: t].reshape(-1, 1), Teff - n)
        z = sys.state_set.project(zs[-1])
        expected = rollout(sys, candidate_nominal(z, n, True, sys.state_set, sys))[0][-1]
        np.testing.assert_array_equal(res.x_hat, expected)
        assert res.cost_accepted == res.cost_candidate


@pytest.mark.parametrize("kind", ["nominal", "observer"])
@pytest.mark.parametrize("cost", ["quadratic", "discounted"])
def test_estimator_invariants(kind, cost):
    sys, _, est = _estimator(budget=2, kind=kind, cost=cost)
    rng = np.random.default_rng(1)
    x = np.array([0.5, 0.05, 0.0])
    est.estimate_step()
    for _ in range(25):
        y = sys.output_map(x, U0, rng.uniform(-1e-2, 1e-2, 1))
        res = est.estimate_step(None, y)
        assert res.cost_accepted <= res.cost_candidate
        assert sys.state_set.contains(res.x_hat)
        x = sys.step_map(x, U0, rng.uniform(-2e-3, 2e-3, 3))


def test_solver_improves_on_candidate_somewhere():
    sys, _, est = _estimator(budget=2)
    x = np.array([0.5, 0.05, 0.0])
    est.estimate_step()
    improved = 0
    for _ in range(10):
        res = est.estimate_step(None, sys.h_n(x, U0))
        improved += res.accepted_proposal and res.cost_accepted < res.cost_candidate
        x = sys.f_n(x, U0)
    assert improved > 0
