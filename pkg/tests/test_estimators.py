import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ivrl.encoding import build_code
from ivrl.env import Dataset, KidneyEnv, TrajectoryStep, exact_ratio, exact_value, generate, make_tabular, true_j
from ivrl.estimators import (VCfg, WCfg, fit_v_from_moments, fit_v_hat, fit_w_hat, inner_max_closed_form,
                             inner_max_vf, iv_weight, l_dr_hat, l_dr_pop, l_mis_hat, moments, phi_mis_hat,
                             phi_vf_hat, phi_vf_pop, rollout_value_is, step_ratio, StepBatch)
from ivrl.funcspace import BoxedLinearW, FeatureMap, LinearV, PropensityPolicy, TabularPolicy
from ivrl.nuisance import NuisanceEstimate, oracle_nuisance

T_LEN = 7


def _deterministic(action, k=3):
    return PropensityPolicy(lambda s: np.tile(np.eye(k)[action], (np.size(s), 1)), k)


def _v_pi(env, fmap, pol):
    return LinearV(np.linalg.solve(fmap(env.state_values), exact_value(env, pol)), fmap)


def test_kidney_weight_when_instrument_matches_action():
    w = iv_weight(TrajectoryStep(1.0, 0, 0, 0.0, 1.0), _deterministic(0), oracle_nuisance(KidneyEnv()), build_code(3))
    assert w.value == pytest.approx(1 / (0.70 * 0.8), rel=1e-12)


def test_kidney_weight_when_instrument_differs():
    w = iv_weight(TrajectoryStep(1.0, 0, 2, 0.0, 1.0), _deterministic(2), oracle_nuisance(KidneyEnv()), build_code(3))
    assert w.value == pytest.approx(-0.5 / (0.70 * 0.8), rel=1e-12)


def test_weight_zero_when_policy_never_plays_action():
    w = iv_weight(TrajectoryStep(1.0, 0, 1, 0.0, 1.0), _deterministic(0), oracle_nuisance(KidneyEnv()), build_code(3))
    assert w.value == 0.0


def _two_step_data():
    return Dataset(np.array([[0.0, 1.0]]), np.array([[0, 1]]), np.array([[0, 0]]), np.array([[1.0, 2.0]]),
                   np.array([[1.0, 0.0]]), 0)


def _constant_nuisance(theta=0.5, delta=0.4):
    return NuisanceEstimate(lambda s: np.full((np.size(s), 2), theta), lambda s: np.full((np.size(s), 2), delta))


def test_vf_functional_by_hand():
    data = _two_step_data()
    fm = FeatureMap(1)
    pol = PropensityPolicy(lambda s: np.tile([0.5, 0.5], (np.size(s), 1)), 2)
    v = LinearV(np.array([1.0, 1.0]), fm)  # v(s) = 1 + s
    g = BoxedLinearW(np.array([1.0, 0.0]), 1.0, fm)
    gamma = 0.5
    # rho = <z,a> pi / (delta theta): step 1 z=a -> 1*0.5/0.2 = 2.5; step 2 z!=a -> -2.5
    step1 = 2.5 * (1.0 + gamma * 2.0) - 1.0
    step2 = -2.5 * (2.0 + gamma * 1.0) - 2.0
    expected = (step1 + step2) / 2
    assert phi_vf_hat(data, pol, v, g, _constant_nuisance(), gamma) == pytest.approx(expected, abs=1e-15)


def test_vf_functional_trivial_cases(fixture_env, fixture_data, oracle):
    env, fm, pol = fixture_env
    zero_g = BoxedLinearW(np.zeros(fm.dim), 1.0, fm)
    v = LinearV(np.arange(fm.dim, dtype=float), fm)
    assert phi_vf_hat(fixture_data, pol, v, zero_g, oracle, env.gamma) == 0.0
    zero_r = fixture_data.with_rewards(np.zeros_like(fixture_data.r))
    one_g = BoxedLinearW(np.eye(fm.dim)[0], 1.0, fm)
    assert phi_vf_hat(zero_r, pol, LinearV(np.zeros(fm.dim), fm), one_g, oracle, env.gamma) == 0.0


def test_vf_population_sensitive_to_v(fixture_env, oracle):
    env, fm, pol = fixture_env
    v = _v_pi(env, fm, pol)
    bumped = LinearV(v.w_v + 0.1, fm)
    devs = [abs(phi_vf_pop(env, T_LEN, pol, bumped, BoxedLinearW(e, 1.0, fm), oracle, env.gamma))
            for e in np.eye(fm.dim)]
    assert max(devs) > 1e-6


def test_inner_max_example():
    value, direction = inner_max_closed_form(np.array([0.2, -0.3, 0, 0, 0]), 1.0)
    assert value == pytest.approx(0.5)
    np.testing.assert_array_equal(direction, [1, -1, 1, 1, 1])


@given(st.lists(st.floats(-10, 10), min_size=5, max_size=5))
def test_inner_max_homogeneous(b):
    v1, d1 = inner_max_closed_form(np.array(b), 1.0)
    v2, d2 = inner_max_closed_form(np.array(b), 2.0)
    assert v2 == pytest.approx(2 * v1)
    np.testing.assert_array_equal(np.sign(d1), np.sign(d2))


def test_inner_max_zero_at_truth(fixture_env, oracle):
    env, fm, pol = fixture_env
    value, _ = inner_max_vf(env, pol, _v_pi(env, fm, pol), oracle, env.gamma, t_len=T_LEN)
    assert value <= 1e-10


def test_fit_v_realizable(fixture_env, oracle):
    env, fm, pol = fixture_env
    fit = fit_v_hat(env, pol, oracle, env.gamma, VCfg(fm), t_len=T_LEN)
    assert fit.inner_max_value <= 1e-7
    np.testing.assert_allclose(fit.solution(env.state_values), exact_value(env, pol), atol=1e-5)


def test_fit_v_zero_rewards(fixture_env, fixture_data, oracle):
    env, fm, pol = fixture_env
    data = fixture_data.with_rewards(np.zeros_like(fixture_data.r))
    fit = fit_v_hat(data, pol, oracle, env.gamma, VCfg(fm))
    assert fit.inner_max_value <= 1e-9


@pytest.mark.parametrize("box", [None, 1.0])
def test_fit_v_backends_agree(fixture_env, fixture_data, oracle, box):
    env, fm, pol = fixture_env
    mom = moments(fixture_data, env.reference(), pol, oracle, env.gamma, fm)
    if box is not None:
        # an overdetermined variant so the LP and subgradient paths both do real work
        mom = dataclasses.replace(mom, M=np.vstack([mom.M, mom.M[:2]]), c=np.concatenate([mom.c, mom.c[:2] + 1]))
    lp = fit_v_from_moments(mom, 1.0, "lp")
    sg = fit_v_from_moments(mom, 1.0, "subgradient")
    assert sg.inner_max_value == pytest.approx(lp.inner_max_value, abs=1e-6)


def test_fit_w_realizable(fixture_env, oracle):
    env, fm, pol = fixture_env
    fit = fit_w_hat(env, env.reference(), pol, oracle, env.gamma, WCfg(fm, box=10.0), t_len=T_LEN)
    np.testing.assert_allclose(fit.solution(env.state_values), exact_ratio(env, pol, T_LEN), atol=1e-4)


def test_fit_w_backends_agree(fixture_env, fixture_data, oracle):
    env, fm, pol = fixture_env
    lp = fit_w_hat(fixture_data, env.reference(), pol, oracle, env.gamma, WCfg(fm, 1.0, "lp"))
    sg = fit_w_hat(fixture_data, env.reference(), pol, oracle, env.gamma, WCfg(fm, 1.0, "subgradient"))
    assert sg.inner_max_value == pytest.approx(lp.inner_max_value, abs=1e-6)


def test_fit_w_single_state_on_policy():
    env = make_tabular(1, 2, 2, seed=0)
    pol = TabularPolicy(env.propensity(), env.state_values)
    fit = fit_w_hat(env, env.reference(), pol, oracle_nuisance(env), env.gamma, WCfg(FeatureMap(0), 10.0), t_len=5)
    assert fit.solution(env.state_values)[0] == pytest.approx(1.0, abs=1e-9)


def test_mis_functional_intercept(fixture_env, fixture_data, oracle):
    env, fm, pol = fixture_env
    w = BoxedLinearW(np.array([0.3, -0.2, 0.1, 0, 0]), 1.0, fm)
    one = LinearV(np.eye(fm.dim)[0], fm)
    rho = step_ratio(StepBatch.empirical(fixture_data), pol, oracle)
    g = env.gamma
    expected = (1 - g) - (1 - g) * np.mean(rho * w(fixture_data.s.ravel()))
    assert phi_mis_hat(fixture_data, env.reference(), pol, w, one, oracle, g) == pytest.approx(expected, abs=1e-12)
    zero = LinearV(np.zeros(fm.dim), fm)
    assert phi_mis_hat(fixture_data, env.reference(), pol, w, zero, oracle, g) == 0.0


def test_mis_value_trivial_cases(fixture_env, fixture_data, oracle):
    env, fm, pol = fixture_env
    w = BoxedLinearW(np.ones(fm.dim) * 0.5, 1.0, fm)
    assert l_mis_hat(fixture_data.with_rewards(np.zeros_like(fixture_data.r)), pol, w, oracle) == 0.0
    assert l_mis_hat(fixture_data, pol, BoxedLinearW(np.zeros(fm.dim), 1.0, fm), oracle) == 0.0


def test_dr_reduces_to_mis(fixture_env, fixture_data, oracle):
    env, fm, pol = fixture_env
    w = BoxedLinearW(np.array([0.3, -0.2, 0.1, 0, 0]), 1.0, fm)
    zero = LinearV(np.zeros(fm.dim), fm)
    assert l_dr_hat(fixture_data, env.reference(), pol, w, zero, oracle, env.gamma) == pytest.approx(
        l_mis_hat(fixture_data, pol, w, oracle), abs=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=5, max_size=5))
def test_dr_first_slot_identity(coef):
    env, fm, pol = _fixture()
    j = true_j(env, pol)[0]
    w = BoxedLinearW(np.array(coef), 5.0, fm)
    assert l_dr_pop(env, T_LEN, pol, w, _v_pi(env, fm, pol), oracle_nuisance(env), env.gamma) == pytest.approx(
        j, abs=1e-10)


def _fixture():
    from ivrl.checks import tabular_fixture
    return tabular_fixture(1)


def test_moment_form_matches_functionals(fixture_env, fixture_data, oracle, rng):
    env, fm, pol = fixture_env
    mom = moments(fixture_data, env.reference(), pol, oracle, env.gamma, fm)
    wv, wg = rng.normal(size=fm.dim), rng.uniform(-1, 1, fm.dim)
    v, g = LinearV(wv, fm), BoxedLinearW(wg, 1.0, fm)
    assert phi_vf_hat(fixture_data, pol, v, g, oracle, env.gamma) == pytest.approx(wg @ mom.vf_residual(wv), abs=1e-10)
    w = BoxedLinearW(wg, 1.0, fm)
    assert phi_mis_hat(fixture_data, env.reference(), pol, w, LinearV(wv, fm), oracle, env.gamma) == pytest.approx(
        wv @ mom.mis_residual(wg), abs=1e-10)
    assert l_mis_hat(fixture_data, pol, w, oracle) == pytest.approx(mom.c @ wg, abs=1e-12)


def test_rollout_is_one_step():
    env = make_tabular(3, 2, 2, seed=1)
    data = generate(env, 400, 4, seed=0)
    pol = TabularPolicy(np.tile([0.3, 0.7], (3, 1)), env.state_values)
    nu = oracle_nuisance(env)
    est, _ = rollout_value_is(data, pol, nu, np.ones(data.n, bool), 0.0)
    rho0 = step_ratio(StepBatch.empirical(data.subset(slice(None))), pol, nu).reshape(data.s.shape)[:, 0]
    assert est == pytest.approx(np.mean(rho0 * data.r[:, 0]), abs=1e-12)


def test_rollout_is_matches_exact_value():
    env = make_tabular(3, 2, 2, seed=1, gamma=0.5, confounded=False, compliance=0.9)
    pol = TabularPolicy(np.tile([0.5, 0.5], (3, 1)), env.state_values)
    t_len = 12
    data = generate(env, 40000, t_len, seed=2)
    start = env.state_values[0]
    est, se = rollout_value_is(data, pol, oracle_nuisance(env), lambda s0: s0 == start, env.gamma)
    truth = exact_value(env, pol)[0]
    tail = env.gamma**t_len * np.abs(env.reward).max() / (1 - env.gamma)
    assert abs(est - truth) <= 3 * se + tail


def test_rollout_is_behavior_policy_on_kidney():
    env = KidneyEnv()
    data = generate(env, 20000, 30, seed=3)
    beh = PropensityPolicy(env.propensity, 3)
    est, se = rollout_value_is(data, beh, oracle_nuisance(env), np.ones(data.n, bool), env.gamma)
    mc = (data.r * env.gamma ** np.arange(30)).sum(axis=1)
    assert abs(est - mc.mean()) <= 3 * np.hypot(se, mc.std(ddof=1) / np.sqrt(mc.size))
