from __future__ import annotations

import numpy as np
import pytest

from conftest import chain_mdp, single_state_mdp
from hybridrl.errors import SampleBudgetExceeded
from hybridrl.funcapprox import LinearClass, OneHotFeatures
from hybridrl.hpe import AveragedFn, HpeConfig, StepDataset, fhpe, hpe, offline_bellman_residual
from hybridrl.mdp import (
    FiniteHorizonAdapter,
    TabularEnv,
    TabularMdp,
    TabularOfflineSource,
    TabularPolicy,
    finite_horizon_q,
    function_table,
    random_mdp,
    tabular_occupancy_exact,
    tabular_q_exact,
)


def tab_class(mdp):
    return LinearClass(OneHotFeatures(mdp.n_states, mdp.n_actions))


def uniform(mdp):
    return TabularPolicy.uniform(mdp.n_states, mdp.n_actions)


def test_config_validation():
    with pytest.raises(ValueError):
        HpeConfig(k1=5, k2=5)
    with pytest.raises(ValueError):
        HpeConfig(m_on=0, m_off=0)
    with pytest.raises(ValueError):
        HpeConfig(lam=-1)


def test_theory_defaults():
    cfg = HpeConfig.theory_defaults(0.9, 20)
    assert cfg.k1 == 4 and cfg.k2 == 24


def test_zero_reward_gives_zero(rng):
    mdp = random_mdp(3, 2, 0.9, rng)
    mdp = TabularMdp(mdp.transition, np.zeros((3, 2)), mdp.init_dist, 0.9)
    res = hpe(uniform(mdp), tab_class(mdp), TabularOfflineSource(mdp), TabularEnv(mdp),
              HpeConfig(k1=1, k2=4, m_on=100, m_off=100), rng)
    assert np.allclose(function_table(res.f, 3, 2), 0.0, atol=1e-6)


def test_single_state_value(rng):
    mdp = single_state_mdp(1.0, 0.5)
    res = hpe(uniform(mdp), tab_class(mdp), TabularOfflineSource(mdp), TabularEnv(mdp),
              HpeConfig(k1=5, k2=10, m_on=200, m_off=200), rng)
    assert abs(res.f(np.array([0]), np.array([0]))[0] - 2.0) <= 0.05


@pytest.mark.parametrize("estimator", ["discounted", "geometric"])
def test_random_mdp_accuracy(rng, estimator):
    mdp = random_mdp(5, 3, 0.9, rng)
    pi = uniform(mdp)
    res = hpe(pi, tab_class(mdp), TabularOfflineSource(mdp), TabularEnv(mdp),
              HpeConfig(q_estimator=estimator), rng)
    err = np.max(np.abs(function_table(res.f, 5, 3) - tabular_q_exact(mdp, pi)))
    assert err <= (0.05 if estimator == "discounted" else 0.25)
    assert offline_bellman_residual(res.f, pi, mdp, np.full((5, 3), 1 / 15)) <= 0.01


def test_averaged_prediction_is_mean_of_iterates(rng):
    mdp = random_mdp(4, 2, 0.8, rng)
    res = hpe(uniform(mdp), tab_class(mdp), TabularOfflineSource(mdp), TabularEnv(mdp),
              HpeConfig(k1=2, k2=7, m_on=100, m_off=100), rng)
    assert len(res.iterates) == 5
    s, a = rng.integers(0, 4, 100), rng.integers(0, 2, 100)
    manual = np.mean([f(s, a) for f in res.iterates], axis=0)
    assert np.max(np.abs(res.f(s, a) - manual)) <= 1e-9


def test_last_iterate_mode(rng):
    mdp = random_mdp(3, 2, 0.8, rng)
    res = hpe(uniform(mdp), tab_class(mdp), TabularOfflineSource(mdp), TabularEnv(mdp),
              HpeConfig(k1=1, k2=3, m_on=50, m_off=50, average_iterates=False), rng)
    assert res.f is res.iterates[-1]


def test_loss_trace_records(rng):
    mdp = random_mdp(3, 2, 0.8, rng)
    res = hpe(uniform(mdp), tab_class(mdp), TabularOfflineSource(mdp), TabularEnv(mdp),
              HpeConfig(k1=1, k2=3, m_on=50, m_off=50), rng)
    assert [r["iter"] for r in res.losses] == [1, 2, 3]
    assert set(res.losses[0]) == {"iter", "offline_td_loss", "online_mc_loss"}


def test_budget_exceeded(rng):
    mdp = random_mdp(3, 2, 0.9, rng)
    with pytest.raises(SampleBudgetExceeded):
        hpe(uniform(mdp), tab_class(mdp), TabularOfflineSource(mdp), TabularEnv(mdp),
            HpeConfig(k1=1, k2=3, m_on=100, m_off=100, max_env_samples=500), rng)


def test_offline_source_not_counted(rng):
    mdp = random_mdp(3, 2, 0.9, rng)
    env = TabularEnv(mdp)
    hpe(uniform(mdp), tab_class(mdp), TabularOfflineSource(mdp), env,
        HpeConfig(k1=1, k2=2, m_on=0, m_off=100), rng)
    assert env.n_samples == 0


def test_population_regression_contracts():
    """With exact (population) regression each iterate contracts towards Q by gamma."""
    rng = np.random.default_rng(3)
    mdp = random_mdp(4, 2, 0.8, rng)
    pi = uniform(mdp)
    q = tabular_q_exact(mdp, pi)
    from hybridrl.mdp import bellman_backup
    f = np.zeros((4, 2))
    prev = np.max(np.abs(f - q))
    for _ in range(10):
        f = bellman_backup(mdp, pi, f)
        err = np.max(np.abs(f - q))
        assert err <= 0.8 * prev + 1e-12
        prev = err


def test_offline_bellman_residual_examples(rng):
    mdp = random_mdp(3, 2, 0.9, rng)
    pi = uniform(mdp)
    nu = np.full((3, 2), 1 / 6)
    assert offline_bellman_residual(tabular_q_exact(mdp, pi), pi, mdp, nu) <= 1e-9
    ones = TabularMdp(mdp.transition, np.ones((3, 2)), mdp.init_dist, 0.9)
    assert offline_bellman_residual(np.zeros((3, 2)), pi, ones, nu) == pytest.approx(1.0)


def test_chain_residual_from_hpe(rng):
    mdp = chain_mdp(0.9)
    mdp = TabularMdp(mdp.transition, mdp.reward, np.array([[0.5], [0.5]]), 0.9)
    res = hpe(uniform(mdp), tab_class(mdp), TabularOfflineSource(mdp), TabularEnv(mdp),
              HpeConfig(k1=4, k2=12, m_on=300, m_off=300), rng)
    assert offline_bellman_residual(res.f, uniform(mdp), mdp, np.array([[0.5], [0.5]])) <= 0.1


# --- finite horizon --------------------------------------------------------------

def _fh_setup(mdp, H, rng, n=2000):
    env = FiniteHorizonAdapter(TabularEnv(mdp), H)
    pols = [uniform(mdp)] * H
    data = StepDataset.from_trajectories(env.rollout(pols, n, rng))
    return env, pols, data


def test_fhpe_horizon_one(rng):
    mdp = random_mdp(3, 2, 0.5, rng)
    env, pols, data = _fh_setup(mdp, 1, rng, 3000)
    res = fhpe(pols, [tab_class(mdp)], data, env, 1.0, 3000, None, rng)
    assert np.max(np.abs(function_table(res.fns[0], 3, 2) - mdp.reward)) < 1e-6


def test_fhpe_zero_rewards(rng):
    mdp = random_mdp(3, 2, 0.5, rng)
    mdp = TabularMdp(mdp.transition, np.zeros((3, 2)), mdp.init_dist, 0.5)
    env, pols, data = _fh_setup(mdp, 3, rng, 200)
    res = fhpe(pols, [tab_class(mdp)] * 3, data, env, 1.0, 200, None, rng)
    for f in res.fns:
        assert np.allclose(function_table(f, 3, 2), 0.0, atol=1e-6)


def test_fhpe_chain_matches_backward_induction(rng):
    P = np.zeros((2, 2, 2))
    P[0, 0, 1] = P[0, 1, 0] = P[1, 0, 0] = P[1, 1, 1] = 1.0
    r = np.array([[1.0, 0.0], [0.0, 0.5]])
    mdp = TabularMdp(P, r, np.full((2, 2), 0.25), 0.5)
    env, pols, data = _fh_setup(mdp, 2, rng, 2000)
    res = fhpe(pols, [tab_class(mdp)] * 2, data, env, 1.0, 2000, None, rng)
    q = finite_horizon_q(mdp, pols, 2)
    for h in range(2):
        assert np.max(np.abs(function_table(res.fns[h], 2, 2) - q[h])) <= 0.05


def test_fhpe_random_mdp_consistency(rng):
    mdp = random_mdp(4, 2, 0.5, rng, init="uniform")
    env, pols, data = _fh_setup(mdp, 3, rng, 2000)
    res = fhpe(pols, [tab_class(mdp)] * 3, data, env, 1.0, 2000, None, rng)
    q = finite_horizon_q(mdp, pols, 3)
    for h in range(3):
        assert np.max(np.abs(function_table(res.fns[h], 4, 2) - q[h])) <= 0.05


def test_step_dataset_sampling(rng):
    rows = [(np.arange(10), np.zeros(10), np.ones(10), np.arange(10))]
    ds = StepDataset(rows)
    assert ds.size(0) == 10 and ds.horizon == 1
    s, *_ = ds.sample(0, 4, rng)
    assert len(s) == 4
    assert len(ds.sample(0, None, rng)[0]) == 10


def test_averaged_fn_needs_members():
    with pytest.raises(ValueError):
        AveragedFn([])
