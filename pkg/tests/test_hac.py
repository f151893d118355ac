from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import bandit_mdp
from hybridrl.funcapprox import LinearClass, OneHotFeatures
from hybridrl.hac import HacConfig, MixturePolicy, SoftmaxPolicy, mixture_value, run_hac, softmax_update
from hybridrl.hpe import HpeConfig
from hybridrl.mdp import (
    TabularEnv,
    TabularMdp,
    TabularOfflineSource,
    random_mdp,
    tabular_q_exact,
    tabular_v_exact,
)


def test_probs_sum_to_one(rng):
    pi = SoftmaxPolicy(4, rng.normal(size=(3, 4)) * 50)
    assert np.allclose(pi.table.sum(1), 1.0, atol=1e-12)


def test_state_constant_shift_invariant(rng):
    L = rng.normal(size=(3, 4))
    shift = rng.normal(size=(3, 1)) * 100
    assert np.allclose(SoftmaxPolicy(4, L).table, SoftmaxPolicy(4, L + shift).table, atol=1e-12)


def test_update_constant_f_keeps_policy(rng):
    pi = SoftmaxPolicy(3, rng.normal(size=(2, 3)))
    new = softmax_update(pi, np.array([[1.0] * 3, [-2.0] * 3]), 0.7)
    assert np.allclose(new.table, pi.table, atol=1e-12)


def test_update_two_actions():
    pi = SoftmaxPolicy.uniform(2, 1)
    new = softmax_update(pi, np.array([[1.0, 0.0]]), 1.0)
    e = math.e
    assert new.table[0] == pytest.approx([e / (1 + e), 1 / (1 + e)], abs=1e-12)
    assert np.allclose(pi.table, 0.5)  # old policy untouched


def test_update_eta_zero(rng):
    pi = SoftmaxPolicy(3, rng.normal(size=(2, 3)))
    assert np.allclose(softmax_update(pi, rng.normal(size=(2, 3)), 0.0).table, pi.table)


def test_lazy_logits_match_table():
    feats = OneHotFeatures(2, 3)
    from hybridrl.funcapprox import LinearFn
    f = LinearFn(np.arange(6.0), feats)
    lazy = softmax_update(SoftmaxPolicy.uniform(3), f, 0.5)
    table = softmax_update(SoftmaxPolicy.uniform(3, 2), f, 0.5)
    assert np.allclose(lazy.probs(np.array([0, 1])), table.table)


def test_step_size_default():
    cfg = HacConfig(T=100)
    assert cfg.step_size(0.9, 4) == pytest.approx(0.1 * math.sqrt(math.log(4) / 100))
    with pytest.raises(ValueError):
        HacConfig(T=0)


def exact_critic(mdp):
    return lambda pi: tabular_q_exact(mdp, pi)


def test_zero_reward_stays_uniform(rng):
    mdp = random_mdp(3, 2, 0.9, rng)
    mdp = TabularMdp(mdp.transition, np.zeros((3, 2)), mdp.init_dist, 0.9)
    res = run_hac(TabularEnv(mdp), None, None, HacConfig(T=5), rng, critic=exact_critic(mdp))
    for pi in res.iterates:
        assert np.allclose(pi.table, 0.5)


def test_bandit_closed_form(rng):
    T = 100
    eta = math.sqrt(math.log(2) / T)
    mdp = bandit_mdp([1.0, 0.0])
    res = run_hac(TabularEnv(mdp), None, None, HacConfig(T=T, eta=eta), rng, critic=exact_critic(mdp))
    expected = 1.0 / (1.0 + math.exp(-T * eta))  # logit gap grows by eta per round
    assert res.iterates[-1].table[0, 0] == pytest.approx(expected, abs=1e-9)
    probs = [pi.table[0, 0] for pi in res.iterates]
    assert np.all(np.diff(probs) >= 0)


def test_mixture_structure(rng):
    mdp = random_mdp(3, 2, 0.9, rng)
    res = run_hac(TabularEnv(mdp), None, None, HacConfig(T=7), rng, critic=exact_critic(mdp))
    assert len(res.iterates) == 8
    assert len(res.mixture.components) == 8
    assert np.allclose(res.mixture.weights, 1 / 8)


def test_mixture_value_is_mean(rng):
    mdp = random_mdp(3, 2, 0.9, rng)
    comps = [SoftmaxPolicy(2, rng.normal(size=(3, 2))) for _ in range(4)]
    mv = mixture_value(mdp, MixturePolicy(comps))
    assert mv == pytest.approx(np.mean([tabular_v_exact(mdp, c) for c in comps]), abs=1e-9)


def test_run_hac_with_hpe_improves(rng):
    mdp = random_mdp(4, 2, 0.8, rng)
    fclass = LinearClass(OneHotFeatures(4, 2))
    cfg = HacConfig(T=10, eta=1.0, hpe=HpeConfig(k1=2, k2=6, m_on=300, m_off=300))
    seen = []
    res = run_hac(TabularEnv(mdp), fclass, TabularOfflineSource(mdp), cfg, rng, mdp=mdp,
                  callback=lambda rec, pi: seen.append(rec["t"]))
    assert seen == list(range(1, 11))
    assert tabular_v_exact(mdp, res.iterates[-1]) > tabular_v_exact(mdp, res.iterates[0])
    assert "offline_td_loss" in res.records[0]["hpe_losses"]
