from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.linalg import hadamard

from hybridrl.comblock import (
    DEAD,
    GOOD_A,
    GOOD_B,
    ComblockConfig,
    LatentState,
    OfflineDataset,
    comblock_latent_step,
    decode_continuous_action,
    decode_observation,
    emit_observation,
    emit_observations,
    fraction_optimal,
    generate_offline_dataset,
    make_env,
    observation_dim,
    scripted_good_policies,
)
from hybridrl.harness import evaluate_policy


def wrong_action(cfg, h, idx):
    return (cfg.good_table[h][idx] + 1) % cfg.n_latent_actions


def test_good_table_shape_and_seeding():
    cfg = ComblockConfig(horizon=6, seed=3)
    assert cfg.good_table.shape == (6, 2)
    assert ComblockConfig(horizon=6, seed=3).good_actions == cfg.good_actions
    assert ComblockConfig.from_dict(cfg.to_dict()).good_actions == cfg.good_actions
    with pytest.raises(ValueError):
        ComblockConfig(horizon=2, good_actions=[[0, 10], [1, 1]])


@pytest.mark.parametrize("H,dim", [(1, 4), (5, 8), (6, 16), (13, 16), (50, 64)])
def test_observation_dim(H, dim):
    assert observation_dim(H) == dim
    assert ComblockConfig(horizon=H).obs_dim == dim


def test_dead_is_absorbing(rng):
    cfg = ComblockConfig(horizon=4)
    for a in range(10):
        assert comblock_latent_step(cfg, LatentState(1, DEAD), a, rng) == (0.0, LatentState(2, DEAD))


def test_wrong_action_anti_reward(rng):
    cfg = ComblockConfig(horizon=4, continuous_actions=False)
    n = 100_000
    env = make_env(cfg).base
    r, nxt = env.step(np.zeros(n, int), np.full(n, wrong_action(cfg, 0, 0)), rng, 0)
    assert np.all(nxt == DEAD)
    assert set(np.unique(r)) <= {0.0, 0.1}
    assert abs(r.mean() - 0.05) <= 3 * r.std() / math.sqrt(n)


def test_final_good_action_pays_one(rng):
    cfg = ComblockConfig(horizon=3)
    for idx in (GOOD_A, GOOD_B):
        r, nxt = comblock_latent_step(cfg, LatentState(2, idx), int(cfg.good_table[2][idx]), rng)
        assert r == 1.0 and nxt.index in (GOOD_A, GOOD_B)


def test_intermediate_good_action_pays_zero(rng):
    cfg = ComblockConfig(horizon=3)
    r, nxt = comblock_latent_step(cfg, LatentState(0, GOOD_A), int(cfg.good_table[0][0]), rng)
    assert r == 0.0 and nxt.index != DEAD


def test_invalid_action_rejected(rng):
    with pytest.raises(ValueError):
        comblock_latent_step(ComblockConfig(), LatentState(0, 0), 10, rng)


def test_emission_noise_free_deterministic(rng):
    cfg = ComblockConfig(horizon=5, noise_std=0.0)
    a = emit_observation(cfg, LatentState(2, GOOD_B), rng)
    b = emit_observation(cfg, LatentState(2, GOOD_B), rng)
    assert a.shape == (8,) and np.array_equal(a, b)


def test_emission_decodes_to_one_hot():
    cfg = ComblockConfig(horizon=5, noise_std=0.0)
    for h in range(5):
        for idx in (GOOD_A, GOOD_B, DEAD):
            x = decode_observation(cfg, emit_observations(cfg, [idx], h, None))[0]
            expected = np.zeros(8)
            expected[idx] = 1
            expected[3 + h] = 1
            assert np.allclose(x, expected, atol=1e-12)


def test_emission_mean(rng):
    cfg = ComblockConfig(horizon=5)
    n = 100_000
    x = emit_observations(cfg, np.full(n, GOOD_A), 1, rng)
    onehot = np.zeros(8)
    onehot[[GOOD_A, 3 + 1]] = 1
    target = hadamard(8) @ onehot / math.sqrt(8)
    se = x.std(0) / math.sqrt(n)
    assert np.all(np.abs(x.mean(0) - target) <= 3 * se)


def test_decode_uniform(rng):
    n = 100_000
    idx = decode_continuous_action(np.zeros((n, 10)), rng)
    freq = np.bincount(idx, minlength=10) / n
    assert np.all(np.abs(freq - 0.1) <= 3 * math.sqrt(0.09 / n))


def test_decode_log_two(rng):
    n = 200_000
    a = np.zeros((n, 10))
    a[:, 0] = math.log(2)
    p = np.mean(decode_continuous_action(a, rng) == 0)
    assert abs(p - 2 / 11) <= 3 * math.sqrt((2 / 11) * (9 / 11) / n)


def test_decode_near_one_hot(rng):
    idx = decode_continuous_action(50 * np.tile(np.eye(10)[4], (10_000, 1)), rng)
    assert np.mean(idx == 4) > 0.999
    assert isinstance(decode_continuous_action(np.zeros(10), rng), int)
    with pytest.raises(ValueError):
        decode_continuous_action(np.array([np.nan] * 10), rng)


def test_absorption_and_reward_bounds(rng):
    cfg = ComblockConfig(horizon=5)
    env = make_env(cfg)
    pols = [_RandomPolicy() for _ in range(5)]
    traj = env.rollout(pols, 100_000, rng)
    lat = traj.latents
    dead_before = np.maximum.accumulate(lat == DEAD, axis=1)
    assert np.all(lat[dead_before] == DEAD)
    assert set(np.unique(traj.rewards)) <= {0.0, 0.1, 1.0}
    assert traj.rewards.sum(1).max() <= 1.1 + 1e-12


class _RandomPolicy:
    def sample(self, obs, rng):
        return rng.normal(size=(len(obs), 10))


def test_always_good_symmetry(rng):
    cfg = ComblockConfig(horizon=5)
    traj = make_env(cfg).rollout(scripted_good_policies(cfg), 50_000, rng)
    assert np.all(traj.latents != DEAD)
    share_a = np.mean(traj.latents == GOOD_A, axis=0)
    assert np.all(np.abs(share_a - 0.5) <= 3 * math.sqrt(0.25 / 50_000))


def test_evaluate_scripted_and_random(rng):
    cfg = ComblockConfig(horizon=5)
    env = make_env(cfg)
    assert evaluate_policy(env, scripted_good_policies(cfg), 500, rng)["success_rate"] == 1.0
    assert evaluate_policy(env, [_RandomPolicy()] * 5, 1000, rng)["success_rate"] == 0.0
    assert env.n_samples == 0
    with pytest.raises(ValueError):
        evaluate_policy(env, [_RandomPolicy()] * 5, 0, rng)


def test_env_counts_steps(rng):
    env = make_env(ComblockConfig(horizon=3))
    env.rollout([_RandomPolicy()] * 3, 7, rng)
    assert env.n_samples == 21


# --- offline data ----------------------------------------------------------------

def test_epsilon_zero_all_optimal(rng):
    ds = generate_offline_dataset(ComblockConfig(horizon=5), 0.0, 500, rng)
    assert fraction_optimal(ds) == 1.0


def test_fraction_optimal_edge_cases(rng):
    ds = generate_offline_dataset(ComblockConfig(horizon=3), 0.0, 10, rng)
    ds.rewards[:] = 0.0
    assert fraction_optimal(ds) == 0.0


@pytest.mark.parametrize("H,eps", [(5, 0.2), (50, 0.02)])
def test_optimal_fraction_matches_analytic(rng, H, eps):
    n = 50_000
    ds = generate_offline_dataset(ComblockConfig(horizon=H), eps, n, rng)
    p = (1 - eps) ** H
    assert abs(fraction_optimal(ds) - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_default_epsilon_is_inverse_horizon(rng):
    assert generate_offline_dataset(ComblockConfig(horizon=4), None, 10, rng).epsilon == 0.25
    with pytest.raises(ValueError):
        generate_offline_dataset(ComblockConfig(horizon=4), 1.0, 10, rng)


def test_dataset_actions_and_shapes(rng):
    cfg = ComblockConfig(horizon=4)
    ds = generate_offline_dataset(cfg, 0.25, 300, rng)
    assert ds.obs.shape == (300, 5, 8) and ds.actions.shape == (300, 4, 10)
    lat = ds.meta["latent_actions"]
    assert np.array_equal(ds.actions, 10.0 * np.eye(10)[lat])
    # the exploration branch never picks the good action
    good = ds.latents != DEAD
    picked_good = lat[good] == cfg.good_table[np.nonzero(good)[1], ds.latents[good]]
    assert abs(picked_good.mean() - 0.75) < 0.05
    steps = ds.to_step_dataset()
    assert steps.horizon == 4 and steps.size(0) == 300


def test_dataset_jsonl_round_trip(tmp_path, rng):
    ds = generate_offline_dataset(ComblockConfig(horizon=3, seed=9), 0.3, 20, rng)
    path = tmp_path / "d.jsonl"
    ds.save(path)
    lines = path.read_text().splitlines()
    assert len(lines) == 21
    back = OfflineDataset.load(path)
    assert back.config.good_actions == ds.config.good_actions
    assert np.array_equal(back.obs, ds.obs)
    assert np.array_equal(back.actions, ds.actions)
    assert np.array_equal(back.rewards, ds.rewards)
