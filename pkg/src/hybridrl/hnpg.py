"""Hybrid natural policy gradient: compatible critics, line search, GAE.

Two drivers live here: :func:`run_hnpg` (discounted, fixed step size) and
:func:`iter_fh_hnpg` / :func:`run_fh_hnpg` (finite horizon, one policy and
critic per timestep, conjugate gradient plus KL-constrained line search).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .funcapprox import conjugate_gradient, expected_value
from .hac import MixturePolicy
from .hpe import HpeConfig, StepDataset, fhpe, hpe
from .mdp import sample_occupancy

# ---------------------------------------------------------------------------
# building blocks


def centered_value(f, policy, states, actions, rng: np.random.Generator | None = None,
                   n_samples: int = 32) -> np.ndarray:
    """``f(s, a) - E_{a' ~ pi(s)} f(s, a')``."""
    return np.asarray(f(states, actions)) - expected_value(f, policy, states, rng, n_samples)


@dataclass
class CompatibleCriticFit:
    w: np.ndarray
    damping: float
    cg_residual: float
    cg_iterations: int
    offline_loss: float = float("nan")
    online_loss: float = float("nan")


def fisher_operator(phi_off, phi_on, lam: float):
    """``v -> mean_off phi phi^T v + lam mean_on phi phi^T v``."""
    def matvec(v):
        out = np.zeros_like(v)
        if phi_off is not None and len(phi_off):
            out += phi_off.T @ (phi_off @ v) / len(phi_off)
        if phi_on is not None and len(phi_on):
            out += lam * (phi_on.T @ (phi_on @ v)) / len(phi_on)
        return out
    return matvec


def fit_compatible_critic(phi_off, target_off, phi_on, target_on, lam: float = 1.0,
                          damping: float = 0.1, max_iters: int = 100, tol: float = 1e-10,
                          radius: float = math.inf) -> CompatibleCriticFit:
    """Fit ``w`` with ``w . phi`` regressed onto centered values on both batches.

    Solves ``(F + damping I) w = b`` by conjugate gradient, where ``F`` is the
    (1, lam)-weighted empirical Fisher matrix over offline and online rows.
    Either batch may be ``None``.  ``radius`` optionally projects ``w`` onto a
    Euclidean ball.
    """
    parts = [(p, t, wgt) for p, t, wgt in ((phi_off, target_off, 1.0), (phi_on, target_on, lam))
             if p is not None and len(p)]
    if not parts:
        raise ValueError("compatible critic needs at least one nonempty batch")
    b = sum(wgt * (p.T @ np.asarray(t, dtype=float)) / len(p) for p, t, wgt in parts)
    res = conjugate_gradient(fisher_operator(phi_off, phi_on, lam), b, damping, max_iters, tol)
    w = res.x
    norm = np.linalg.norm(w)
    if norm > radius:
        w = w * (radius / norm)
    fit = CompatibleCriticFit(w, damping, res.residual_norm, res.iterations)
    if phi_off is not None and len(phi_off):
        fit.offline_loss = float(np.mean((phi_off @ w - target_off) ** 2))
    if phi_on is not None and len(phi_on):
        fit.online_loss = float(np.mean((phi_on @ w - target_on) ** 2))
    return fit


def npg_step(theta, w, eta: float) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    w = np.asarray(w, dtype=float)
    if theta.shape != w.shape:
        raise ValueError(f"shape mismatch {theta.shape} vs {w.shape}")
    return theta + eta * w


def line_search(theta, w, surrogate, kl, max_kl: float, eta0: float = 1.0,
                backtrack: float = 0.5, max_backtracks: int = 10) -> tuple[float, bool]:
    """Backtrack ``eta0 * backtrack**k`` until ``surrogate > 0`` and ``kl <= max_kl``.

    ``surrogate(theta')`` measures improvement over ``theta`` and
    ``kl(theta')`` the divergence from it.  Returns ``(0.0, False)`` when no
    step on the schedule is acceptable.
    """
    theta = np.asarray(theta, dtype=float)
    w = np.asarray(w, dtype=float)
    for k in range(max_backtracks + 1):
        eta = eta0 * backtrack ** k
        cand = theta + eta * w
        if kl(cand) <= max_kl and surrogate(cand) > 0:
            return eta, True
    return 0.0, False


def gae_advantages(rewards, values, gamma: float, tau: float) -> np.ndarray:
    """Generalised advantage estimates along the last axis.

    ``values`` has one more entry than ``rewards`` (the bootstrap value,
    zero at a terminal state).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    T = rewards.shape[-1]
    if values.shape[-1] != T + 1:
        raise ValueError("values must have one more entry than rewards")
    deltas = rewards + gamma * values[..., 1:] - values[..., :-1]
    adv = np.zeros_like(deltas)
    running = np.zeros(deltas.shape[:-1])
    for t in range(T - 1, -1, -1):
        running = deltas[..., t] + gamma * tau * running
        adv[..., t] = running
    return adv


# ---------------------------------------------------------------------------
# discounted HNPG


@dataclass
class HnpgConfig:
    T: int = 50
    eta: float = 0.1
    max_kl: float = 1e-2
    tau: float = 0.97
    damping: float = 0.1
    lam: float = 1.0
    batch_size: int = 1000
    m_off: int = 1000
    cg_iters: int = 100
    radius: float = math.inf
    n_action_samples: int = 32
    max_backtracks: int = 10
    backtrack: float = 0.5
    hpe: HpeConfig = field(default_factory=HpeConfig)

    def __post_init__(self):
        if self.max_kl <= 0:
            raise ValueError("max_kl must be positive")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.damping <= 0:
            raise ValueError("damping must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")


@dataclass
class HnpgResult:
    iterates: list
    mixture: MixturePolicy
    records: list


def _online_pairs(env, policy, gamma, n, rng):
    if hasattr(env, "sample_on_policy"):
        return env.sample_on_policy(policy, n, rng)
    return sample_occupancy(env, policy, gamma, rng, n)


def run_hnpg(env, fclass, offline_source, policy, cfg: HnpgConfig, rng: np.random.Generator,
             critic=None, callback=None) -> HnpgResult:
    """Fixed-step hybrid NPG on a discounted environment.

    Each round evaluates the current policy (hybrid fitted evaluation, or
    ``critic(policy)`` when supplied), centres the critic, fits the compatible
    critic on offline and online pairs and moves ``theta`` by ``eta * w``.
    """
    gamma = getattr(env, "discount", 0.0)
    iterates, records = [policy], []
    for t in range(1, cfg.T + 1):
        d_off = d_on = None
        if critic is not None:
            f = critic(policy)
            s_on, a_on = _online_pairs(env, policy, gamma, cfg.batch_size, rng)
            d_on = (s_on, a_on)
            if offline_source is not None and cfg.m_off and cfg.lam is not None:
                d_off = offline_source.sample(cfg.m_off, rng)[:2]
        else:
            res = hpe(policy, fclass, offline_source, env, cfg.hpe, rng)
            f = res.f
            d_on = None if res.d_on is None else res.d_on[:2]
            d_off = None if res.d_off is None else res.d_off[:2]
        phi_off = tgt_off = phi_on = tgt_on = None
        if d_off is not None:
            phi_off = policy.score(*d_off)
            tgt_off = centered_value(f, policy, *d_off, rng=rng, n_samples=cfg.n_action_samples)
        if d_on is not None:
            phi_on = policy.score(*d_on)
            tgt_on = centered_value(f, policy, *d_on, rng=rng, n_samples=cfg.n_action_samples)
        fit = fit_compatible_critic(phi_off, tgt_off, phi_on, tgt_on, cfg.lam, cfg.damping,
                                    cfg.cg_iters, radius=cfg.radius)
        new_policy = policy.with_params(npg_step(policy.params, fit.w, cfg.eta))
        record = {"t": t, "critic_fit_residual": fit.cg_residual,
                  "offline_fit_loss": fit.offline_loss, "online_fit_loss": fit.online_loss,
                  "step_norm": float(cfg.eta * np.linalg.norm(fit.w))}
        records.append(record)
        if callback is not None:
            callback(record, new_policy)
        policy = new_policy
        iterates.append(policy)
    return HnpgResult(iterates, MixturePolicy(iterates), records)


# ---------------------------------------------------------------------------
# practical finite-horizon HNPG


@dataclass
class FhHnpgConfig:
    T: int = 500
    max_kl: float = 1e-2
    tau: float = 0.97
    damping: float = 0.1
    lam: float = 1.0
    batch_size: int = 1000
    m_off: int | None = 1000
    use_offline: bool = True
    cg_iters: int = 10
    n_action_samples: int = 32
    backtrack: float = 0.5
    max_backtracks: int = 10

    def __post_init__(self):
        if self.max_kl <= 0:
            raise ValueError("max_kl must be positive")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.damping <= 0:
            raise ValueError("damping must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")


def _critic_improvement(f, old, new, states, noise):
    """``E_{a~new} f(s,a) - E_{a~old} f(s,a)`` averaged over states.

    Finite-action policies are integrated exactly; Gaussian policies use the
    shared standard-normal ``noise`` (common random numbers).
    """
    n = len(states)
    if hasattr(old, "probs"):
        A = old.n_actions
        rep = np.repeat(states, A, axis=0)
        vals = np.asarray(f(rep, np.tile(np.arange(A), n))).reshape(n, A)
        return float(np.mean(np.sum((new.probs(states) - old.probs(states)) * vals, axis=1)))
    k = noise.shape[1]
    rep = np.repeat(states, k, axis=0)
    flat_noise = noise.reshape(n * k, -1)
    v_new = np.asarray(f(rep, new.actions_from_noise(rep, flat_noise)))
    v_old = np.asarray(f(rep, old.actions_from_noise(rep, flat_noise)))
    return float(np.mean(v_new - v_old))


def _policy_update(policy, f, off, on, adv_on, cfg: FhHnpgConfig, rng: np.random.Generator):
    """One compatible-critic fit plus KL line search for a single timestep."""
    phi_off = tgt_off = phi_on = None
    states = []
    if off is not None:
        s_off, a_off = off
        phi_off = policy.score(s_off, a_off)
        tgt_off = centered_value(f, policy, s_off, a_off, rng=rng, n_samples=cfg.n_action_samples)
        states.append(s_off)
    if on is not None:
        s_on, a_on = on
        phi_on = policy.score(s_on, a_on)
        states.append(s_on)
    lam_on = cfg.lam if off is not None else 1.0
    fit = fit_compatible_critic(phi_off, tgt_off, phi_on, adv_on, lam_on, cfg.damping, cfg.cg_iters)
    all_states = np.concatenate(states)
    quad = policy.kl_quadratic(fit.w, all_states)
    info = {"critic_fit_residual": fit.cg_residual, "offline_fit_loss": fit.offline_loss,
            "online_fit_loss": fit.online_loss, "kl": 0.0, "step_accepted": False, "eta": 0.0}
    if not quad > 0:
        return policy, info
    eta0 = math.sqrt(2.0 * cfg.max_kl / quad)

    noise = None
    if off is not None and not hasattr(policy, "probs"):
        noise = rng.standard_normal((len(off[0]), 8, policy.action_dim))
    logp_on = policy.log_prob(*on) if on is not None else None

    def surrogate(theta):
        cand = policy.with_params(theta)
        total = 0.0
        if off is not None:
            total += _critic_improvement(f, policy, cand, off[0], noise)
        if on is not None:
            ratio = np.exp(cand.log_prob(*on) - logp_on)
            total += lam_on * float(np.mean((ratio - 1.0) * adv_on))
        return total

    def kl(theta):
        return policy.kl(policy.with_params(theta), all_states)

    eta, ok = line_search(policy.params, fit.w, surrogate, kl, cfg.max_kl, eta0,
                          cfg.backtrack, cfg.max_backtracks)
    if not ok:
        return policy, info
    new = policy.with_params(npg_step(policy.params, fit.w, eta))
    info.update(kl=kl(new.params), step_accepted=True, eta=eta)
    return new, info


@dataclass
class FhRound:
    t: int
    policies: list
    critics: list
    records: list
    online: object


def iter_fh_hnpg(env, classes, offline: StepDataset | None, policies, cfg: FhHnpgConfig,
                 rng: np.random.Generator):
    """Yield one :class:`FhRound` per outer iteration (runs until ``cfg.T``).

    A round collects ``batch_size`` on-policy episodes, fits the per-step
    critics backwards in time, then updates every per-step policy with its
    own compatible critic and line search.  Online rows use GAE advantages
    from the state values ``V_h(s) = E_{a ~ pi_h} f_h(s, a)``; offline rows
    use the centred critic.
    """
    H = env.horizon
    policies = list(policies)
    critics = None
    use_off = cfg.use_offline and offline is not None
    for t in range(1, cfg.T + 1):
        online = env.rollout(policies, cfg.batch_size, rng)
        fh = fhpe(policies, classes, offline if use_off else None, env, cfg.lam if use_off else 1.0,
                  0, cfg.m_off, rng, init=critics, online=online)
        critics = fh.fns
        values = np.zeros((online.n, H + 1))
        for h in range(H):
            values[:, h] = expected_value(critics[h], policies[h], online.obs[:, h], rng, cfg.n_action_samples)
        adv = gae_advantages(online.rewards, values, 1.0, cfg.tau)
        records, new_policies = [], []
        for h in range(H):
            off = fh.d_off[h][:2] if use_off else None
            on = (online.obs[:, h], online.actions[:, h])
            new_pi, info = _policy_update(policies[h], critics[h], off, on, adv[:, h], cfg, rng)
            new_policies.append(new_pi)
            records.append({"t": t, "h": h, **fh.losses[h], **info})
        policies = new_policies
        yield FhRound(t, policies, critics, records, online)


@dataclass
class FhHnpgResult:
    policies: list
    critics: list
    records: list


def run_fh_hnpg(env, classes, offline: StepDataset | None, policies, cfg: FhHnpgConfig,
                rng: np.random.Generator, stop=None) -> FhHnpgResult:
    """Run :func:`iter_fh_hnpg`; ``stop(round)`` returning True ends early."""
    records, critics = [], None
    for rnd in iter_fh_hnpg(env, classes, offline, policies, cfg, rng):
        records.extend(rnd.records)
        policies, critics = rnd.policies, rnd.critics
        if stop is not None and stop(rnd):
            break
    return FhHnpgResult(list(policies), critics, records)
