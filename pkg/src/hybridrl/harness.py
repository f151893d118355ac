"""Experiment runner: config parsing, seeding, stopping rule and metric files.

Per seed the runner writes ``seed_<n>/metrics.jsonl`` (deterministic given
config and seed) and ``seed_<n>/timing.jsonl`` (wall clock, kept apart so the
metrics stay byte-identical).  ``summary.csv`` collects one row per seed.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .comblock import ComblockConfig, generate_offline_dataset, make_env
from .errors import ConfigError, SampleBudgetExceeded
from .funcapprox import LinearClass, MlpClass, ObsActionFeatures, OneHotFeatures
from .hac import HacConfig, run_hac
from .hnpg import FhHnpgConfig, HnpgConfig, iter_fh_hnpg, run_hnpg
from .hpe import HpeConfig
from .mdp import TabularEnv, TabularMdp, TabularOfflineSource, random_mdp, tabular_v_exact, value_iteration
from .policies import GaussianMlpPolicy, TabularSoftmaxParamPolicy

ALGORITHMS = ("hac", "hnpg", "fh-hnpg", "online-only-ablation")
ENV_BUDGET = "HYBRIDRL_BUDGET"
ENV_OUT_DIR = "HYBRIDRL_OUT_DIR"


@dataclass
class ExperimentConfig:
    """One experiment.  ``env`` is ``{"type": "comblock", ...}``, ``{"type": "tabular",
    "mdp": {...}}`` / ``{"type": "tabular", "path": ...}`` or ``{"type": "random_tabular", ...}``."""

    algorithm: str
    env: dict
    seeds: list = field(default_factory=lambda: [0])
    budget: int = 2_000_000
    window: int = 100
    eval_episodes: int = 100
    max_rounds: int | None = None
    hyperparameters: dict = field(default_factory=dict)
    offline: dict = field(default_factory=dict)
    success_gap: float = 0.05
    out_dir: str | None = None

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"field 'algorithm': expected one of {ALGORITHMS}, got {self.algorithm!r}")
        if not isinstance(self.env, dict) or "type" not in self.env:
            raise ConfigError("field 'env': must be an object with a 'type' key")
        env_type = self.env["type"]
        if env_type not in ("comblock", "tabular", "random_tabular"):
            raise ConfigError(f"field 'env.type': unknown environment {env_type!r}")
        comblock = env_type == "comblock"
        if self.algorithm in ("fh-hnpg", "online-only-ablation") and not comblock:
            raise ConfigError(f"field 'env.type': {self.algorithm} needs a comblock environment")
        if self.algorithm in ("hac", "hnpg") and comblock:
            raise ConfigError(f"field 'env.type': {self.algorithm} needs a tabular environment")
        if not isinstance(self.seeds, list) or not self.seeds or not all(isinstance(s, int) for s in self.seeds):
            raise ConfigError("field 'seeds': must be a nonempty list of integers")
        if not isinstance(self.budget, int) or self.budget < 0:
            raise ConfigError("field 'budget': must be a non-negative integer")
        if self.window < 1:
            raise ConfigError("field 'window': must be at least 1")
        if self.eval_episodes < 1:
            raise ConfigError("field 'eval_episodes': must be at least 1")
        if self.max_rounds is not None and self.max_rounds < 1:
            raise ConfigError("field 'max_rounds': must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict, text: str | None = None) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be a JSON object")
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(_locate(text, key, f"field {key!r}: unknown field"))
        for key in ("algorithm", "env"):
            if key not in d:
                raise ConfigError(f"field {key!r}: required")
        cfg = cls(**d)
        try:
            cfg.validate()
        except ConfigError as err:
            name = str(err).split("'")[1] if "'" in str(err) else ""
            raise ConfigError(_locate(text, name.split(".")[-1], str(err))) from None
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"line {err.lineno}, column {err.colno}: {err.msg}") from None
        return cls.from_dict(d, text)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())


def _locate(text: str | None, key: str, message: str) -> str:
    if text and key:
        for lineno, line in enumerate(text.splitlines(), 1):
            if f'"{key}"' in line:
                return f"line {lineno}: {message}"
    return message


def apply_env_overrides(cfg: ExperimentConfig, environ=None) -> ExperimentConfig:
    """``HYBRIDRL_BUDGET`` and ``HYBRIDRL_OUT_DIR`` override the config values."""
    environ = os.environ if environ is None else environ
    if environ.get(ENV_BUDGET):
        try:
            cfg.budget = int(float(environ[ENV_BUDGET]))
        except ValueError:
            raise ConfigError(f"{ENV_BUDGET}: not a number: {environ[ENV_BUDGET]!r}") from None
    if environ.get(ENV_OUT_DIR):
        cfg.out_dir = environ[ENV_OUT_DIR]
    cfg.validate()
    return cfg


def moving_average_stop(history, window: int) -> bool:
    """True iff the last ``window`` success indicators average above one half."""
    if window < 1:
        raise ValueError("window must be at least 1")
    if len(history) < window:
        return False
    return float(np.mean(history[-window:])) > 0.5


def evaluate_policy(env, policies, n_episodes: int, rng: np.random.Generator) -> dict:
    """Roll ``n_episodes`` fresh episodes without learning.

    Success means the final reward equals 1.  The environment's sample
    counter is left untouched.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    before = env.n_samples
    traj = env.rollout(policies, n_episodes, rng)
    env.base.n_samples = before
    success = traj.rewards[:, -1] >= 1.0
    return {"success_rate": float(success.mean()), "mean_return": float(traj.rewards.sum(1).mean()),
            "indicators": success.astype(int).tolist()}


# ---------------------------------------------------------------------------
# running


@dataclass
class SeedOutcome:
    seed: int
    success: bool
    rounds: int
    online_samples: int
    final_success_rate: float
    final_moving_average: float
    reason: str


@dataclass
class ExperimentOutcome:
    seeds: list

    @property
    def n_success(self) -> int:
        return sum(s.success for s in self.seeds)

    @property
    def exit_code(self) -> int:
        return 0 if 2 * self.n_success > len(self.seeds) else 1


class _MetricsWriter:
    def __init__(self, directory: Path):
        directory.mkdir(parents=True, exist_ok=True)
        self.metrics = open(directory / "metrics.jsonl", "w")
        self.timing = open(directory / "timing.jsonl", "w")
        self.start = time.perf_counter()

    def write(self, record: dict) -> None:
        self.metrics.write(json.dumps(_clean(record), sort_keys=True) + "\n")
        self.timing.write(json.dumps({"t": record.get("t"),
                                      "wall_clock_s": round(time.perf_counter() - self.start, 3)}) + "\n")

    def close(self) -> None:
        self.metrics.close()
        self.timing.close()


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def run_experiment(cfg: ExperimentConfig, out_dir=None, seeds=None) -> ExperimentOutcome:
    cfg.validate()
    out = Path(out_dir or cfg.out_dir or "runs")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    outcomes = []
    for seed in (cfg.seeds if seeds is None else seeds):
        writer = _MetricsWriter(out / f"seed_{seed}")
        try:
            outcomes.append(run_seed(cfg, seed, writer.write))
        finally:
            writer.close()
    write_summary(out / "summary.csv", cfg, outcomes)
    return ExperimentOutcome(outcomes)


def write_summary(path, cfg: ExperimentConfig, outcomes) -> None:
    cols = ["seed", "algorithm", "success", "rounds", "online_samples",
            "final_success_rate", "final_moving_average", "reason"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for o in outcomes:
            w.writerow({"algorithm": cfg.algorithm, **asdict(o)})


def run_seed(cfg: ExperimentConfig, seed: int, emit) -> SeedOutcome:
    """Run one seed, calling ``emit(record)`` once per outer round."""
    if cfg.budget <= 0:
        return SeedOutcome(seed, False, 0, 0, 0.0, 0.0, "budget")
    if cfg.algorithm in ("fh-hnpg", "online-only-ablation"):
        return _run_comblock(cfg, seed, emit)
    return _run_tabular(cfg, seed, emit)


def _streams(seed: int, n: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _comblock_config(cfg: ExperimentConfig, seed: int) -> ComblockConfig:
    spec = {k: v for k, v in cfg.env.items() if k != "type"}
    spec.setdefault("seed", seed)
    return ComblockConfig(**spec)


_FH_KEYS = {f.name for f in fields(FhHnpgConfig)}


def _run_comblock(cfg: ExperimentConfig, seed: int, emit) -> SeedOutcome:
    data_rng, init_rng, train_rng, eval_rng = _streams(seed, 4)
    ccfg = _comblock_config(cfg, seed)
    hp = dict(cfg.hyperparameters)
    policy_hidden = tuple(hp.pop("policy_hidden", (32, 32)))
    critic_hidden = tuple(hp.pop("critic_hidden", (64, 64)))
    critic_lr = hp.pop("critic_lr", 1e-3)
    critic_epochs = hp.pop("critic_epochs", 10)
    init_log_std = hp.pop("init_log_std", 0.0)
    unknown = set(hp) - _FH_KEYS
    if unknown:
        raise ConfigError(f"field 'hyperparameters': unknown keys {sorted(unknown)}")
    hybrid = cfg.algorithm == "fh-hnpg"
    fh_cfg = FhHnpgConfig(**{**hp, "use_offline": hybrid, "T": cfg.max_rounds or 10**9})

    offline = None
    if hybrid:
        ds = generate_offline_dataset(ccfg, cfg.offline.get("epsilon"),
                                      int(cfg.offline.get("n_trajectories", 50_000)), data_rng)
        offline = ds.to_step_dataset()
    env = make_env(ccfg)
    eval_env = make_env(ccfg)
    H = ccfg.horizon
    feats = ObsActionFeatures(ccfg.obs_dim, ccfg.n_latent_actions)
    classes = [MlpClass(feats, hidden=critic_hidden, lr=critic_lr, epochs=critic_epochs, seed=seed)
               for _ in range(H)]
    policies = [GaussianMlpPolicy.create(ccfg.obs_dim, ccfg.n_latent_actions, policy_hidden, init_rng,
                                         init_log_std=init_log_std) for _ in range(H)]
    per_round = fh_cfg.batch_size * H
    history: list[int] = []
    t, last = 0, {"success_rate": 0.0}
    if env.n_samples + per_round > cfg.budget:
        return SeedOutcome(seed, False, 0, 0, 0.0, 0.0, "budget")
    for rnd in iter_fh_hnpg(env, classes, offline, policies, fh_cfg, train_rng):
        t = rnd.t
        last = evaluate_policy(eval_env, rnd.policies, cfg.eval_episodes, eval_rng)
        history.extend(last["indicators"])
        ma = float(np.mean(history[-cfg.window:]))
        steps = [{k: r[k] for k in ("h", "online_mc_loss", "offline_td_loss", "critic_fit_residual",
                                    "kl", "step_accepted")} for r in rnd.records]
        emit({"t": t, "online_samples": env.n_samples, "success_rate": last["success_rate"],
              "moving_average": ma, "mean_return": last["mean_return"],
              "train_mean_return": float(rnd.online.rewards.sum(1).mean()), "steps": steps})
        if moving_average_stop(history, cfg.window):
            return SeedOutcome(seed, True, t, env.n_samples, last["success_rate"], ma, "solved")
        if env.n_samples + per_round > cfg.budget:
            return SeedOutcome(seed, False, t, env.n_samples, last["success_rate"], ma, "budget")
        if cfg.max_rounds is not None and t >= cfg.max_rounds:
            break
    ma = float(np.mean(history[-cfg.window:])) if history else 0.0
    return SeedOutcome(seed, False, t, env.n_samples, last["success_rate"], ma, "max_rounds")


def _tabular_mdp(cfg: ExperimentConfig, seed: int, rng) -> TabularMdp:
    spec = cfg.env
    if spec["type"] == "random_tabular":
        return random_mdp(spec.get("n_states", 5), spec.get("n_actions", 3), spec.get("gamma", 0.9),
                          np.random.default_rng(spec.get("seed", seed)))
    if "mdp" in spec:
        return TabularMdp.from_json(json.dumps(spec["mdp"]))
    if "path" in spec:
        return TabularMdp.load(spec["path"])
    raise ConfigError("field 'env': tabular environments need 'mdp' or 'path'")


class _Stop(Exception):
    pass


def _run_tabular(cfg: ExperimentConfig, seed: int, emit) -> SeedOutcome:
    """HAC or HNPG on a tabular MDP; success is an exact value gap below ``success_gap``."""
    rng, = _streams(seed, 1)
    mdp = _tabular_mdp(cfg, seed, rng)
    env = TabularEnv(mdp)
    offline = TabularOfflineSource(mdp)
    fclass = LinearClass(OneHotFeatures(mdp.n_states, mdp.n_actions))
    _, greedy = value_iteration(mdp)
    v_star = tabular_v_exact(mdp, greedy)
    hp = dict(cfg.hyperparameters)
    hpe_cfg = HpeConfig(**{**hp.pop("hpe", {}), "max_env_samples": cfg.budget})
    history: list[int] = []
    state = {"t": 0, "gap": np.inf, "ma": 0.0, "success": False}

    def record(t, policy, extra):
        gap = v_star - tabular_v_exact(mdp, policy)
        history.append(int(gap <= cfg.success_gap))
        ma = float(np.mean(history[-cfg.window:]))
        state.update(t=t, gap=gap, ma=ma)
        emit({"t": t, "online_samples": env.n_samples, "success_rate": float(history[-1]),
              "moving_average": ma, "value_gap": float(gap), **extra})
        if moving_average_stop(history, cfg.window):
            state["success"] = True
            raise _Stop

    try:
        if cfg.algorithm == "hac":
            hac_cfg = HacConfig(T=cfg.max_rounds or hp.pop("T", 50), eta=hp.pop("eta", None), hpe=hpe_cfg)

            def on_hac(rec, new_policy):
                losses = rec["hpe_losses"]
                record(rec["t"], new_policy, {"online_mc_loss": losses.get("online_mc_loss"),
                                              "offline_td_loss": losses.get("offline_td_loss")})

            run_hac(env, fclass, offline, hac_cfg, rng, mdp=mdp, callback=on_hac)
        else:
            hn_cfg = HnpgConfig(T=cfg.max_rounds or hp.pop("T", 50), hpe=hpe_cfg,
                                **{k: v for k, v in hp.items() if k != "T"})
            policy = TabularSoftmaxParamPolicy(mdp.n_states, mdp.n_actions)

            def on_hnpg(rec, new_policy):
                record(rec["t"], new_policy, {"critic_fit_residual": rec["critic_fit_residual"]})

            run_hnpg(env, fclass, offline, policy, hn_cfg, rng, callback=on_hnpg)
    except _Stop:
        pass
    except SampleBudgetExceeded:
        return SeedOutcome(seed, False, state["t"], env.n_samples, float(history[-1]) if history else 0.0,
                           state["ma"], "budget")
    reason = "solved" if state["success"] else "max_rounds"
    return SeedOutcome(seed, state["success"], state["t"], env.n_samples,
                       float(history[-1]) if history else 0.0, state["ma"], reason)
