"""Training regimes: SAC on the surrogate, post-training on the plant, and SAC on the plant from scratch.

All three share one episode loop. The agent sees the augmented state
``[s_t, a_{t-1}]``; the reward is computed on the clean state (the
surrogate prediction or the plant's internal truth) while observation
noise only reaches the policy input.
"""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .kinematics import GaitWaveSpec, expert_gait_array
from .plant import ACTION_DIM, STATE_DIM, PlantConfig, ReferencePlant, is_fallen
from .sac import ReplayBuffer, RewardWeights, SACAgent, SACConfig, reward_terms

log = logging.getLogger(__name__)

MODES = ("MBRL", "PT", "MFRL")
EPISODE_COLUMNS = ("episode", "reward", "entropy", "temperature", "steps", "plant_steps",
                   "surrogate_steps", "wall_clock", "fell", "truncated")


@dataclass(frozen=True)
class ConvergenceRule:
    """When is a run converged?

    With ``threshold`` set, the trailing ``window``-episode mean return must
    reach it. Without, it must reach ``fraction`` of the best single-episode
    return seen so far (measured downward from the best by
    ``(1 - fraction) * |best|`` so negative returns behave). Either way the
    condition has to hold for ``sustain`` consecutive episodes; the
    convergence episode is the first of that streak.
    """

    threshold: float | None = None
    fraction: float = 0.9
    window: int = 50
    sustain: int = 20

    def __post_init__(self):
        if self.window < 1 or self.sustain < 1:
            raise ValueError("window and sustain must be at least 1")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")

    def satisfied(self, returns):
        r = np.asarray(returns, dtype=float)
        n = len(r)
        csum = np.concatenate([[0.0], np.cumsum(r)])
        lo = np.maximum(np.arange(n) + 1 - self.window, 0)
        means = (csum[1:] - csum[lo]) / (np.arange(n) + 1 - lo)
        if self.threshold is not None:
            return means >= self.threshold
        best = np.maximum.accumulate(r) if n else r
        ok = means >= best - (1.0 - self.fraction) * np.abs(best)
        ok[: self.window - 1] = False
        return ok

    def converged_at(self, returns):
        """First episode of the earliest completed streak, or None."""
        ok = self.satisfied(returns)
        streak = 0
        for k, flag in enumerate(ok):
            streak = streak + 1 if flag else 0
            if streak == self.sustain:
                return k - self.sustain + 1
        return None


def default_reward(mode):
    """Reward weights per regime.

    The pose and mean-pose terms charge only bending past the threshold and
    the action acceleration is the raw per-step second difference; with the
    literal forms any gait scores below standing still.
    """
    common = dict(pose_penalty="excess", accel_units="per_step", mean_penalty="bias")
    if mode == "MBRL":
        return RewardWeights(v_ref=0.2, **common)
    return RewardWeights(v_ref=0.3, eps4=100.0, **common)


def default_sac(mode):
    if mode == "MBRL":
        return SACConfig(max_episodes=400)
    if mode == "PT":
        return SACConfig(critic_lr=0.001, actor_lr=0.0005, max_episodes=400)
    return SACConfig(max_episodes=600)


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "MBRL"
    sac: SACConfig | None = None
    reward: RewardWeights | None = None
    expert_duration: float | None = None     # None: 1.6 s for PT, 0 otherwise
    convergence: ConvergenceRule = field(default_factory=ConvergenceRule)
    stop_on_convergence: bool = True
    seed: int = 0
    noise: bool = True
    gait: GaitWaveSpec = field(default_factory=GaitWaveSpec)
    checkpoint_every: int = 0
    reset_buffer: bool = True                # PT starts with an empty replay buffer

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.sac is None:
            object.__setattr__(self, "sac", default_sac(self.mode))
        if self.reward is None:
            object.__setattr__(self, "reward", default_reward(self.mode))
        if self.expert_duration is None:
            object.__setattr__(self, "expert_duration", 1.6 if self.mode == "PT" else 0.0)
        if self.expert_duration < 0:
            raise ValueError("expert_duration must be non-negative")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be non-negative")

    @property
    def expert_steps(self):
        return int(round(self.expert_duration / self.reward.T_s))


class ModeError(ValueError):
    pass


# --- environments -------------------------------------------------------------

def _noise_sd(cfg: PlantConfig):
    return np.sqrt(np.array([cfg.var_theta] * 3 + [cfg.var_v] * 3 + [cfg.var_fn] * 4))


class SurrogateEnv:
    """Episodes rolled out inside a learned dynamics model from the rest state."""

    kind = "surrogate"

    def __init__(self, model, plant_config: PlantConfig | None = None, noise=True):
        self.model = model
        self.plant_config = plant_config or PlantConfig()
        self.noise = noise
        self._sd = _noise_sd(self.plant_config)

    def reset(self, rng):
        self.rng = rng
        self.s = ReferencePlant.initial_state().as_array()
        return self._observe()

    def _observe(self):
        s = self.s
        if self.noise:
            s = s + self._sd * self.rng.standard_normal(STATE_DIM)
            s[6:] = np.clip(s[6:], 0.0, 1.0)
        return s

    def step(self, a):
        s2 = self.model.predict_states(self.s[None, :], np.asarray(a, dtype=float)[None, :])[0]
        if not np.all(np.isfinite(s2)):
            return None, None, True, True
        s2[6:] = np.clip(s2[6:], 0.0, 1.0)
        self.s = s2
        return self._observe(), s2, is_fallen(s2, self.plant_config), False


class PlantEnv:
    """Episodes on the reference plant; every step counts against the plant budget."""

    kind = "plant"

    def __init__(self, plant: ReferencePlant):
        self.plant = plant
        self.plant_config = plant.config

    def reset(self, rng):
        self.plant.reset(int(rng.integers(2**31)))
        return self.plant.observe().as_array()

    def step(self, a):
        out = self.plant.step(a)
        truth = self.plant.true_state
        if not np.all(np.isfinite(truth)):
            return None, None, True, True
        return out.next_state.as_array(), truth, out.fallen, False


# --- bookkeeping ----------------------------------------------------------------

@dataclass
class TrainingRun:
    mode: str
    seed: int
    rewards: list = field(default_factory=list)
    entropy: list = field(default_factory=list)
    temperature: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    plant_steps: list = field(default_factory=list)        # cumulative
    surrogate_steps: list = field(default_factory=list)    # cumulative
    wall_clock: list = field(default_factory=list)         # cumulative seconds
    fell: list = field(default_factory=list)
    truncated: list = field(default_factory=list)
    converged_episode: int | None = None
    checkpoint: str | None = None
    agent: SACAgent | None = field(default=None, repr=False, compare=False)

    @property
    def n_episodes(self):
        return len(self.rewards)

    @property
    def total_plant_steps(self):
        return self.plant_steps[-1] if self.plant_steps else 0

    @property
    def total_surrogate_steps(self):
        return self.surrogate_steps[-1] if self.surrogate_steps else 0

    @property
    def total_wall_clock(self):
        return self.wall_clock[-1] if self.wall_clock else 0.0

    def plant_steps_to_convergence(self):
        """Plant steps used up to the end of the convergence episode; inf if never converged."""
        if self.converged_episode is None:
            return math.inf
        return self.plant_steps[self.converged_episode]

    def traces(self):
        """Per-episode rows without the wall clock (the reproducible part)."""
        return [tuple(r[k] for k in EPISODE_COLUMNS if k != "wall_clock") for r in self.rows()]

    def rows(self):
        for k in range(self.n_episodes):
            yield {
                "episode": k, "reward": self.rewards[k], "entropy": self.entropy[k],
                "temperature": self.temperature[k], "steps": self.steps[k],
                "plant_steps": self.plant_steps[k], "surrogate_steps": self.surrogate_steps[k],
                "wall_clock": self.wall_clock[k], "fell": int(self.fell[k]),
                "truncated": int(self.truncated[k]),
            }

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=EPISODE_COLUMNS)
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})

    @classmethod
    def from_csv(cls, path, mode, seed):
        run = cls(mode, seed)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                run.rewards.append(float(row["reward"]))
                run.entropy.append(float(row["entropy"]))
                run.temperature.append(float(row["temperature"]))
                run.steps.append(int(row["steps"]))
                run.plant_steps.append(int(row["plant_steps"]))
                run.surrogate_steps.append(int(row["surrogate_steps"]))
                run.wall_clock.append(float(row["wall_clock"]))
                run.fell.append(bool(int(row["fell"])))
                run.truncated.append(bool(int(row["truncated"])))
        return run


def adopt_config(agent: SACAgent, sac: SACConfig, reset_buffer=False):
    """Move an agent onto new hyper-parameters, keeping networks and optimizer moments."""
    agent.set_learning_rates(sac.actor_lr, sac.critic_lr, sac.alpha_lr)
    agent.config_ = sac
    if reset_buffer or agent.buffer.capacity != sac.buffer_capacity:
        old = agent.buffer
        agent.buffer = ReplayBuffer(sac.buffer_capacity)
        if not reset_buffer:
            S, A, R, S2, D = old.contents()
            for row in zip(S, A, R, S2, D):
                agent.buffer.add(*row)
    return agent


# --- the shared loop ------------------------------------------------------------

def run_episode(agent, env, weights: RewardWeights, max_steps, rng, expert_actions=None,
                learn=True, step_offset=0, deterministic=False):
    """Roll one episode; returns a dict with the return and per-step records.

    ``expert_actions`` (k, 4) replaces the agent's first k actions.
    """
    obs = env.reset(rng)
    prev = np.zeros(ACTION_DIM)
    history = []
    total, logps, actions = 0.0, [], []
    fell = truncated = False
    n_expert = 0 if expert_actions is None else len(expert_actions)
    k = 0
    for k in range(max_steps):
        x = np.concatenate([obs, prev])
        if k < n_expert:
            a = np.asarray(expert_actions[k], dtype=float)
        else:
            a, logp = agent.sample_action(x, deterministic=deterministic)
            logps.append(logp)
        obs2, clean, fell, truncated = env.step(a)
        if truncated:
            log.warning("%s produced a non-finite state at step %d; episode truncated", env.kind, k)
            break
        terms = reward_terms(clean, a, history, weights)
        if fell:
            terms[0] = 0.0
        r = float(terms.sum())
        total += r
        actions.append(a)
        x2 = np.concatenate([obs2, a])
        if learn:
            agent.observe(x, a, r, x2, float(fell))
            agent.train_step(step_offset + k + 1)
        history.append(a)
        prev, obs = a, obs2
        if fell:
            break
    n = len(actions)
    entropy = -float(np.mean(logps)) if logps else float("nan")
    return {"reward": total, "steps": n, "fell": fell, "truncated": truncated,
            "entropy": entropy, "actions": np.array(actions).reshape(-1, ACTION_DIM)}


def _episode_rng(seed, episode):
    return np.random.default_rng([int(seed), int(episode), 7])


def _train(agent, env, config: PipelineConfig, run_dir=None, resume=False):
    cfg = config.sac
    run = TrainingRun(config.mode, config.seed, agent=agent)
    start = 0
    t_prior = 0.0
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        ck, ep_csv = os.path.join(run_dir, "checkpoint.npz"), os.path.join(run_dir, "episodes.csv")
        if resume and os.path.exists(ck) and os.path.exists(ep_csv):
            agent = SACAgent.load(ck)
            run = TrainingRun.from_csv(ep_csv, config.mode, config.seed)
            run.agent = agent
            start = run.n_episodes
            t_prior = run.total_wall_clock
            run.converged_episode = config.convergence.converged_at(run.rewards)
            if run.converged_episode is not None and config.stop_on_convergence:
                start = cfg.max_episodes
    expert = None
    if config.expert_steps:
        t = np.arange(config.expert_steps) * config.reward.T_s
        expert = expert_gait_array(t, config.gait, env.plant_config.limits)
    on_plant = env.kind == "plant"
    plant_total = run.total_plant_steps
    sur_total = run.total_surrogate_steps
    t0 = time.perf_counter()
    step_offset = sum(run.steps)
    for ep in range(start, cfg.max_episodes):
        out = run_episode(agent, env, config.reward, cfg.max_steps, _episode_rng(config.seed, ep),
                          expert_actions=expert, step_offset=step_offset)
        step_offset += out["steps"]
        if on_plant:
            plant_total += out["steps"]
        else:
            sur_total += out["steps"]
        run.rewards.append(out["reward"])
        run.entropy.append(out["entropy"])
        run.temperature.append(agent.alpha)
        run.steps.append(out["steps"])
        run.plant_steps.append(plant_total)
        run.surrogate_steps.append(sur_total)
        run.wall_clock.append(t_prior + time.perf_counter() - t0)
        run.fell.append(out["fell"])
        run.truncated.append(out["truncated"])
        if run_dir is not None and config.checkpoint_every and (ep + 1) % config.checkpoint_every == 0:
            _persist(run, agent, run_dir)
        if run.converged_episode is None:
            run.converged_episode = config.convergence.converged_at(run.rewards)
            if run.converged_episode is not None:
                log.info("%s seed %d converged at episode %d", config.mode, config.seed, run.converged_episode)
                if config.stop_on_convergence:
                    break
    if run_dir is not None:
        _persist(run, agent, run_dir)
    return run


def _persist(run, agent, run_dir):
    ck = os.path.join(run_dir, "checkpoint.npz")
    agent.save(ck)
    run.to_csv(os.path.join(run_dir, "episodes.csv"))
    run.checkpoint = ck


def _require_mode(config, mode):
    if config.mode != mode:
        raise ModeError(f"this stage runs in {mode} mode, config says {config.mode}")


def run_mbrl(surrogate, config: PipelineConfig, plant_config=None, run_dir=None, resume=False, agent=None):
    """SAC entirely inside the surrogate. Consumes no plant steps."""
    _require_mode(config, "MBRL")
    agent = agent or SACAgent(config.sac, seed=config.seed)
    env = SurrogateEnv(surrogate, plant_config, noise=config.noise)
    return _train(agent, env, config, run_dir, resume)


def run_post_training(checkpoint, plant: ReferencePlant, config: PipelineConfig, run_dir=None, resume=False):
    """Continue a surrogate-trained agent on the plant, each episode opening with the expert gait."""
    _require_mode(config, "PT")
    if isinstance(checkpoint, SACAgent):
        agent = SACAgent.load_state(checkpoint.state_dict())
    else:
        if not os.path.exists(checkpoint):
            raise FileNotFoundError(f"no agent checkpoint at {checkpoint}; train the model-based stage first")
        agent = SACAgent.load(checkpoint)
    adopt_config(agent, config.sac, reset_buffer=config.reset_buffer)
    plant.noise = config.noise
    return _train(agent, PlantEnv(plant), config, run_dir, resume)


def run_mfrl(plant: ReferencePlant, config: PipelineConfig, run_dir=None, resume=False):
    """SAC from scratch on the plant."""
    _require_mode(config, "MFRL")
    agent = SACAgent(config.sac, seed=config.seed)
    plant.noise = config.noise
    return _train(agent, PlantEnv(plant), config, run_dir, resume)


def surrogate_return(agent, surrogate, weights: RewardWeights, max_steps=100, plant_config=None, seed=0):
    """Deterministic, noise-free return of the agent inside the surrogate."""
    env = SurrogateEnv(surrogate, plant_config, noise=False)
    out = run_episode(agent, env, weights, max_steps, np.random.default_rng(seed), learn=False, deterministic=True)
    return out["reward"]
