"""Soft actor-critic on top of the numpy MLP substrate.

Actor: 14 -> 256 -> 128 -> 128 -> (mean 4, softplus-std 4), tanh-squashed and
shifted to [0, 1]. Critics: observation branch 14 -> 128 -> 128, action branch
4 -> 128, concatenated into a 32-unit ReLU layer and a scalar head. Two
critics with target copies, automatic temperature on log(alpha).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array

from . import nn
from .plant import ACTION_DIM, STATE_DIM

OBS_DIM = STATE_DIM + ACTION_DIM
LOG2 = math.log(2.0)
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
CHECKPOINT_VERSION = 1


def _power_of_two(n):
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class SACConfig:
    critic_lr: float = 0.002
    actor_lr: float = 0.001
    alpha_lr: float = 0.001
    batch_size: int = 4096
    buffer_capacity: int = 16384
    target_entropy: float = -4.0
    policy_period: int = 3
    max_episodes: int = 400
    max_steps: int = 100
    gamma: float = 0.99
    tau: float = 0.005
    initial_alpha: float = 0.2
    min_std: float = 1e-4

    def __post_init__(self):
        for name in ("buffer_capacity", "batch_size"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or not _power_of_two(int(value)):
                raise ValueError(f"{name} must be a positive power of two, got {value}")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size cannot exceed buffer_capacity")
        if not self.target_entropy < 0:
            raise ValueError("target_entropy must be negative")
        for name in ("critic_lr", "actor_lr", "alpha_lr", "initial_alpha"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.policy_period < 1 or self.max_episodes < 1 or self.max_steps < 1:
            raise ValueError("policy_period, max_episodes and max_steps must be at least 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")


# --- reward ---------------------------------------------------------------

@dataclass(frozen=True)
class RewardWeights:
    """Weights of the gait reward.

    ``eps2=None`` means 1/v_ref. Two switches choose how literally the pose
    and smoothness terms are read:

    * ``pose_penalty="absolute"`` charges eps4*||a - sigma_threshold||;
      ``"excess"`` charges only the part above the threshold,
      eps4*||max(a - sigma_threshold, 0)||.
    * ``accel_units="per_s2"`` divides the second difference of actions by
      T_s**2; ``"per_step"`` uses the raw second difference.
    * ``mean_penalty="deviation"`` charges eps5*sum((a - mean)**2) with the
      mean over the last T_mean actions; ``"bias"`` charges the horizon mean
      leaning past the threshold, eps5*sum(max(mean - sigma_threshold, 0)**2),
      so a steady oscillation is free while persistent bending is not.
    """

    eps1: float = 5.0
    eps2: float | None = None
    eps3: float = 0.25
    eps4: float = 10.0
    eps5: float = 3.0
    v_ref: float = 0.2
    sigma_threshold: tuple = (0.5, 0.5, 0.5, 0.5)
    T_mean: int = 20
    T_s: float = 0.05
    T_f: float = 5.0
    pose_penalty: str = "absolute"
    accel_units: str = "per_s2"
    mean_penalty: str = "deviation"

    def __post_init__(self):
        object.__setattr__(self, "sigma_threshold", tuple(float(x) for x in np.broadcast_to(self.sigma_threshold, (ACTION_DIM,))))
        if not self.v_ref > 0:
            raise ValueError("v_ref must be positive")
        for name in ("eps1", "eps3", "eps4", "eps5"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.eps2 is not None and self.eps2 < 0:
            raise ValueError("eps2 must be non-negative")
        if self.T_mean < 1 or not self.T_s > 0 or not self.T_f > 0:
            raise ValueError("T_mean, T_s and T_f must be positive")
        if self.pose_penalty not in ("absolute", "excess"):
            raise ValueError("pose_penalty must be 'absolute' or 'excess'")
        if self.accel_units not in ("per_s2", "per_step"):
            raise ValueError("accel_units must be 'per_s2' or 'per_step'")
        if self.mean_penalty not in ("deviation", "bias"):
            raise ValueError("mean_penalty must be 'deviation' or 'bias'")

    @property
    def speed_weight(self):
        return 1.0 / self.v_ref if self.eps2 is None else self.eps2


def _padded(history, n):
    """Last n rows of history (oldest first), zero-padded at the front."""
    out = np.zeros((n, ACTION_DIM))
    if n and len(history):
        h = np.asarray(history, dtype=float).reshape(-1, ACTION_DIM)[-n:]
        out[n - len(h):] = h
    return out


def reward_terms(state, action, recent_actions, w: RewardWeights):
    """The five reward terms, already signed; ``recent_actions`` ends with a_{t-1}."""
    s = np.asarray(state, dtype=float)
    a = np.asarray(action, dtype=float)
    prev = _padded(recent_actions, max(2, w.T_mean - 1))
    accel = a - 2.0 * prev[-1] + prev[-2]
    if w.accel_units == "per_s2":
        accel = accel / w.T_s**2
    dev = a - np.asarray(w.sigma_threshold)
    if w.pose_penalty == "excess":
        dev = np.maximum(dev, 0.0)
    window = np.vstack([prev[len(prev) - (w.T_mean - 1):] if w.T_mean > 1 else prev[:0], a[None, :]])
    if w.mean_penalty == "bias":
        mean_dev = np.maximum(window.mean(axis=0) - np.asarray(w.sigma_threshold), 0.0)
    else:
        mean_dev = a - window.mean(axis=0)
    return np.array([
        w.eps1 * w.T_s / w.T_f,
        1.0 - w.speed_weight * abs(s[3] - w.v_ref),
        -w.eps3 * np.linalg.norm(accel),
        -w.eps4 * np.linalg.norm(dev),
        -w.eps5 * float(np.sum(mean_dev**2)),
    ])


def reward(state, action, recent_actions, w: RewardWeights = RewardWeights()) -> float:
    return float(np.sum(reward_terms(state, action, recent_actions, w)))


# --- replay ---------------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity FIFO ring of (s, a, r, s_next, done)."""

    def __init__(self, capacity=16384, obs_dim=OBS_DIM, act_dim=ACTION_DIM):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, act_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.n_inserted = 0

    def __len__(self):
        return min(self.n_inserted, self.capacity)

    def add(self, s, a, r, s2, done):
        k = self.n_inserted % self.capacity
        self.s[k], self.a[k], self.r[k], self.s2[k], self.done[k] = s, a, r, s2, float(done)
        self.n_inserted += 1

    def _order(self):
        n = len(self)
        start = self.n_inserted % self.capacity if self.n_inserted > self.capacity else 0
        return (start + np.arange(n)) % self.capacity

    def contents(self):
        """All stored transitions, oldest first."""
        idx = self._order()
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx]

    def sample(self, batch_size, rng):
        n = len(self)
        if batch_size > n:
            raise ValueError(f"buffer holds {n} transitions, fewer than batch {batch_size}")
        idx = rng.choice(n, size=batch_size, replace=False)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx]

    def state_dict(self):
        return {"s": self.s, "a": self.a, "r": self.r, "s2": self.s2, "done": self.done,
                "n_inserted": np.array(self.n_inserted)}

    def load_state_dict(self, d):
        for k in ("s", "a", "r", "s2", "done"):
            setattr(self, k, np.array(d[k]))
        self.capacity = len(self.r)
        self.n_inserted = int(d["n_inserted"])


# --- networks ---------------------------------------------------------------

ACTOR_SPEC = nn.MLPSpec.hidden(OBS_DIM, (256, 128, 128), 2 * ACTION_DIM)
CRITIC_OBS_SPEC = nn.MLPSpec((OBS_DIM, 128, 128), ("relu", "relu"))
CRITIC_ACT_SPEC = nn.MLPSpec((ACTION_DIM, 128), ("relu",))
CRITIC_HEAD_SPEC = nn.MLPSpec((256, 32, 1), ("relu", "linear"))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def squashed_log_prob(u, mu, sigma):
    """log density of a = (1 + tanh(u)) / 2 with u ~ N(mu, sigma^2), summed over the last axis."""
    eps = (u - mu) / sigma
    log_gauss = -0.5 * eps * eps - np.log(sigma) - LOG_SQRT_2PI
    # log |da/du| = log(0.5 * (1 - tanh(u)^2)), written stably
    log_jac = 2.0 * (LOG2 - u - _softplus(-2.0 * u)) - LOG2
    return np.sum(log_gauss - log_jac, axis=-1)


@dataclass(frozen=True, eq=False)
class Critic:
    obs: nn.MLPParams
    act: nn.MLPParams
    head: nn.MLPParams

    @classmethod
    def init(cls, seed):
        ss = np.random.SeedSequence(seed).generate_state(3)
        return cls(nn.init_params(CRITIC_OBS_SPEC, int(ss[0])),
                   nn.init_params(CRITIC_ACT_SPEC, int(ss[1])),
                   nn.init_params(CRITIC_HEAD_SPEC, int(ss[2])))

    def parts(self):
        return (self.obs, self.act, self.head)

    def forward(self, S, A):
        ho, co = nn.forward(self.obs, S)
        ha, ca = nn.forward(self.act, A)
        q, ch = nn.forward(self.head, np.hstack([ho, ha]))
        return q[:, 0], (co, ca, ch)

    def q(self, S, A):
        ho = nn.predict(self.obs, S)
        ha = nn.predict(self.act, A)
        return nn.predict(self.head, np.hstack([ho, ha]))[:, 0]

    def backward(self, caches, grad_q):
        co, ca, ch = caches
        gh = nn.backward(self.head, ch, grad_q[:, None])
        width = CRITIC_OBS_SPEC.widths[-1]
        go = nn.backward(self.obs, co, gh.inputs[:, :width])
        ga = nn.backward(self.act, ca, gh.inputs[:, width:])
        return (go, ga, gh), ga.inputs

    def soft_update(self, online: "Critic", tau):
        return Critic(*(nn.soft_update(t, o, tau) for t, o in zip(self.parts(), online.parts())))


def _adam_for(params_list, lr):
    return [nn.AdamState.zeros_like(p, lr=lr) for p in params_list]


def actor_loss_and_grad(actor, critics, S, eps, alpha, min_std=1e-4):
    """mean(alpha * log pi(a|s) - min_k Q_k(s, a)) with a reparameterised by eps.

    Returns (loss, actor gradients, log-probabilities).
    """
    n = len(S)
    out, cache = nn.forward(actor, S)
    if not np.all(np.isfinite(out)):
        raise nn.NonFiniteError("actor produced non-finite outputs")
    mu, rho = out[:, :ACTION_DIM], out[:, ACTION_DIM:]
    sigma = _softplus(rho) + min_std
    u = mu + sigma * eps
    y = np.tanh(u)
    a = 0.5 * (1.0 + y)
    logp = squashed_log_prob(u, mu, sigma)

    q1, c1 = critics[0].forward(S, a)
    q2, c2 = critics[1].forward(S, a)
    use_first = q1 <= q2
    q_min = np.where(use_first, q1, q2)
    _, da1 = critics[0].backward(c1, use_first.astype(float))
    _, da2 = critics[1].backward(c2, (~use_first).astype(float))
    dq_du = (da1 + da2) * 0.5 * (1.0 - y * y)

    # d log pi / du through the squash; the Gaussian part depends on eps only
    dlogp_du = 2.0 * y
    d_mu = alpha * dlogp_du - dq_du
    d_sigma = alpha * (-1.0 / sigma + dlogp_du * eps) - dq_du * eps
    d_rho = d_sigma * _sigmoid(rho)
    grads = nn.backward(actor, cache, np.hstack([d_mu, d_rho]) / n)
    return float(np.mean(alpha * logp - q_min)), grads, logp


# --- agent -------------------------------------------------------------------

class SACAgent(BaseEstimator):
    """Twin-critic SAC with automatic temperature.

    ``predict(X)`` returns deterministic (squashed-mean) actions for a batch of
    14-dim augmented states.
    """

    def __init__(self, config: SACConfig | None = None, seed=0):
        self.config = config
        self.seed = seed
        self._build()

    def _build(self):
        cfg = self.config_ = self.config or SACConfig()
        ss = np.random.SeedSequence(self.seed).generate_state(4)
        self.actor = nn.init_params(ACTOR_SPEC, int(ss[0]))
        self.critics = [Critic.init(int(ss[1])), Critic.init(int(ss[2]))]
        self.targets = [Critic(*c.parts()) for c in self.critics]
        self.log_alpha = math.log(cfg.initial_alpha)
        self.actor_opt = nn.AdamState.zeros_like(self.actor, lr=cfg.actor_lr)
        self.critic_opts = [_adam_for(c.parts(), cfg.critic_lr) for c in self.critics]
        self.alpha_opt = nn.AdamState((np.zeros(1),), (np.zeros(1),), 0, cfg.alpha_lr)
        self.rng = np.random.default_rng(int(ss[3]))
        self.buffer = ReplayBuffer(cfg.buffer_capacity)
        self.n_updates = 0
        self.update_alpha = True

    @property
    def alpha(self):
        return math.exp(self.log_alpha)

    def set_learning_rates(self, actor_lr=None, critic_lr=None, alpha_lr=None):
        """Swap learning rates while keeping the Adam moments."""
        if actor_lr is not None:
            self.actor_opt = replace(self.actor_opt, lr=actor_lr)
        if critic_lr is not None:
            self.critic_opts = [[replace(o, lr=critic_lr) for o in opts] for opts in self.critic_opts]
        if alpha_lr is not None:
            self.alpha_opt = replace(self.alpha_opt, lr=alpha_lr)
        self.config_ = replace(self.config_, **{k: v for k, v in
                               (("actor_lr", actor_lr), ("critic_lr", critic_lr), ("alpha_lr", alpha_lr))
                               if v is not None})

    # -- policy --------------------------------------------------------------
    def _dist(self, S, params=None):
        out, cache = nn.forward(params or self.actor, S)
        if not np.all(np.isfinite(out)):
            raise nn.NonFiniteError("actor produced non-finite outputs")
        mu, rho = out[:, :ACTION_DIM], out[:, ACTION_DIM:]
        sigma = _softplus(rho) + self.config_.min_std
        return mu, rho, sigma, cache

    def sample_action(self, s, deterministic=False, rng=None):
        """Action(s) in [0, 1]^4 and their log-probabilities."""
        S = np.asarray(s, dtype=float)
        single = S.ndim == 1
        S = np.atleast_2d(S)
        if S.shape[1] != OBS_DIM:
            raise ValueError(f"augmented state must have {OBS_DIM} components")
        mu, _, sigma, _ = self._dist(S)
        if deterministic:
            u = mu
        else:
            rng = self.rng if rng is None else rng
            u = mu + sigma * rng.standard_normal(mu.shape)
        a = 0.5 * (1.0 + np.tanh(u))
        logp = squashed_log_prob(u, mu, sigma)
        return (a[0], float(logp[0])) if single else (a, logp)

    def predict(self, X):
        X = check_array(X)
        return self.sample_action(X, deterministic=True)[0]

    # -- learning ------------------------------------------------------------
    def observe(self, s, a, r, s2, done):
        self.buffer.add(s, a, r, s2, done)

    def ready(self):
        return len(self.buffer) >= self.config_.batch_size

    def train_step(self, env_step):
        """One scheduled update after environment step ``env_step`` (1-based)."""
        if not self.ready():
            return None
        batch = self.buffer.sample(self.config_.batch_size, self.rng)
        return self.update(batch, update_policy=(env_step % self.config_.policy_period == 0))

    def update(self, batch, update_policy=True):
        cfg = self.config_
        S, A, R, S2, D = batch
        n = len(R)
        alpha = self.alpha

        # critic targets
        mu2, _, sig2, _ = self._dist(S2)
        u2 = mu2 + sig2 * self.rng.standard_normal(mu2.shape)
        a2 = 0.5 * (1.0 + np.tanh(u2))
        logp2 = squashed_log_prob(u2, mu2, sig2)
        q_targ = np.minimum(self.targets[0].q(S2, a2), self.targets[1].q(S2, a2))
        y = R + cfg.gamma * (1.0 - D) * (q_targ - alpha * logp2)

        diag = {}
        new_critics, new_opts = [], []
        for k, (critic, opts) in enumerate(zip(self.critics, self.critic_opts)):
            q, caches = critic.forward(S, A)
            err = q - y
            loss = 0.5 * float(np.mean(err * err))
            if not math.isfinite(loss):
                raise nn.NonFiniteError(f"critic {k} loss is non-finite (mean target {np.mean(y)})")
            grads, _ = critic.backward(caches, err / n)
            parts = []
            updated_opts = []
            for p, g, o in zip(critic.parts(), grads, opts):
                p2, o2 = nn.optimizer_step(p, g, o)
                parts.append(p2)
                updated_opts.append(o2)
            new_critics.append(Critic(*parts))
            new_opts.append(updated_opts)
            diag[f"critic{k + 1}_loss"] = loss
        self.critics, self.critic_opts = new_critics, new_opts

        if update_policy:
            diag.update(self._policy_update(S))
        self.targets = [t.soft_update(c, cfg.tau) for t, c in zip(self.targets, self.critics)]
        self.n_updates += 1
        diag["alpha"] = self.alpha
        diag["q_target_mean"] = float(np.mean(y))
        return diag

    def _policy_update(self, S):
        cfg = self.config_
        alpha = self.alpha
        eps = self.rng.standard_normal((len(S), ACTION_DIM))
        loss, grads, logp = actor_loss_and_grad(self.actor, self.critics, S, eps, alpha, cfg.min_std)
        self.actor, self.actor_opt = nn.optimizer_step(self.actor, grads, self.actor_opt)
        entropy = -float(np.mean(logp))
        if self.update_alpha:
            # J(alpha) = mean(-alpha * (logp + H')); gradient w.r.t. log(alpha)
            g = -alpha * (float(np.mean(logp)) + cfg.target_entropy)
            (la,), self.alpha_opt = nn.adam_update([np.array([self.log_alpha])], [np.array([g])],
                                                   self.alpha_opt, names=["log_alpha"])
            self.log_alpha = float(la[0])
        return {"actor_loss": loss, "entropy": entropy}

    # -- persistence -----------------------------------------------------------
    def state_dict(self, include_buffer=True):
        d = {}
        d.update(nn.params_to_npz_dict(self.actor, "actor_"))
        for k, (c, t) in enumerate(zip(self.critics, self.targets)):
            for name, p in zip(("obs", "act", "head"), c.parts()):
                d.update(nn.params_to_npz_dict(p, f"critic{k}_{name}_"))
            for name, p in zip(("obs", "act", "head"), t.parts()):
                d.update(nn.params_to_npz_dict(p, f"target{k}_{name}_"))
        opts = {"actor": self.actor_opt, "alpha": self.alpha_opt}
        for k, group in enumerate(self.critic_opts):
            for name, o in zip(("obs", "act", "head"), group):
                opts[f"critic{k}_{name}"] = o
        for key, o in opts.items():
            for i, (m, v) in enumerate(zip(o.m, o.v)):
                d[f"opt_{key}_m{i}"] = m
                d[f"opt_{key}_v{i}"] = v
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config_),
            "seed": self.seed,
            "log_alpha": self.log_alpha,
            "n_updates": self.n_updates,
            "update_alpha": self.update_alpha,
            "optimizers": {k: {"n": len(o.m), "step": o.step, "lr": o.lr, "beta1": o.beta1,
                               "beta2": o.beta2, "eps": o.eps} for k, o in opts.items()},
            "rng": self.rng.bit_generator.state,
        }
        d["meta"] = np.array(json.dumps(meta))
        if include_buffer:
            for k, v in self.buffer.state_dict().items():
                d[f"buffer_{k}"] = v
        return d

    def save(self, path, include_buffer=True):
        with open(path, "wb") as fh:
            np.savez(fh, **self.state_dict(include_buffer))

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as data:
            return cls.load_state({k: data[k] for k in data.files})

    @classmethod
    def load_state(cls, data):
        """Rebuild an agent from ``state_dict()`` output."""
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        agent = cls(SACConfig(**meta["config"]), meta["seed"])
        agent.actor = nn.params_from_npz_dict(data, "actor_")
        for k in range(2):
            agent.critics[k] = Critic(*(nn.params_from_npz_dict(data, f"critic{k}_{n}_") for n in ("obs", "act", "head")))
            agent.targets[k] = Critic(*(nn.params_from_npz_dict(data, f"target{k}_{n}_") for n in ("obs", "act", "head")))

        def opt(key):
            o = meta["optimizers"][key]
            m = tuple(np.array(data[f"opt_{key}_m{i}"]) for i in range(o["n"]))
            v = tuple(np.array(data[f"opt_{key}_v{i}"]) for i in range(o["n"]))
            return nn.AdamState(m, v, o["step"], o["lr"], o["beta1"], o["beta2"], o["eps"])

        agent.actor_opt = opt("actor")
        agent.alpha_opt = opt("alpha")
        agent.critic_opts = [[opt(f"critic{k}_{n}") for n in ("obs", "act", "head")] for k in range(2)]
        agent.log_alpha = meta["log_alpha"]
        agent.n_updates = meta["n_updates"]
        agent.update_alpha = meta["update_alpha"]
        agent.rng.bit_generator.state = meta["rng"]
        if "buffer_r" in data:
            agent.buffer.load_state_dict({k[7:]: data[k] for k in data if k.startswith("buffer_")})
        return agent
