import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from softq_lab import nn
from softq_lab.sac import (
    OBS_DIM, ReplayBuffer, RewardWeights, SACAgent, SACConfig, actor_loss_and_grad, reward, reward_terms,
    squashed_log_prob,
)

SMALL = SACConfig(batch_size=16, buffer_capacity=64)


def test_config_defaults_and_validation():
    c = SACConfig()
    assert (c.critic_lr, c.actor_lr, c.alpha_lr) == (0.002, 0.001, 0.001)
    assert (c.batch_size, c.buffer_capacity, c.target_entropy, c.policy_period) == (4096, 16384, -4.0, 3)
    bad = [dict(buffer_capacity=0), dict(buffer_capacity=100), dict(batch_size=48),
           dict(batch_size=64, buffer_capacity=32), dict(target_entropy=0.0), dict(actor_lr=0.0),
           dict(policy_period=0), dict(gamma=1.5), dict(tau=0.0)]
    for kw in bad:
        with pytest.raises(ValueError):
            SACConfig(**kw)


# --- reward -------------------------------------------------------------------

def test_reward_terms_by_hand():
    w = RewardWeights()
    s = np.zeros(10)
    s[3] = 0.1
    a = np.array([0.6, 0.5, 0.5, 0.5])
    prev = [np.full(4, 0.5), np.full(4, 0.5)]
    t = reward_terms(s, a, prev, w)
    assert t[0] == pytest.approx(5.0 * 0.05 / 5.0)
    assert t[1] == pytest.approx(1.0 - (1 / 0.2) * 0.1)
    assert t[2] == pytest.approx(-0.25 * 0.1 / 0.05**2)
    assert t[3] == pytest.approx(-10.0 * 0.1)
    window = np.vstack([np.zeros((17, 4)), prev, a[None]])
    assert t[4] == pytest.approx(-3.0 * np.sum((a - window.mean(0)) ** 2))
    assert reward(s, a, prev, w) == pytest.approx(t.sum())


def test_reward_switches():
    s = np.zeros(10)
    a = np.array([0.2, 0.2, 0.2, 0.2])
    prev = [a, a]
    ex = reward_terms(s, a, prev, RewardWeights(pose_penalty="excess"))
    assert ex[3] == 0.0                      # below the threshold is free
    ab = reward_terms(s, a, prev, RewardWeights())
    assert ab[3] == pytest.approx(-10.0 * np.linalg.norm(a - 0.5))
    step = reward_terms(s, a + [0.1, 0, 0, 0], prev, RewardWeights(accel_units="per_step"))
    assert step[2] == pytest.approx(-0.25 * 0.1)
    hist = [np.full(4, 0.2)] * 19
    bias = reward_terms(s, np.full(4, 0.8), hist, RewardWeights(mean_penalty="bias"))
    mean = (19 * 0.2 + 0.8) / 20      # below threshold, so no charge
    assert mean < 0.5 and bias[4] == 0.0
    high = reward_terms(s, np.full(4, 0.9), [np.full(4, 0.9)] * 19, RewardWeights(mean_penalty="bias"))
    assert high[4] == pytest.approx(-3.0 * 4 * 0.4**2)


def test_reward_eps2_override_and_validation():
    w = RewardWeights(eps2=2.0, v_ref=0.3)
    assert w.speed_weight == 2.0
    assert RewardWeights(v_ref=0.25).speed_weight == 4.0
    for kw in (dict(v_ref=0.0), dict(eps1=-1.0), dict(eps2=-1.0), dict(T_mean=0),
               dict(pose_penalty="x"), dict(accel_units="x"), dict(mean_penalty="x")):
        with pytest.raises(ValueError):
            RewardWeights(**kw)


# --- replay ----------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(1, 16), st.integers(0, 60))
def test_replay_fifo(capacity, n):
    buf = ReplayBuffer(capacity, obs_dim=1, act_dim=1)
    for k in range(n):
        buf.add([k], [k], k, [k + 1], k % 2)
    assert len(buf) == min(n, capacity)
    _, _, r, s2, done = buf.contents()
    expect = np.arange(max(0, n - capacity), n)
    assert np.array_equal(r, expect)
    assert np.array_equal(s2[:, 0], expect + 1)
    assert np.array_equal(done, expect % 2)


def test_replay_sample(rng):
    buf = ReplayBuffer(8, obs_dim=1, act_dim=1)
    with pytest.raises(ValueError):
        buf.sample(1, rng)
    for k in range(5):
        buf.add([k], [k], k, [k], 0)
    s, a, r, s2, d = buf.sample(5, rng)
    assert sorted(r.tolist()) == [0, 1, 2, 3, 4]
    with pytest.raises(ValueError):
        buf.sample(6, rng)
    with pytest.raises(ValueError):
        ReplayBuffer(0)


def test_replay_state_round_trip():
    buf = ReplayBuffer(4, obs_dim=2, act_dim=1)
    for k in range(6):
        buf.add([k, -k], [k], k, [k, k], 0)
    other = ReplayBuffer(4, obs_dim=2, act_dim=1)
    other.load_state_dict(buf.state_dict())
    for x, y in zip(buf.contents(), other.contents()):
        assert np.array_equal(x, y)


# --- policy density and gradients ------------------------------------------------------

def test_squashed_density_integrates_to_one():
    mu, sigma = np.array([0.3]), np.array([0.7])
    a = np.linspace(1e-6, 1 - 1e-6, 200001)
    u = np.arctanh(2 * a - 1)
    dens = np.exp(squashed_log_prob(u[:, None], mu, sigma))
    assert np.trapezoid(dens, a) == pytest.approx(1.0, abs=1e-4)


def test_actions_in_unit_box_and_deterministic_mode():
    ag = SACAgent(SMALL, seed=1)
    X = np.random.default_rng(0).normal(size=(20, OBS_DIM))
    a, logp = ag.sample_action(X)
    assert a.shape == (20, 4) and logp.shape == (20,)
    assert a.min() >= 0 and a.max() <= 1
    assert np.array_equal(ag.predict(X), ag.predict(X))
    with pytest.raises(ValueError):
        ag.sample_action(np.zeros(10))


def _fd_check(f, params, grads, rng, n_checks=25, h=1e-6):
    arrays = params.arrays()
    for _ in range(n_checks):
        k = rng.integers(len(arrays))
        idx = tuple(rng.integers(s) for s in arrays[k].shape)
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[k][idx] += h
        minus[k][idx] -= h
        num = (f(nn.MLPParams.from_arrays(params.spec, plus)) - f(nn.MLPParams.from_arrays(params.spec, minus))) / (2 * h)
        ana = grads.arrays()[k][idx]
        assert abs(num - ana) <= 1e-5 * max(1.0, abs(num)), (k, idx, num, ana)


def test_actor_gradient_finite_difference(rng):
    ag = SACAgent(SMALL, seed=2)
    S = rng.normal(size=(8, OBS_DIM))
    eps = rng.normal(size=(8, 4))
    _, grads, _ = actor_loss_and_grad(ag.actor, ag.critics, S, eps, 0.3)
    f = lambda p: actor_loss_and_grad(p, ag.critics, S, eps, 0.3)[0]
    _fd_check(f, ag.actor, grads, rng)


def test_critic_gradient_finite_difference(rng):
    ag = SACAgent(SMALL, seed=3)
    c = ag.critics[0]
    S, A = rng.normal(size=(6, OBS_DIM)), rng.uniform(size=(6, 4))
    y = rng.normal(size=6)
    q, caches = c.forward(S, A)
    grads, _ = c.backward(caches, (q - y) / 6)

    from softq_lab.sac import Critic
    def loss(head):
        return 0.5 * float(np.mean((Critic(c.obs, c.act, head).q(S, A) - y) ** 2))
    _fd_check(loss, c.head, grads[2], rng)


# --- updates -----------------------------------------------------------------------

def _filled_agent(seed=0, n=40):
    ag = SACAgent(SMALL, seed=seed)
    rng = np.random.default_rng(seed)
    for _ in range(n):
        s, s2 = rng.normal(size=OBS_DIM), rng.normal(size=OBS_DIM)
        ag.observe(s, rng.uniform(size=4), rng.normal(), s2, rng.uniform() < 0.1)
    return ag


def test_train_step_waits_for_batch():
    ag = SACAgent(SMALL, seed=0)
    ag.observe(np.zeros(OBS_DIM), np.zeros(4), 0.0, np.zeros(OBS_DIM), 0)
    assert ag.train_step(1) is None


def test_target_soft_update_is_exact():
    ag = _filled_agent()
    old_targets = [c.parts() for c in ag.targets]
    ag.train_step(1)
    tau = SMALL.tau
    for old, tgt, online in zip(old_targets, ag.targets, ag.critics):
        for o, t, c in zip(old, tgt.parts(), online.parts()):
            for x, y, z in zip(o.arrays(), t.arrays(), c.arrays()):
                assert np.array_equal(y, (1.0 - tau) * x + tau * z)


def test_policy_updates_on_schedule():
    ag = _filled_agent()
    actor0, alpha0 = ag.actor, ag.log_alpha
    d = ag.train_step(1)
    assert ag.actor is actor0 and ag.log_alpha == alpha0 and "actor_loss" not in d
    d = ag.train_step(3)
    assert ag.actor is not actor0 and ag.log_alpha != alpha0 and "entropy" in d


def test_learning_rate_swap_keeps_moments():
    ag = _filled_agent()
    ag.train_step(3)
    m = ag.actor_opt.m[0].copy()
    ag.set_learning_rates(actor_lr=5e-4, critic_lr=1e-3)
    assert ag.actor_opt.lr == 5e-4 and ag.critic_opts[0][0].lr == 1e-3
    assert np.array_equal(ag.actor_opt.m[0], m)
    assert ag.config_.actor_lr == 5e-4


def test_checkpoint_round_trip_continues_identically(tmp_path):
    a = _filled_agent(seed=4)
    for k in range(1, 7):
        a.train_step(k)
    path = tmp_path / "ck.npz"
    a.save(path)
    b = SACAgent.load(path)
    for k in range(7, 13):
        da, db = a.train_step(k), b.train_step(k)
        assert da == db
    assert a.actor == b.actor and a.log_alpha == b.log_alpha
    X = np.ones((2, OBS_DIM))
    assert np.array_equal(a.predict(X), b.predict(X))


def test_non_finite_policy_output_raises():
    ag = SACAgent(SMALL, seed=0)
    bad = [w.copy() for w in ag.actor.arrays()]
    bad[0][0, 0] = np.nan
    ag.actor = nn.MLPParams.from_arrays(ag.actor.spec, bad)
    with pytest.raises(nn.NonFiniteError):
        ag.sample_action(np.ones(OBS_DIM))


def test_alpha_property():
    ag = SACAgent(SACConfig(initial_alpha=0.5), seed=0)
    assert ag.alpha == pytest.approx(0.5)
    assert math.isclose(ag.log_alpha, math.log(0.5))
