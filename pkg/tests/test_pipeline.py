import math
from dataclasses import replace

import numpy as np
import pytest

from softq_lab.kinematics import ActionLimits, GaitWaveSpec, expert_gait_array
from softq_lab.pipeline import (
    ConvergenceRule, ModeError, PipelineConfig, PlantEnv, SurrogateEnv, TrainingRun, adopt_config,
    default_reward, default_sac, run_episode, run_mbrl, run_mfrl, run_post_training, surrogate_return,
)
from softq_lab.plant import ReferencePlant
from softq_lab.sac import SACAgent, SACConfig
from softq_lab.surrogate import train_surrogate

TINY = dict(batch_size=16, buffer_capacity=256, max_steps=40)


def tiny(mode, episodes=3, **kw):
    return PipelineConfig(mode=mode, sac=replace(default_sac(mode), max_episodes=episodes, **TINY),
                          stop_on_convergence=False, **kw)


@pytest.fixture(scope="module")
def surrogate(small_split):
    return train_surrogate(small_split[0], epochs=3, seed=0)


# --- convergence -------------------------------------------------------------

def test_threshold_rule():
    rule = ConvergenceRule(threshold=1.0, window=2, sustain=3)
    r = [0, 0, 2, 2, 0, 2, 2, 2, 2]
    # trailing means: 0 0 1 2 1 1 2 2 2
    assert rule.satisfied(r).tolist() == [False, False, True, True, True, True, True, True, True]
    assert rule.converged_at(r) == 2
    assert ConvergenceRule(threshold=5.0).converged_at(r) is None


def test_fraction_rule_handles_negative_returns():
    rule = ConvergenceRule(fraction=0.9, window=3, sustain=2)
    r = [-10.0, -10.0, -10.0, -10.0]
    assert rule.converged_at(r) == 2
    rising = [-30.0, -20.0, -10.0, -10.0, -10.0, -10.0]
    rule = ConvergenceRule(fraction=0.9, window=2, sustain=2)
    assert rule.converged_at(rising) == 3


def test_rule_validation():
    with pytest.raises(ValueError):
        ConvergenceRule(window=0)
    with pytest.raises(ValueError):
        ConvergenceRule(fraction=0.0)


# --- configuration -------------------------------------------------------------

def test_mode_defaults():
    mb, pt, mf = (PipelineConfig(mode=m) for m in ("MBRL", "PT", "MFRL"))
    assert (mb.sac.max_episodes, pt.sac.max_episodes, mf.sac.max_episodes) == (400, 400, 600)
    assert (pt.sac.critic_lr, pt.sac.actor_lr) == (0.001, 0.0005)
    assert pt.expert_steps == 32 and mb.expert_steps == 0 and mf.expert_steps == 0
    assert mb.reward.v_ref == 0.2 and pt.reward.v_ref == 0.3 and pt.reward.eps4 == 100.0
    assert mf.reward == pt.reward
    with pytest.raises(ValueError):
        PipelineConfig(mode="XX")
    with pytest.raises(ValueError):
        PipelineConfig(mode="PT", expert_duration=-1.0)


def test_adopt_config_halves_rates():
    ag = SACAgent(SACConfig(**{k: v for k, v in TINY.items() if k != "max_steps"}), seed=0)
    ag.observe(np.zeros(14), np.zeros(4), 1.0, np.zeros(14), 0)
    new = replace(default_sac("PT"), batch_size=16, buffer_capacity=256)
    adopt_config(ag, new, reset_buffer=True)
    assert ag.actor_opt.lr == 0.0005 and ag.critic_opts[1][2].lr == 0.001
    assert len(ag.buffer) == 0
    ag.observe(np.zeros(14), np.zeros(4), 1.0, np.zeros(14), 0)
    adopt_config(ag, replace(new, buffer_capacity=512), reset_buffer=False)
    assert len(ag.buffer) == 1 and ag.buffer.capacity == 512


# --- environments and episodes -------------------------------------------------------

def test_surrogate_env(surrogate):
    env = SurrogateEnv(surrogate, noise=False)
    obs = env.reset(np.random.default_rng(0))
    assert np.array_equal(obs, ReferencePlant.initial_state().as_array())
    o, clean, fell, trunc = env.step(np.full(4, 0.3))
    assert np.array_equal(o, clean) and not trunc
    assert np.all((clean[6:] >= 0) & (clean[6:] <= 1))
    noisy = SurrogateEnv(surrogate, noise=True)
    noisy.reset(np.random.default_rng(0))
    o2, clean2, _, _ = noisy.step(np.full(4, 0.3))
    assert np.array_equal(clean2, clean) and not np.array_equal(o2, clean2)


def test_expert_prefix_is_exact():
    cfg = tiny("PT")
    ag = SACAgent(cfg.sac, seed=0)
    expert = expert_gait_array(np.arange(cfg.expert_steps) * 0.05, GaitWaveSpec(), ActionLimits())
    out = run_episode(ag, PlantEnv(ReferencePlant(seed=0)), cfg.reward, 40, np.random.default_rng(0),
                      expert_actions=expert)
    assert out["steps"] == 40
    np.testing.assert_array_equal(out["actions"][:32], expert)
    assert len(ag.buffer) == 40


def test_mbrl_uses_no_plant_steps(surrogate):
    run = run_mbrl(surrogate, tiny("MBRL"))
    assert run.total_plant_steps == 0
    assert run.total_surrogate_steps == sum(run.steps) > 0
    assert len(run.entropy) == len(run.temperature) == run.n_episodes == 3


def test_mfrl_counts_plant_steps():
    run = run_mfrl(ReferencePlant(seed=1), tiny("MFRL", seed=1))
    assert run.plant_steps == list(np.cumsum(run.steps))
    assert run.total_surrogate_steps == 0
    assert run.plant_steps_to_convergence() == math.inf


def test_post_training_from_checkpoint(tmp_path, surrogate):
    mb = run_mbrl(surrogate, tiny("MBRL"), run_dir=tmp_path / "mbrl")
    assert (tmp_path / "mbrl" / "checkpoint.npz").exists()
    pt = run_post_training(str(tmp_path / "mbrl" / "checkpoint.npz"), ReferencePlant(), tiny("PT"))
    assert pt.total_plant_steps == sum(pt.steps)
    assert pt.agent.actor_opt.lr == 0.0005
    # the in-memory agent path gives the same run
    pt2 = run_post_training(mb.agent, ReferencePlant(), tiny("PT"))
    assert pt.traces() == pt2.traces()


def test_post_training_requires_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError, match="model-based stage"):
        run_post_training(str(tmp_path / "nope.npz"), ReferencePlant(), tiny("PT"))


def test_stage_mode_checked(surrogate):
    with pytest.raises(ModeError):
        run_mbrl(surrogate, tiny("PT"))
    with pytest.raises(ModeError):
        run_mfrl(ReferencePlant(), tiny("MBRL"))


def test_runs_are_reproducible():
    a = run_mfrl(ReferencePlant(seed=2), tiny("MFRL", seed=2))
    b = run_mfrl(ReferencePlant(seed=2), tiny("MFRL", seed=2))
    assert a.traces() == b.traces()
    assert a.agent.actor == b.agent.actor


def test_resume_matches_uninterrupted(tmp_path):
    full = run_mfrl(ReferencePlant(seed=3), tiny("MFRL", episodes=4, seed=3))
    run_mfrl(ReferencePlant(seed=3), tiny("MFRL", episodes=2, seed=3), run_dir=tmp_path)
    resumed = run_mfrl(ReferencePlant(seed=3), tiny("MFRL", episodes=4, seed=3), run_dir=tmp_path, resume=True)
    assert resumed.traces() == full.traces()
    assert resumed.agent.actor == full.agent.actor


def test_stop_on_convergence(tmp_path):
    cfg = replace(tiny("MFRL", episodes=10), stop_on_convergence=True,
                  convergence=ConvergenceRule(threshold=-1e9, window=1, sustain=2))
    run = run_mfrl(ReferencePlant(), cfg, run_dir=tmp_path)
    assert run.converged_episode == 0 and run.n_episodes == 2
    back = TrainingRun.from_csv(tmp_path / "episodes.csv", "MFRL", 0)
    assert back.traces() == run.traces()
    header = (tmp_path / "episodes.csv").read_text().splitlines()[0]
    assert header.startswith("episode,reward,entropy,temperature")


def test_surrogate_return_is_deterministic(surrogate):
    ag = SACAgent(replace(default_sac("MBRL"), **{k: v for k, v in TINY.items() if k != "max_steps"}), seed=0)
    w = default_reward("MBRL")
    assert surrogate_return(ag, surrogate, w, 30) == surrogate_return(ag, surrogate, w, 30)
