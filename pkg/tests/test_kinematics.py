import csv
import math

import numpy as np
import pytest

from softq_lab.kinematics import (
    Action, ActionLimits, ExpertGait, GaitWaveSpec, LegPose, PoseDomainError, TWO_PI,
    denormalize, expert_gait, expert_gait_array, export_gait_csv, inverse_kinematics,
    leg_tendons, normalize, tendon_displacements, GAIT_CSV_COLUMNS,
)

LIM = ActionLimits()


def test_straight_leg_has_equal_tendons():
    d = inverse_kinematics(LegPose(0.0, 1.0, 0.004), LIM).as_array()
    np.testing.assert_allclose(d, [0.004] * 3, rtol=0, atol=1e-15)


def test_tendon_formula():
    pose = LegPose(0.6, 0.3, 0.002)
    d = inverse_kinematics(pose, LIM).as_array()
    expect = [LIM.R_d * 0.6 * math.cos(0.3 + k * TWO_PI / 3) + 0.002 for k in range(3)]
    np.testing.assert_allclose(d, expect, rtol=0, atol=1e-15)


def test_vectorised_matches_scalar(rng):
    ab = rng.uniform(0, 1, 20)
    ar = rng.uniform(0, TWO_PI, 20)
    z = rng.uniform(0, 0.01, 20)
    vec = tendon_displacements(ab, ar, z, LIM.R_d)
    for k in range(20):
        np.testing.assert_allclose(vec[k], inverse_kinematics(LegPose(ab[k], ar[k], z[k]), LIM).as_array(), atol=1e-15)


@pytest.mark.parametrize("pose", [LegPose(-0.1, 0, 0), LegPose(1.1, 0, 0), LegPose(0.5, 0, 0.02),
                                  LegPose(0.5, TWO_PI, 0), LegPose(0.5, -0.1, 0)])
def test_pose_domain(pose):
    with pytest.raises(PoseDomainError):
        inverse_kinematics(pose, LIM)


def test_limits_validated():
    with pytest.raises(ValueError):
        ActionLimits(alpha_b_max=0.0)
    with pytest.raises(ValueError):
        ActionLimits(alpha_r_forward=(0.0, 0.0))


def test_action_clamps_and_shape():
    a = Action(-1.0, 0.5, 2.0, 0.25)
    assert a.as_array().tolist() == [0.0, 0.5, 1.0, 0.25]
    with pytest.raises(ValueError):
        Action.from_array([0.1, 0.2, 0.3])


def test_normalize_round_trip(rng):
    lim = ActionLimits(alpha_b_max=0.8, z_l_max=0.012)
    for _ in range(50):
        a = Action.from_array(rng.uniform(0, 1, 4))
        p1, p2 = denormalize(a, lim)
        np.testing.assert_allclose(normalize(p1, p2, lim).as_array(), a.as_array(), atol=1e-15)


def test_leg_tendons_follow_pairs():
    d = leg_tendons([0.5, 0.2, 0.1, 0.9], LIM)
    assert d.shape == (4, 3)
    np.testing.assert_array_equal(d[0], d[2])     # FL and RR share pair 1
    np.testing.assert_array_equal(d[1], d[3])


def test_expert_gait_in_range_and_periodic():
    spec = GaitWaveSpec()
    t = np.arange(0, 4, 0.05)
    a = expert_gait_array(t, spec, LIM)
    assert a.shape == (len(t), 4)
    assert a.min() >= 0.0 and a.max() <= 1.0
    np.testing.assert_allclose(expert_gait_array(t + spec.period, spec, LIM), a, atol=1e-12)


def test_expert_stance_has_no_compression():
    spec = GaitWaveSpec()
    t = np.linspace(0, spec.period / 2, 50, endpoint=False)
    a = expert_gait_array(t, spec, LIM)
    assert np.all(a[:, 1] == 0.0)
    assert np.all(np.diff(a[:, 0]) < 0)           # the leg sweeps backwards during stance


def test_expert_gait_rejects_negative_time():
    with pytest.raises(ValueError):
        expert_gait_array([-0.1], GaitWaveSpec(), LIM)


def test_expert_gait_scalar():
    a = expert_gait(0.0)
    assert isinstance(a, Action)
    assert a.alpha_b1 == pytest.approx(0.5)


def test_transformer_matches_function():
    t = np.arange(0, 2, 0.05)
    tr = ExpertGait(period=0.6, transition=0.2).fit()
    np.testing.assert_array_equal(tr.transform(t.reshape(-1, 1)),
                                  expert_gait_array(t, GaitWaveSpec(period=0.6, transition=0.2), LIM))


def test_gait_spec_validation():
    with pytest.raises(ValueError):
        GaitWaveSpec(period=0.0)
    with pytest.raises(ValueError):
        GaitWaveSpec(transition=0.7)


def test_export_gait_csv(tmp_path):
    path = tmp_path / "gait.csv"
    n = export_gait_csv(path, 1.0)
    rows = list(csv.reader(open(path)))
    assert rows[0] == GAIT_CSV_COLUMNS
    assert len(rows) == n + 1 == 21
    first = np.array(rows[1][1:], dtype=float)
    np.testing.assert_allclose(first[:4], expert_gait_array([0.0], GaitWaveSpec(), LIM)[0])
    np.testing.assert_allclose(first[4:], leg_tendons(first[:4], LIM).ravel())
