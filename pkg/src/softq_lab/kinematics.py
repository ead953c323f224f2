"""Leg-pose geometry, tendon inverse kinematics and the expert trot gait.

Each leg is a compressible tendon-driven soft actuator. Its pose is the
bending angle ``alpha_b``, the bending direction ``alpha_r`` and the
compression ``z_l``; three tendons spaced 120 degrees around a disc of
radius ``R_d`` realise it.

The learned action space is trot-restricted: four numbers in [0, 1]
giving ``(alpha_b, z_l)`` for the diagonal pair FL+RR (pair 1) and the
pair FR+RL (pair 2).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

TWO_PI = 2.0 * math.pi
TENDON_PHASES = (0.0, TWO_PI / 3.0, 2.0 * TWO_PI / 3.0)

LEG_NAMES = ("FL", "FR", "RR", "RL")
# which action pair drives each leg, in LEG_NAMES order
LEG_PAIR = (0, 1, 0, 1)


class PoseDomainError(ValueError):
    pass


@dataclass(frozen=True)
class ActionLimits:
    alpha_b_max: float = 1.0
    z_l_max: float = 0.01
    R_d: float = 0.02
    # bending direction used for forward walking, per leg (FL, FR, RR, RL)
    alpha_r_forward: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("alpha_b_max", "z_l_max", "R_d"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)}")
        object.__setattr__(self, "alpha_r_forward", tuple(float(a) for a in self.alpha_r_forward))
        if len(self.alpha_r_forward) != 4:
            raise ValueError("alpha_r_forward needs one angle per leg")


@dataclass(frozen=True)
class LegPose:
    alpha_b: float
    alpha_r: float
    z_l: float

    def check(self, limits: ActionLimits):
        if not 0.0 <= self.alpha_b <= limits.alpha_b_max:
            raise PoseDomainError(
                f"alpha_b={self.alpha_b} outside [0, alpha_b_max={limits.alpha_b_max}]"
            )
        if not 0.0 <= self.z_l <= limits.z_l_max:
            raise PoseDomainError(f"z_l={self.z_l} outside [0, z_l_max={limits.z_l_max}]")
        if not 0.0 <= self.alpha_r < TWO_PI:
            raise PoseDomainError(f"alpha_r={self.alpha_r} outside [0, 2*pi)")
        return self


@dataclass(frozen=True)
class TendonDisplacement:
    d_A: float
    d_B: float
    d_C: float

    def as_array(self):
        return np.array([self.d_A, self.d_B, self.d_C])


@dataclass(frozen=True)
class Action:
    alpha_b1: float
    z_l1: float
    alpha_b2: float
    z_l2: float

    def __post_init__(self):
        for name in ("alpha_b1", "z_l1", "alpha_b2", "z_l2"):
            value = float(getattr(self, name))
            object.__setattr__(self, name, min(max(value, 0.0), 1.0))

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=float).ravel()
        if a.shape != (4,):
            raise ValueError(f"an action has 4 components, got shape {a.shape}")
        return cls(*a)

    def as_array(self):
        return np.array([self.alpha_b1, self.z_l1, self.alpha_b2, self.z_l2])


def inverse_kinematics(pose: LegPose, limits: ActionLimits) -> TendonDisplacement:
    pose.check(limits)
    d = [limits.R_d * pose.alpha_b * math.cos(pose.alpha_r + phi) + pose.z_l for phi in TENDON_PHASES]
    return TendonDisplacement(*d)


def tendon_displacements(alpha_b, alpha_r, z_l, R_d):
    """Vectorised inverse kinematics; returns an array of shape (..., 3)."""
    alpha_b = np.asarray(alpha_b, dtype=float)[..., None]
    alpha_r = np.asarray(alpha_r, dtype=float)[..., None]
    z_l = np.asarray(z_l, dtype=float)[..., None]
    return R_d * alpha_b * np.cos(alpha_r + np.asarray(TENDON_PHASES)) + z_l


def denormalize(action: Action, limits: ActionLimits) -> tuple[LegPose, LegPose]:
    """Poses for pair 1 and pair 2; the bending direction is that of the pair's front leg."""
    a = action.as_array()
    pose1 = LegPose(a[0] * limits.alpha_b_max, limits.alpha_r_forward[0] % TWO_PI, a[1] * limits.z_l_max)
    pose2 = LegPose(a[2] * limits.alpha_b_max, limits.alpha_r_forward[1] % TWO_PI, a[3] * limits.z_l_max)
    return pose1, pose2


def normalize(pose1: LegPose, pose2: LegPose, limits: ActionLimits) -> Action:
    return Action(
        pose1.alpha_b / limits.alpha_b_max,
        pose1.z_l / limits.z_l_max,
        pose2.alpha_b / limits.alpha_b_max,
        pose2.z_l / limits.z_l_max,
    )


def leg_tendons(action, limits: ActionLimits) -> np.ndarray:
    """Tendon setpoints of all four legs, shape (4, 3), in LEG_NAMES order."""
    a = np.asarray(action, dtype=float)
    alpha_b = np.array([a[2 * p] for p in LEG_PAIR]) * limits.alpha_b_max
    z_l = np.array([a[2 * p + 1] for p in LEG_PAIR]) * limits.z_l_max
    return tendon_displacements(alpha_b, np.asarray(limits.alpha_r_forward), z_l, limits.R_d)


@dataclass(frozen=True)
class GaitWaveSpec:
    period: float = 0.8
    alpha_b_amplitude: float = 0.5
    z_l_swing: float = 0.005
    phase_offset_pair2: float = 0.5
    # transition width of the compression square wave, fraction of period
    transition: float = 0.1

    def __post_init__(self):
        if not self.period > 0:
            raise ValueError("gait period must be positive")
        if not 0.0 < self.transition <= 0.5:
            raise ValueError("transition must lie in (0, 0.5]")


def _pair_wave(phase, spec: GaitWaveSpec):
    """Bending and compression of one pair at phase in [0, 1).

    First half: stance, the leg sweeps from forward-bent back to straight on
    the ground. Second half: swing, the leg is compressed while it bends
    forward again. Compression ramps up and down inside the swing half with
    half-cosine edges, so it is exactly zero throughout stance.
    """
    alpha = 0.5 * spec.alpha_b_amplitude * (1.0 + np.cos(TWO_PI * phase))
    ramp = 0.5 * spec.transition
    swing = phase - 0.5
    rise = np.clip(swing / ramp, 0.0, 1.0)
    fall = np.clip((0.5 - swing) / ramp, 0.0, 1.0)
    edge = np.where(swing < 0.0, 0.0, np.minimum(rise, fall))
    z = spec.z_l_swing * 0.5 * (1.0 - np.cos(np.pi * edge))
    return alpha, z


def expert_gait_array(t, spec: GaitWaveSpec, limits: ActionLimits) -> np.ndarray:
    """Normalized expert actions for an array of times; shape (n, 4)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t < 0):
        raise ValueError("gait time must be non-negative")
    phase1 = np.mod(t / spec.period, 1.0)
    phase2 = np.mod(t / spec.period - spec.phase_offset_pair2, 1.0)
    a1, z1 = _pair_wave(phase1, spec)
    a2, z2 = _pair_wave(phase2, spec)
    out = np.stack([a1 / limits.alpha_b_max, z1 / limits.z_l_max, a2 / limits.alpha_b_max, z2 / limits.z_l_max], axis=1)
    return np.clip(out, 0.0, 1.0)


def expert_gait(t: float, spec: GaitWaveSpec = GaitWaveSpec(), limits: ActionLimits = ActionLimits()) -> Action:
    return Action.from_array(expert_gait_array([t], spec, limits)[0])


class ExpertGait(BaseEstimator, TransformerMixin):
    """Transformer from a column of times (seconds) to expert trot actions."""

    def __init__(self, period=0.8, alpha_b_amplitude=0.5, z_l_swing=0.005,
                 phase_offset_pair2=0.5, transition=0.1, alpha_b_max=1.0, z_l_max=0.01, R_d=0.02):
        self.period = period
        self.alpha_b_amplitude = alpha_b_amplitude
        self.z_l_swing = z_l_swing
        self.phase_offset_pair2 = phase_offset_pair2
        self.transition = transition
        self.alpha_b_max = alpha_b_max
        self.z_l_max = z_l_max
        self.R_d = R_d

    def fit(self, X=None, y=None):
        self.spec_ = GaitWaveSpec(self.period, self.alpha_b_amplitude, self.z_l_swing,
                                  self.phase_offset_pair2, self.transition)
        self.limits_ = ActionLimits(self.alpha_b_max, self.z_l_max, self.R_d)
        return self

    def transform(self, X):
        if not hasattr(self, "spec_"):
            self.fit()
        X = check_array(X, ensure_2d=False)
        return expert_gait_array(np.ravel(X), self.spec_, self.limits_)


GAIT_CSV_COLUMNS = ["t", "alpha_b1", "z_l1", "alpha_b2", "z_l2"] + [
    f"{leg}_d{x}" for leg in LEG_NAMES for x in "ABC"
]


def export_gait_csv(path, duration, T_s=0.05, spec=GaitWaveSpec(), limits=ActionLimits()):
    """Write the expert schedule sampled every ``T_s`` seconds, with tendon setpoints per leg."""
    n = int(round(duration / T_s))
    t = np.arange(n) * T_s
    actions = expert_gait_array(t, spec, limits)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GAIT_CSV_COLUMNS)
        for ti, a in zip(t, actions):
            d = leg_tendons(a, limits).ravel()
            writer.writerow([repr(float(ti))] + [repr(float(x)) for x in a] + [repr(float(x)) for x in d])
    return n
