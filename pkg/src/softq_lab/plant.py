"""Reduced-order reference plant for the soft quadruped.

The plant is a behavioural model, not a physics engine. It exposes the same
stepping interface as an expensive simulator: a 10-dim observation
(roll/pitch/yaw, body velocity, normalized contact forces per foot), the
4-dim trot action, a fall flag and the energy spent on tendon motion.

Roll and pitch are damped second-order responses whose rates surface as
the lateral and vertical body velocities (the body sways about the support
line). Internal truth the observation does not reveal: the leg poses of
the previous step, which together with the current command set the stance
bending rate that propels the body, and the body position. Observation
noise is added to the returned state only.
"""
from __future__ import annotations

import copy
import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .kinematics import LEG_NAMES, LEG_PAIR, ActionLimits, leg_tendons

STATE_DIM = 10
ACTION_DIM = 4
STATE_NAMES = ("theta_x", "theta_y", "theta_z", "v_x", "v_y", "v_z",
               "fn_FL", "fn_FR", "fn_RR", "fn_RL")
ACTION_NAMES = ("alpha_b1", "z_l1", "alpha_b2", "z_l2")

_LEG_SIDE = np.array([-1.0, 1.0, 1.0, -1.0])          # left -1, right +1
_HIP = np.array([[0.1, 0.06], [0.1, -0.06], [-0.1, -0.06], [-0.1, 0.06]])
_PAIR = np.array(LEG_PAIR)


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class RobotState:
    theta: np.ndarray
    v: np.ndarray
    f_n: np.ndarray

    def __post_init__(self):
        for name, n in (("theta", 3), ("v", 3), ("f_n", 4)):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ContractError(f"{name} must have {n} components, got shape {arr.shape}")
            object.__setattr__(self, name, arr)
        if np.any(self.f_n < 0.0) or np.any(self.f_n > 1.0):
            raise ContractError("normalized contact forces must lie in [0, 1]")

    def as_array(self):
        return np.concatenate([self.theta, self.v, self.f_n])

    @classmethod
    def from_array(cls, s):
        s = np.asarray(s, dtype=float)
        if s.shape != (STATE_DIM,):
            raise ContractError(f"a robot state has {STATE_DIM} components, got shape {s.shape}")
        return cls(s[0:3], s[3:6], s[6:10])


@dataclass(frozen=True)
class PlantConfig:
    T_s: float = 0.05
    fall_roll: float = 0.6
    fall_pitch: float = 0.6
    var_v: float = 0.002
    var_theta: float = 0.002
    var_fn: float = 0.005
    mass: float = 1.0
    compute_delay: float = 0.0
    limits: ActionLimits = field(default_factory=ActionLimits)
    # geometry and contact
    leg_length: float = 0.12
    contact_tau: float = 0.05
    load_exponent: float = 4.0
    contact_floor: float = 1.0
    traction_right: float = 1.03
    # body dynamics
    velocity_tau: float = 0.5
    propulsion_gain: float = 1.8
    speed_limit: float = 0.5
    yaw_gain: float = 1.0
    roll_arm: float = 0.1       # v_y = roll_arm * roll rate
    pitch_arm: float = 0.1      # v_z = pitch_arm * pitch rate
    roll_gain: float = 0.8
    pitch_gain: float = 0.3
    tilt_omega: float = 4.0
    tilt_damping: float = 0.6
    # tendon tension proxy, J per metre of tendon travel
    energy_coeff: float = 20.0

    def __post_init__(self):
        if not self.T_s > 0:
            raise ValueError("T_s must be positive")
        if min(self.var_v, self.var_theta, self.var_fn) < 0:
            raise ValueError("noise variances must be non-negative")
        if not self.mass > 0:
            raise ValueError("mass must be positive")
        if self.compute_delay < 0:
            raise ValueError("compute_delay must be non-negative")


@dataclass(frozen=True)
class StepOutcome:
    next_state: RobotState
    fallen: bool
    energy_increment: float
    foot_positions: np.ndarray   # (4, 3), world frame


def is_fallen(state, config: PlantConfig) -> bool:
    s = state.as_array() if isinstance(state, RobotState) else np.asarray(state)
    return bool(abs(s[0]) > config.fall_roll or abs(s[1]) > config.fall_pitch)


def _foot_offsets(alpha, z_len):
    """Horizontal reach and vertical extent of a constant-curvature leg."""
    length = np.asarray(z_len)
    a = np.asarray(alpha)
    small = np.abs(a) < 1e-6
    safe = np.where(small, 1.0, a)
    reach = np.where(small, 0.5 * a * length, length * (1.0 - np.cos(a)) / safe)
    height = np.where(small, length * (1.0 - a * a / 6.0), length * np.sin(a) / safe)
    return reach, height


@dataclass
class _Truth:
    theta: np.ndarray
    v: np.ndarray
    f_n: np.ndarray
    action: np.ndarray
    position: np.ndarray
    t: float


class ReferencePlant:
    """Stateful stepping interface. One instance per thread; owns its RNG."""

    def __init__(self, config: PlantConfig | None = None, seed: int = 0, noise: bool = True):
        self.config = config or PlantConfig()
        self.noise = noise
        self.reset(seed)

    # -- episode control --------------------------------------------------
    def reset(self, seed=None) -> RobotState:
        if seed is not None:
            self.seed = seed
        self.rng = np.random.default_rng(self.seed)
        self._truth = _Truth(
            theta=np.zeros(3), v=np.zeros(3),
            f_n=np.ones(4), action=np.zeros(4), position=np.zeros(2), t=0.0,
        )
        self.steps = 0
        return self.initial_state()

    @staticmethod
    def initial_state() -> RobotState:
        return RobotState(np.zeros(3), np.zeros(3), np.ones(4))

    @property
    def true_state(self) -> np.ndarray:
        tr = self._truth
        return np.concatenate([tr.theta, tr.v, tr.f_n])

    @property
    def position(self):
        return self._truth.position.copy()

    @property
    def time(self):
        return self._truth.t

    def snapshot(self):
        return copy.deepcopy((self._truth, self.rng.bit_generator.state))

    def restore(self, snap):
        truth, rng_state = copy.deepcopy(snap)
        self._truth = truth
        self.rng.bit_generator.state = rng_state

    # -- dynamics ---------------------------------------------------------
    def _legs(self, action):
        lim = self.config.limits
        alpha = action[2 * _PAIR] * lim.alpha_b_max
        z_n = action[2 * _PAIR + 1]
        return alpha, z_n

    def foot_positions(self, action=None):
        cfg, tr = self.config, self._truth
        a = tr.action if action is None else np.asarray(action, dtype=float)
        alpha, z_n = self._legs(a)
        length = cfg.leg_length - z_n * cfg.limits.z_l_max
        reach, height = _foot_offsets(alpha, length)
        dirs = np.asarray(cfg.limits.alpha_r_forward)
        local = np.column_stack([_HIP[:, 0] + reach * np.cos(dirs), _HIP[:, 1] + reach * np.sin(dirs)])
        yaw = tr.theta[2]
        c, s = math.cos(yaw), math.sin(yaw)
        world = local @ np.array([[c, s], [-s, c]]) + tr.position
        body_h = cfg.leg_length
        return np.column_stack([world, body_h - height])

    def step(self, action) -> StepOutcome:
        a = np.asarray(action, dtype=float)
        if a.shape != (ACTION_DIM,):
            raise ContractError(f"action must have {ACTION_DIM} components, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ContractError("action contains non-finite values")
        a = np.clip(a, 0.0, 1.0)
        cfg, tr = self.config, self._truth
        dt = cfg.T_s
        lim = cfg.limits

        alpha_old, z_old = self._legs(tr.action)
        alpha_new, z_new = self._legs(a)

        # contact: first-order lag toward 1 - normalized compression
        k_c = 1.0 - math.exp(-dt / cfg.contact_tau)
        f_old = tr.f_n
        f_new = f_old + k_c * ((1.0 - z_new) - f_old)
        contact = 0.5 * (f_old + f_new)

        # stance feet dragged backwards push the body forwards
        len_old = cfg.leg_length - z_old * lim.z_l_max
        len_new = cfg.leg_length - z_new * lim.z_l_max
        reach_old, _ = _foot_offsets(alpha_old, len_old)
        reach_new, _ = _foot_offsets(alpha_new, len_new)
        dirs = np.cos(np.asarray(lim.alpha_r_forward))
        foot_vel = (reach_new - reach_old) * dirs / dt
        traction = np.where(_LEG_SIDE > 0, cfg.traction_right, 1.0)
        w = traction * contact**cfg.load_exponent
        norm = max(w.sum(), cfg.contact_floor)
        push = -np.dot(w, foot_vel) / norm
        v_target = cfg.speed_limit * math.tanh(cfg.propulsion_gain * push / cfg.speed_limit)

        k_v = 1.0 - math.exp(-dt / cfg.velocity_tau)
        v = tr.v.copy()
        v[0] += k_v * (v_target - v[0])

        # uneven traction turns the body in proportion to forward speed
        asym = np.dot(w, _LEG_SIDE) / norm
        yaw_rate = cfg.yaw_gain * asym * v[0] / (2 * abs(_HIP[0, 1]))

        # diagonal support: compression imbalance sways and tilts the body
        dz = z_new[0] - z_new[1]   # pair 1 minus pair 2 (leg 0 is pair 1, leg 1 is pair 2)
        arms = np.array([cfg.roll_arm, cfg.pitch_arm])
        rate = tr.v[1:] / arms
        drive = np.array([cfg.roll_gain * dz, cfg.pitch_gain * dz])
        om, zeta = cfg.tilt_omega, cfg.tilt_damping
        acc = om * om * (drive - tr.theta[:2]) - 2.0 * zeta * om * rate
        rate = rate + dt * acc
        v[1:] = arms * rate
        theta = tr.theta.copy()
        theta[:2] += dt * rate
        theta[2] += dt * yaw_rate

        yaw = theta[2]
        position = tr.position + dt * np.array([
            v[0] * math.cos(yaw) - v[1] * math.sin(yaw),
            v[0] * math.sin(yaw) + v[1] * math.cos(yaw),
        ])

        d_old = leg_tendons(tr.action, lim)
        d_new = leg_tendons(a, lim)
        energy = cfg.energy_coeff * float(np.abs(d_new - d_old).sum())

        self._truth = _Truth(theta, v, f_new, a, position, tr.t + dt)
        self.steps += 1
        fallen = is_fallen(self.true_state, cfg)
        if cfg.compute_delay > 0:
            time.sleep(cfg.compute_delay)
        return StepOutcome(self.observe(), fallen, energy, self.foot_positions())

    def observe(self) -> RobotState:
        s = self.true_state
        if self.noise:
            cfg = self.config
            sd = np.sqrt(np.array([cfg.var_theta] * 3 + [cfg.var_v] * 3 + [cfg.var_fn] * 4))
            s = s + sd * self.rng.standard_normal(STATE_DIM)
            s[6:] = np.clip(s[6:], 0.0, 1.0)
        return RobotState.from_array(s)


TRACE_COLUMNS = (["t", *STATE_NAMES, *ACTION_NAMES, "fallen", "energy"]
                 + [f"{leg}_{ax}" for leg in LEG_NAMES for ax in "xyz"])


def write_trace_csv(path, rows):
    """rows: iterables of (t, state(10), action(4), fallen, energy, feet(4,3))."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for t, s, a, fallen, energy, feet in rows:
            writer.writerow([repr(float(t)), *[repr(float(x)) for x in s], *[repr(float(x)) for x in a],
                             int(bool(fallen)), repr(float(energy)), *[repr(float(x)) for x in np.ravel(feet)]])
