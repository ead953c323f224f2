"""Evaluation metrics, the Kalman velocity estimator and trace exporters."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from .kinematics import ActionLimits, GaitWaveSpec, LEG_NAMES, expert_gait_array
from .plant import ACTION_DIM, STATE_DIM, ReferencePlant, write_trace_csv

STABILITY_WEIGHTS = (0.2, 1.0, 1.0)     # walk time, peak yaw rate, peak lateral speed
CONTACT_THRESHOLD = 0.5
KALMAN_Q = np.diag([0.01, 1.0])
KALMAN_R = 0.1


class EmptyTraceError(ValueError):
    pass


class UndefinedCOTError(ValueError):
    pass


# --- traces ---------------------------------------------------------------------

@dataclass
class Trace:
    """One rollout. ``states`` are the plant's clean states after each step."""

    T_s: float
    states: np.ndarray            # (n, 10)
    observations: np.ndarray      # (n, 10), what the policy saw
    actions: np.ndarray           # (n, 4)
    energy: np.ndarray            # (n,) per-step increments, J
    positions: np.ndarray         # (n, 2) body position after each step
    feet: np.ndarray              # (n, 4, 3)
    fell: bool = False

    def __len__(self):
        return len(self.states)

    @property
    def t(self):
        return (np.arange(len(self)) + 1) * self.T_s

    @property
    def duration(self):
        """Time walked before failure; the full trace length when no fall happened."""
        return len(self) * self.T_s

    @property
    def yaw_rate(self):
        yaw = np.concatenate([[0.0], self.states[:, 2]])
        return np.diff(yaw) / self.T_s

    @property
    def v_y(self):
        return self.states[:, 4]

    def __eq__(self, other):
        if not isinstance(other, Trace):
            return NotImplemented
        return (self.T_s == other.T_s and self.fell == other.fell
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("states", "observations", "actions", "energy", "positions", "feet")))

    __hash__ = None

    def to_csv(self, path):
        rows = []
        for k in range(len(self)):
            fallen = self.fell and k == len(self) - 1
            rows.append((self.t[k], self.states[k], self.actions[k], fallen, self.energy[k], self.feet[k]))
        write_trace_csv(path, rows)

    def feet_to_csv(self, path):
        """Long format: one row per step and leg."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "leg_id", "x", "y", "z"])
            for k, t in enumerate(self.t):
                for leg, name in enumerate(LEG_NAMES):
                    x, y, z = self.feet[k, leg]
                    writer.writerow([repr(float(t)), name, repr(float(x)), repr(float(y)), repr(float(z))])


# --- scalar metrics -------------------------------------------------------------

def stability_score(duration, yaw_rate, v_y, weights=STABILITY_WEIGHTS):
    w_t, w_yaw, w_vy = weights
    yaw_rate = np.asarray(yaw_rate, dtype=float)
    v_y = np.asarray(v_y, dtype=float)
    if yaw_rate.size == 0 or v_y.size == 0:
        raise EmptyTraceError("stability needs at least one sample")
    return float(w_t * duration - w_yaw * np.max(np.abs(yaw_rate)) - w_vy * np.max(np.abs(v_y)))


def stability(trace: Trace, weights=STABILITY_WEIGHTS) -> float:
    """w_time * t - w_yaw * max|yaw rate| - w_v * max|v_y| over the walked part of the trace."""
    if len(trace) == 0:
        raise EmptyTraceError("empty trace")
    return stability_score(trace.duration, trace.yaw_rate, trace.v_y, weights)


def cot_value(energy, mass, distance):
    if not distance > 0:
        raise UndefinedCOTError(f"cost of transport is undefined for distance {distance} m")
    if not mass > 0:
        raise ValueError("mass must be positive")
    return float(energy) / (mass * distance)


def cost_of_transport(trace: Trace, mass) -> float:
    """E / (m d), d the net forward (x) displacement; J/kg/m."""
    if len(trace) == 0:
        raise EmptyTraceError("empty trace")
    return cot_value(np.sum(trace.energy), mass, trace.positions[-1, 0])


def binarize_contact(f_n, threshold=CONTACT_THRESHOLD):
    """1 where the normalized contact force reaches the threshold."""
    return (np.asarray(f_n, dtype=float) >= threshold).astype(int)


# --- Kalman filter ----------------------------------------------------------------

@dataclass(frozen=True)
class KalmanState:
    x: np.ndarray     # (position, velocity)
    P: np.ndarray     # 2x2 covariance

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).reshape(2)
        P = np.asarray(self.P, dtype=float).reshape(2, 2)
        if not np.allclose(P, P.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(P).min() < -1e-12:
            raise ValueError("covariance must be positive semidefinite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "P", P)

    @classmethod
    def initial(cls):
        return cls(np.zeros(2), np.eye(2))


def kalman_predict(k: KalmanState, accel, T_s=0.05, Q=KALMAN_Q) -> KalmanState:
    """Constant-velocity model driven by the measured acceleration."""
    F = np.array([[1.0, T_s], [0.0, 1.0]])
    B = np.array([0.5 * T_s * T_s, T_s])
    P = F @ k.P @ F.T + Q
    return KalmanState(F @ k.x + B * float(accel), 0.5 * (P + P.T))


def kalman_update(k: KalmanState, position, R=KALMAN_R) -> KalmanState:
    """Position measurement update; a non-finite reading leaves the state unchanged."""
    z = float(position) if position is not None else math.nan
    if not math.isfinite(z):
        return k
    H = np.array([1.0, 0.0])
    S = float(H @ k.P @ H) + R
    K = k.P @ H / S
    x = k.x + K * (z - k.x[0])
    IKH = np.eye(2) - np.outer(K, H)
    # Joseph form keeps P symmetric PSD under rounding
    P = IKH @ k.P @ IKH.T + R * np.outer(K, K)
    return KalmanState(x, 0.5 * (P + P.T))


def kalman_step(k: KalmanState, accel, tof_position, T_s=0.05, Q=KALMAN_Q, R=KALMAN_R) -> KalmanState:
    """Predict with the acceleration, then update with the position (skipped when non-finite)."""
    return kalman_update(kalman_predict(k, accel, T_s, Q), tof_position, R)


def kalman_filter(accel, tof, T_s=0.05, Q=KALMAN_Q, R=KALMAN_R, state: KalmanState | None = None):
    """Run the filter over series; returns (n, 2) estimates and the final state."""
    k = state or KalmanState.initial()
    accel = np.asarray(accel, dtype=float)
    tof = np.asarray(tof, dtype=float)
    out = np.empty((len(accel), 2))
    for i, (a, z) in enumerate(zip(accel, tof)):
        k = kalman_step(k, a, z, T_s, Q, R)
        out[i] = k.x
    return out, k


class KalmanVelocityEstimator(BaseEstimator, TransformerMixin):
    """Transformer from columns (accel, tof_position) to (position, velocity) estimates.

    With four columns (accel_x, accel_y, tof_x, tof_y) one filter runs per
    horizontal axis and the output is (pos_x, vel_x, pos_y, vel_y).
    """

    def __init__(self, T_s=0.05, q_pos=0.01, q_vel=1.0, r=KALMAN_R):
        self.T_s = T_s
        self.q_pos = q_pos
        self.q_vel = q_vel
        self.r = r

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        X = check_array(X, ensure_all_finite="allow-nan")
        Q = np.diag([self.q_pos, self.q_vel])
        if X.shape[1] == 2:
            return kalman_filter(X[:, 0], X[:, 1], self.T_s, Q, self.r)[0]
        if X.shape[1] == 4:
            ex = kalman_filter(X[:, 0], X[:, 2], self.T_s, Q, self.r)[0]
            ey = kalman_filter(X[:, 1], X[:, 3], self.T_s, Q, self.r)[0]
            return np.hstack([ex, ey])
        raise ValueError("expected 2 columns (accel, tof) or 4 (accel_x, accel_y, tof_x, tof_y)")


@dataclass(frozen=True)
class SensorModel:
    """Synthetic IMU and range-sensor readings derived from a clean trace."""

    accel_std: float = 0.1           # m/s^2 white noise
    accel_bias_std: float = 0.05     # m/s^2, constant per trace
    tof_std: float = 0.01            # m

    def readings(self, trace: Trace, rng):
        """World-frame horizontal acceleration and position readings, each (n, 2)."""
        vel = _world_velocity(trace)
        prev = np.vstack([np.zeros((1, 2)), vel[:-1]])
        accel = (vel - prev) / trace.T_s
        accel = accel + self.accel_bias_std * rng.standard_normal(2) + self.accel_std * rng.standard_normal(accel.shape)
        tof = trace.positions + self.tof_std * rng.standard_normal(trace.positions.shape)
        return accel, tof


def _world_velocity(trace: Trace):
    yaw = trace.states[:, 2]
    vx, vy = trace.states[:, 3], trace.states[:, 4]
    return np.column_stack([vx * np.cos(yaw) - vy * np.sin(yaw), vx * np.sin(yaw) + vy * np.cos(yaw)])


def velocity_errors(trace: Trace, sensors: SensorModel, rng):
    """RMSE of filtered and of raw-integrated velocity against the clean velocity."""
    accel, tof = sensors.readings(trace, rng)
    truth = _world_velocity(trace)
    est = KalmanVelocityEstimator(trace.T_s).transform(np.hstack([accel, tof]))
    filtered = est[:, [1, 3]]
    raw = np.cumsum(accel, axis=0) * trace.T_s
    rmse = lambda e: float(np.sqrt(np.mean(e * e)))
    return rmse(filtered - truth), rmse(raw - truth)


# --- policies and evaluation ----------------------------------------------------------

class ExpertPolicy:
    """The open-loop trot schedule as a policy."""

    def __init__(self, spec: GaitWaveSpec = GaitWaveSpec(), limits: ActionLimits = ActionLimits()):
        self.spec, self.limits = spec, limits

    def act(self, x, k, T_s):
        return expert_gait_array([k * T_s], self.spec, self.limits)[0]


class ConstantPolicy:
    def __init__(self, action):
        self.action = np.clip(np.asarray(action, dtype=float), 0.0, 1.0)

    def act(self, x, k, T_s):
        return self.action


class AgentPolicy:
    """Deterministic (squashed-mean) actions of a SAC agent."""

    def __init__(self, agent):
        self.agent = agent

    def act(self, x, k, T_s):
        return self.agent.sample_action(x, deterministic=True)[0]


def as_policy(policy):
    if hasattr(policy, "act"):
        return policy
    if hasattr(policy, "sample_action"):
        return AgentPolicy(policy)
    if callable(policy):
        class _Wrapped:
            def act(self, x, k, T_s):
                return np.asarray(policy(x, k * T_s), dtype=float)
        return _Wrapped()
    raise TypeError(f"cannot use {type(policy).__name__} as a policy")


def rollout(policy, plant: ReferencePlant, duration=5.0, seed=0, expert_prefix=0.0,
            gait: GaitWaveSpec = GaitWaveSpec()) -> Trace:
    """Drive the plant from s0; the first ``expert_prefix`` seconds use the expert gait."""
    policy = as_policy(policy)
    T_s = plant.config.T_s
    n = int(round(duration / T_s))
    n_prefix = int(round(expert_prefix / T_s))
    prefix = ExpertPolicy(gait, plant.config.limits)
    obs = plant.reset(seed).as_array()
    prev = np.zeros(ACTION_DIM)
    S, O, A, E, X, Fe = [], [], [], [], [], []
    fell = False
    for k in range(n):
        x = np.concatenate([obs, prev])
        a = prefix.act(x, k, T_s) if k < n_prefix else policy.act(x, k, T_s)
        a = np.clip(np.asarray(a, dtype=float), 0.0, 1.0)
        out = plant.step(a)
        obs = out.next_state.as_array()
        S.append(plant.true_state)
        O.append(obs)
        A.append(a)
        E.append(out.energy_increment)
        X.append(plant.position)
        Fe.append(out.foot_positions)
        prev = a
        if out.fallen:
            fell = True
            break
    return Trace(T_s, np.array(S).reshape(-1, STATE_DIM), np.array(O).reshape(-1, STATE_DIM),
                 np.array(A).reshape(-1, ACTION_DIM), np.array(E), np.array(X).reshape(-1, 2),
                 np.array(Fe).reshape(-1, 4, 3), fell)


REPORT_FIELDS = ("stability", "cot", "avg_vx", "duration", "distance", "energy", "fell")


@dataclass
class EvalReport:
    stability: float
    cot: float          # inf when the robot made no forward progress
    avg_vx: float
    duration: float
    distance: float
    energy: float
    fell: bool
    trace: Trace = field(repr=False, compare=True)

    def to_dict(self):
        return {k: getattr(self, k) for k in REPORT_FIELDS}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_FIELDS)
            writer.writerow([repr(float(v)) if not isinstance(v, bool) else int(v) for v in self.to_dict().values()])

    @staticmethod
    def read_csv(path):
        with open(path, newline="") as fh:
            row = next(csv.DictReader(fh))
        return {k: (bool(int(row[k])) if k == "fell" else float(row[k])) for k in REPORT_FIELDS}


def evaluate(policy, plant: ReferencePlant | None = None, duration=5.0, seed=0, expert_prefix=0.0,
             gait: GaitWaveSpec = GaitWaveSpec(), weights=STABILITY_WEIGHTS) -> EvalReport:
    """Deterministic rollout on the plant and the three performance metrics.

    An early fall is reported (shorter duration, ``fell=True``), not raised.
    """
    plant = plant or ReferencePlant(noise=False)
    trace = rollout(policy, plant, duration, seed, expert_prefix, gait)
    if len(trace) == 0:
        raise EmptyTraceError("zero-length evaluation")
    distance = float(trace.positions[-1, 0])
    energy = float(np.sum(trace.energy))
    try:
        cot = cot_value(energy, plant.config.mass, distance)
    except UndefinedCOTError:
        cot = math.inf
    return EvalReport(
        stability=stability(trace, weights),
        cot=cot,
        avg_vx=float(np.mean(trace.states[:, 3])),
        duration=trace.duration,
        distance=distance,
        energy=energy,
        fell=trace.fell,
        trace=trace,
    )
