"""Trajectory-sequence datasets for fitting and validating dynamics models."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from .kinematics import GaitWaveSpec, expert_gait_array
from .plant import ACTION_DIM, STATE_DIM, PlantConfig, ReferencePlant

SOURCES = ("random", "expert")
CSV_COLUMNS = (["seq_id", "step"] + [f"s{i}" for i in range(STATE_DIM)]
               + [f"a{i}" for i in range(ACTION_DIM)]
               + [f"s_next{i}" for i in range(STATE_DIM)] + ["source_tag"])


class EmptyDatasetError(ValueError):
    pass


class DatasetParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray

    def __post_init__(self):
        for name, n in (("s", STATE_DIM), ("a", ACTION_DIM), ("s_next", STATE_DIM)):
            if np.shape(getattr(self, name)) != (n,):
                raise ValueError(f"transition field {name} must have {n} components")


@dataclass(frozen=True, eq=False)
class TrajectorySequence:
    """States s_0..s_n and actions a_0..a_{n-1}; transitions chain by construction."""

    states: np.ndarray
    actions: np.ndarray
    seed: int | None = None
    source: str = "random"

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        actions = np.asarray(self.actions, dtype=float)
        if states.ndim != 2 or states.shape[1] != STATE_DIM:
            raise ValueError(f"states must have shape (n+1, {STATE_DIM})")
        if actions.ndim != 2 or actions.shape[1] != ACTION_DIM:
            raise ValueError(f"actions must have shape (n, {ACTION_DIM})")
        if len(states) != len(actions) + 1:
            raise ValueError("a sequence needs exactly one more state than actions")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source tag {self.source!r}")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)

    def __len__(self):
        return len(self.actions)

    @property
    def transitions(self):
        return [Transition(self.states[k], self.actions[k], self.states[k + 1]) for k in range(len(self))]

    def __eq__(self, other):
        if not isinstance(other, TrajectorySequence):
            return NotImplemented
        return (self.seed == other.seed and self.source == other.source
                and np.array_equal(self.states, other.states)
                and np.array_equal(self.actions, other.actions))

    __hash__ = None


@dataclass(frozen=True)
class NormStats:
    """Per-dimension min/max/mean of states (10) and actions (4)."""

    state_min: np.ndarray
    state_max: np.ndarray
    state_mean: np.ndarray
    action_min: np.ndarray
    action_max: np.ndarray
    action_mean: np.ndarray

    @classmethod
    def from_sequences(cls, sequences):
        if not sequences:
            raise EmptyDatasetError("cannot compute statistics of an empty dataset")
        S = np.concatenate([seq.states for seq in sequences])
        A = np.concatenate([seq.actions for seq in sequences])
        return cls(S.min(0), S.max(0), S.mean(0), A.min(0), A.max(0), A.mean(0))

    @staticmethod
    def _scale(lo, hi):
        span = hi - lo
        return np.where(span > 0, span, 1.0)

    def normalize_states(self, s):
        return (np.asarray(s) - self.state_min) / self._scale(self.state_min, self.state_max)

    def denormalize_states(self, z):
        return np.asarray(z) * self._scale(self.state_min, self.state_max) + self.state_min

    def normalize_actions(self, a):
        return (np.asarray(a) - self.action_min) / self._scale(self.action_min, self.action_max)

    def to_dict(self):
        return {k: [float(x) for x in getattr(self, k)] for k in
                ("state_min", "state_max", "state_mean", "action_min", "action_max", "action_mean")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})

    def __eq__(self, other):
        if not isinstance(other, NormStats):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in self.to_dict())


@dataclass(frozen=True, eq=False)
class Dataset:
    sequences: tuple[TrajectorySequence, ...]
    stats: NormStats | None = None

    def __post_init__(self):
        object.__setattr__(self, "sequences", tuple(self.sequences))

    def __len__(self):
        return len(self.sequences)

    @property
    def n_transitions(self):
        return sum(len(s) for s in self.sequences)

    def arrays(self):
        """Stacked (S, A, S_next) over all transitions."""
        if not self.sequences:
            raise EmptyDatasetError("dataset has no sequences")
        S = np.concatenate([q.states[:-1] for q in self.sequences])
        A = np.concatenate([q.actions for q in self.sequences])
        S1 = np.concatenate([q.states[1:] for q in self.sequences])
        return S, A, S1

    def with_stats(self, stats=None):
        return Dataset(self.sequences, stats or NormStats.from_sequences(self.sequences))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (len(self) == len(other)
                and all(a == b for a, b in zip(self.sequences, other.sequences))
                and self.stats == other.stats)

    __hash__ = None


def ou_actions(n_steps, rng, T_s=0.05, tau=0.2, stationary_std=0.25, mean=0.5, clip=True):
    """Ornstein-Uhlenbeck exploration, started from its stationary law.

    Clipped to [0, 1]^4 unless ``clip`` is false (used for additive noise).
    """
    decay = math.exp(-T_s / tau)
    shock = stationary_std * math.sqrt(1.0 - decay * decay)
    x = mean + stationary_std * rng.standard_normal(ACTION_DIM)
    out = np.empty((n_steps, ACTION_DIM))
    for k in range(n_steps):
        out[k] = x
        x = mean + decay * (x - mean) + shock * rng.standard_normal(ACTION_DIM)
    return np.clip(out, 0.0, 1.0) if clip else out


def oscillating_actions(n_steps, rng, T_s=0.05, tau=0.2, noise_std=0.1,
                        period_range=(0.2, 1.2), coherent=0.75):
    """Random trot-like oscillation plus OU noise, in [0, 1]^4.

    Period, amplitudes, offsets and the pair-to-pair phase are drawn per
    sequence, so the data covers walking at many speeds rather than only
    the expert's. With probability ``coherent`` the compression peaks while
    the leg swings forward (a quarter turn after peak bending), as in a
    walking gait; otherwise the compression phase is uniform.
    """
    period = rng.uniform(*period_range)
    t = np.arange(n_steps) * T_s
    phase = 2 * math.pi * (t / period + rng.uniform())
    lag = 2 * math.pi * rng.uniform(0.3, 0.7)
    centre = rng.uniform(0.2, 0.8, ACTION_DIM)
    amp = rng.uniform(0.0, 0.5, ACTION_DIM)
    if rng.uniform() < coherent:
        z_shift = 2 * math.pi * (0.25 + 0.08 * rng.standard_normal())
    else:
        z_shift = 2 * math.pi * rng.uniform(0.0, 1.0)
    one = np.column_stack([np.cos(phase), np.cos(phase + z_shift)])
    two = np.column_stack([np.cos(phase - lag), np.cos(phase - lag + z_shift)])
    wave = np.column_stack([one[:, 0], one[:, 1], two[:, 0], two[:, 1]])
    base = centre + amp * wave
    noise = ou_actions(n_steps, rng, T_s, tau, noise_std, 0.0, clip=False)
    return np.clip(base + noise, 0.0, 1.0)


def insert_holds(actions, rng, n_holds=(1, 3), length=(10, 40)):
    """Freeze the command over a few random windows.

    Thrust comes from leg motion, so held commands teach the model that the
    body slows down once the legs stop moving.
    """
    out = np.array(actions, dtype=float)
    n = len(out)
    for _ in range(rng.integers(n_holds[0], n_holds[1] + 1)):
        span = int(rng.integers(length[0], length[1] + 1))
        start = int(rng.integers(0, max(n - span, 1)))
        out[start:start + span] = out[start]
    return out


def rollout_sequence(plant, actions, seed, source):
    plant.reset(seed)
    states = [plant.initial_state().as_array()]
    applied = []
    for a in actions:
        out = plant.step(a)
        applied.append(np.clip(a, 0.0, 1.0))
        states.append(out.next_state.as_array())
        if out.fallen:
            break
    return TrajectorySequence(np.array(states), np.array(applied), seed, source)


def _collect_one(config, noise, steps, seed, source, opts, gait, limits):
    rng = np.random.default_rng(seed)
    if source == "expert":
        t0 = rng.uniform(0.0, gait.period)
        actions = expert_gait_array(t0 + np.arange(steps) * config.T_s, gait, limits)
    elif rng.uniform() < opts["oscillation_fraction"]:
        actions = oscillating_actions(steps, rng, config.T_s, opts["ou_tau"])
    else:
        # each sequence wanders around its own operating point
        mean = 0.5 + opts["ou_mean_spread"] * rng.uniform(-0.5, 0.5, ACTION_DIM)
        actions = ou_actions(steps, rng, config.T_s, opts["ou_tau"], opts["ou_std"], mean)
    if source != "expert" and rng.uniform() < opts["hold_fraction"]:
        actions = insert_holds(actions, rng)
    plant = ReferencePlant(config, seed, noise=noise)
    return rollout_sequence(plant, actions, seed, source)


def collect(plant, n_sequences=250, steps_per_sequence=100, expert_fraction=0.02, seed=0,
            ou_tau=0.2, ou_std=0.35, ou_mean_spread=0.0, oscillation_fraction=0.8,
            hold_fraction=0.5, gait: GaitWaveSpec = GaitWaveSpec(), n_jobs=1) -> Dataset:
    """Roll the plant from s0 under expert and smoothed-random actions.

    ``plant`` may be a :class:`ReferencePlant` (its config and noise setting are
    reused) or a :class:`PlantConfig` (noise off). Each sequence has its own
    child seed, so the result does not depend on ``n_jobs``.
    """
    if n_sequences <= 0:
        raise EmptyDatasetError("n_sequences must be positive")
    if not 0.0 <= expert_fraction <= 1.0:
        raise ValueError("expert_fraction must lie in [0, 1]")
    if isinstance(plant, PlantConfig):
        config, noise = plant, False
    else:
        config, noise = plant.config, plant.noise
    n_expert = math.ceil(expert_fraction * n_sequences - 1e-12)
    children = np.random.SeedSequence(seed).generate_state(n_sequences)
    tasks = [(int(children[i]), "expert" if i < n_expert else "random") for i in range(n_sequences)]
    limits = config.limits
    opts = dict(ou_tau=ou_tau, ou_std=ou_std, ou_mean_spread=ou_mean_spread,
                oscillation_fraction=oscillation_fraction, hold_fraction=hold_fraction)
    if n_jobs == 1:
        seqs = [_collect_one(config, noise, steps_per_sequence, s, src, opts, gait, limits) for s, src in tasks]
    else:
        seqs = Parallel(n_jobs=n_jobs)(
            delayed(_collect_one)(config, noise, steps_per_sequence, s, src, opts, gait, limits)
            for s, src in tasks
        )
    return Dataset(tuple(seqs)).with_stats()


def split(dataset: Dataset, val_ratio=0.2, seed=0):
    """Sequence-level split; every expert sequence goes to validation.

    Training statistics are recomputed on the training part and attached to
    both halves.
    """
    if not 0.0 < val_ratio < 1.0:
        raise ValueError("val_ratio must lie strictly between 0 and 1")
    n = len(dataset)
    expert = [i for i, s in enumerate(dataset.sequences) if s.source == "expert"]
    rand = [i for i, s in enumerate(dataset.sequences) if s.source != "expert"]
    n_val = int(round(val_ratio * n))
    n_rand_val = max(0, n_val - len(expert))
    rng = np.random.default_rng(seed)
    picked = set(rng.choice(rand, size=min(n_rand_val, len(rand)), replace=False).tolist()) if rand else set()
    val_idx = sorted(set(expert) | picked)
    train_idx = [i for i in range(n) if i not in set(val_idx)]
    if not train_idx or not val_idx:
        raise EmptyDatasetError(f"val_ratio={val_ratio} leaves one side of a {n}-sequence split empty")
    train_seqs = tuple(dataset.sequences[i] for i in train_idx)
    stats = NormStats.from_sequences(train_seqs)
    val_seqs = tuple(dataset.sequences[i] for i in val_idx)
    return Dataset(train_seqs, stats), Dataset(val_seqs, stats)


def _fmt(x):
    return repr(float(x))


def stats_path(path):
    path = Path(path)
    return path.with_name(path.name + ".stats.json")


def save(dataset: Dataset, path):
    """Write the transition CSV plus a JSON sidecar with statistics and seeds."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for sid, seq in enumerate(dataset.sequences):
            for k in range(len(seq)):
                w.writerow([sid, k, *map(_fmt, seq.states[k]), *map(_fmt, seq.actions[k]),
                            *map(_fmt, seq.states[k + 1]), seq.source])
    side = {
        "stats": dataset.stats.to_dict() if dataset.stats is not None else None,
        "seeds": [seq.seed for seq in dataset.sequences],
    }
    stats_path(path).write_text(json.dumps(side, indent=1))


def load(path) -> Dataset:
    path = Path(path)
    rows_by_seq: dict[int, list] = {}
    order = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDatasetError(f"{path} is empty") from None
        if header != CSV_COLUMNS:
            raise DatasetParseError("unexpected header", line=1)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(CSV_COLUMNS):
                raise DatasetParseError(f"expected {len(CSV_COLUMNS)} fields, found {len(row)}", line)
            try:
                sid, step = int(row[0]), int(row[1])
                values = np.array([float(x) for x in row[2:-1]])
            except ValueError as exc:
                raise DatasetParseError(str(exc), line) from None
            tag = row[-1]
            if tag not in SOURCES:
                raise DatasetParseError(f"unknown source tag {tag!r}", line)
            if sid not in rows_by_seq:
                rows_by_seq[sid] = []
                order.append(sid)
            rows = rows_by_seq[sid]
            if step != len(rows):
                raise DatasetParseError(f"sequence {sid} step {step} out of order", line)
            if rows and not np.array_equal(rows[-1][1][-STATE_DIM:], values[:STATE_DIM]):
                raise DatasetParseError(f"sequence {sid} step {step} does not chain to the previous row", line)
            rows.append((tag, values))
    if not order:
        raise EmptyDatasetError(f"{path} holds no transitions")
    side = {}
    if stats_path(path).exists():
        side = json.loads(stats_path(path).read_text())
    seeds = side.get("seeds") or [None] * len(order)
    seqs = []
    for pos, sid in enumerate(order):
        rows = rows_by_seq[sid]
        V = np.array([v for _, v in rows])
        states = np.vstack([V[:, :STATE_DIM], V[-1:, STATE_DIM + ACTION_DIM:]])
        actions = V[:, STATE_DIM:STATE_DIM + ACTION_DIM]
        seed = seeds[pos] if pos < len(seeds) else None
        seqs.append(TrajectorySequence(states, actions, seed, rows[0][0]))
    stats = NormStats.from_dict(side["stats"]) if side.get("stats") else None
    return Dataset(tuple(seqs), stats)
