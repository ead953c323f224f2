"""Neural surrogate of the plant's state-transition function.

:class:`SurrogateDynamics` is a scikit-learn regressor mapping ``[s, a]``
(14 columns) to ``s_next`` (10 columns). Internally it works on min/max
normalized states and predicts the normalized increment, so
``f(s, a) = s + net(s, a)`` in normalized units; the training loss is the
mean of ``0.5 * ||s_next - f(s, a)||^2`` in those units. Predictions are
clipped to ``[-clip_margin, 1 + clip_margin]`` in normalized units so that
long open-loop rollouts saturate instead of diverging.

``input_noise`` perturbs the input states of every training batch (the
targets stay the true next states), which teaches the increment to pull
perturbed states back toward the data and slows open-loop drift.
"""
from __future__ import annotations

import ast
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import nn
from .dataset import Dataset, EmptyDatasetError, NormStats
from .plant import ACTION_DIM, STATE_DIM

log = logging.getLogger(__name__)

N_FEATURES = STATE_DIM + ACTION_DIM


def _stats_from_arrays(X, y):
    S = np.vstack([X[:, :STATE_DIM], y])
    A = X[:, STATE_DIM:]
    return NormStats(S.min(0), S.max(0), S.mean(0), A.min(0), A.max(0), A.mean(0))


class SurrogateDynamics(BaseEstimator, RegressorMixin):
    """DNN dynamics model 14 -> 64 -> 128 -> 64 -> 10 (ReLU hidden, linear head)."""

    def __init__(self, hidden=(64, 128, 64), epochs=200, batch_size=64, lr=1e-3,
                 lr_final_fraction=0.01, patience=20, clip_margin=0.25, input_noise=0.0, seed=0):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_final_fraction = lr_final_fraction
        self.patience = patience
        self.clip_margin = clip_margin
        self.input_noise = input_noise
        self.seed = seed

    # -- fitting -------------------------------------------------------------
    def _inputs(self, S, A):
        st = self.stats_
        return np.hstack([st.normalize_states(S), st.normalize_actions(A)])

    def fit(self, X, y, stats: NormStats | None = None, X_val=None, y_val=None):
        X, y = check_X_y(X, y, multi_output=True, dtype=np.float64)
        if X.shape[1] != N_FEATURES or y.shape[1] != STATE_DIM:
            raise ValueError(f"expected X with {N_FEATURES} and y with {STATE_DIM} columns")
        self.stats_ = stats if stats is not None else _stats_from_arrays(X, y)
        spec = nn.MLPSpec.hidden(N_FEATURES, tuple(self.hidden), STATE_DIM)
        params = nn.init_params(spec, self.seed)
        opt = nn.AdamState.zeros_like(params, lr=self.lr)
        rng = np.random.default_rng(self.seed)

        Z_in = self._inputs(X[:, :STATE_DIM], X[:, STATE_DIM:])
        Z_s = Z_in[:, :STATE_DIM]
        Z_target = self.stats_.normalize_states(y) - Z_s
        n = len(X)
        bs = min(self.batch_size, n)
        has_val = X_val is not None
        best = (math.inf, params, -1)
        self.loss_curve_ = []
        self.val_curve_ = []
        since_best = 0
        for epoch in range(self.epochs):
            frac = epoch / max(self.epochs - 1, 1)
            lr = self.lr * (self.lr_final_fraction + (1 - self.lr_final_fraction) * 0.5 * (1 + math.cos(math.pi * frac)))
            opt = nn.AdamState(opt.m, opt.v, opt.step, lr, opt.beta1, opt.beta2, opt.eps)
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                inp, target = Z_in[idx], Z_target[idx]
                if self.input_noise:
                    jitter = self.input_noise * rng.standard_normal((len(idx), STATE_DIM))
                    inp = inp.copy()
                    inp[:, :STATE_DIM] += jitter
                    target = target - jitter
                out, cache = nn.forward(params, inp)
                err = out - target
                total += 0.5 * float(np.sum(err * err))
                grads = nn.backward(params, cache, err / len(idx))
                params, opt = nn.optimizer_step(params, grads, opt)
            loss = total / n
            if not math.isfinite(loss):
                raise FloatingPointError(f"surrogate training diverged at epoch {epoch} (loss={loss})")
            self.loss_curve_.append(loss)
            self.params_ = params
            if has_val:
                score = one_step_nrmse(self, X_val, y_val)
                self.val_curve_.append(score)
            else:
                score = loss
            if score < best[0]:
                best = (score, params, epoch)
                since_best = 0
            else:
                since_best += 1
                if has_val and self.patience and since_best >= self.patience:
                    break
        self.params_ = best[1]
        self.best_epoch_ = best[2]
        self.n_epochs_ = len(self.loss_curve_)
        self.train_error_ = self.training_error(X, y)
        return self

    def training_error(self, X, y):
        """Mean of 0.5*||s_next - f(s,a)||^2 in normalized state units."""
        pred = self.predict(X)
        err = self.stats_.normalize_states(pred) - self.stats_.normalize_states(y)
        return float(0.5 * np.mean(np.sum(err * err, axis=1)))

    # -- prediction ----------------------------------------------------------
    def predict_states(self, S, A):
        check_is_fitted(self, "params_")
        S = np.asarray(S, dtype=np.float64)
        A = np.asarray(A, dtype=np.float64)
        if S.shape[-1] != STATE_DIM or A.shape[-1] != ACTION_DIM:
            raise ValueError(f"expected states with {STATE_DIM} and actions with {ACTION_DIM} columns")
        if not (np.all(np.isfinite(S)) and np.all(np.isfinite(A))):
            raise ValueError("non-finite input to the surrogate")
        z = self._inputs(S, A)
        out = z[..., :STATE_DIM] + nn.predict(self.params_, z)
        if self.clip_margin is not None:
            # keep open-loop rollouts inside a band around the training envelope
            out = np.clip(out, -self.clip_margin, 1.0 + self.clip_margin)
        return self.stats_.denormalize_states(out)

    def predict(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != N_FEATURES:
            raise ValueError(f"expected {N_FEATURES} columns, got {X.shape[1]}")
        return self.predict_states(X[:, :STATE_DIM], X[:, STATE_DIM:])

    def rollout(self, s0, actions):
        """Open-loop prediction s_hat_1..s_hat_T from s0 under the given actions."""
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if len(actions) < 1:
            raise ValueError("rollout needs at least one action")
        s = np.asarray(s0, dtype=np.float64)[None, :]
        out = []
        for a in actions:
            s = self.predict_states(s, a[None, :])
            out.append(s[0])
        return np.array(out)

    def score(self, X, y, sample_weight=None):
        """Mean per-dimension correlation of one-step predictions."""
        pred = self.predict(X)
        return float(np.mean(_correlations(np.asarray(y), pred)))

    # -- persistence -----------------------------------------------------------
    def save(self, path):
        check_is_fitted(self, "params_")
        data = nn.params_to_npz_dict(self.params_, prefix="net_")
        for k, v in self.stats_.to_dict().items():
            data[f"stats_{k}"] = np.asarray(v)
        data["estimator"] = np.array(repr(self.get_params()))
        with open(path, "wb") as fh:
            np.savez(fh, **data)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as data:
            params = nn.params_from_npz_dict(data, prefix="net_")
            stats = NormStats.from_dict({k[6:]: data[k] for k in data.files if k.startswith("stats_")})
            saved = ast.literal_eval(str(data["estimator"])) if "estimator" in data.files else {}
        saved.update(hidden=tuple(params.spec.widths[1:-1]), seed=params.seed)
        model = cls(**saved)
        model.params_ = params
        model.stats_ = stats
        return model


def train_surrogate(train_set: Dataset, epochs=200, batch_size=64, lr=1e-3, seed=0,
                    val_set: Dataset | None = None, patience=20, hidden=(64, 128, 64),
                    input_noise=0.0) -> SurrogateDynamics:
    if len(train_set) == 0:
        raise EmptyDatasetError("training set is empty")
    S, A, S1 = train_set.arrays()
    stats = train_set.stats or NormStats.from_sequences(train_set.sequences)
    model = SurrogateDynamics(hidden=hidden, epochs=epochs, batch_size=batch_size, lr=lr,
                              patience=patience, input_noise=input_noise, seed=seed)
    fit_kw = {}
    if val_set is not None and len(val_set):
        Sv, Av, S1v = val_set.arrays()
        fit_kw = dict(X_val=np.hstack([Sv, Av]), y_val=S1v)
    return model.fit(np.hstack([S, A]), S1, stats=stats, **fit_kw)


# --- validation metrics ------------------------------------------------------

def _correlations(true, pred):
    """Per-dimension Pearson correlation; 0 where either side is constant."""
    t = true - true.mean(axis=0)
    p = pred - pred.mean(axis=0)
    num = np.sum(t * p, axis=0)
    den = np.sqrt(np.sum(t * t, axis=0) * np.sum(p * p, axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return r


def one_step_nrmse(model, X, y, ranges=None):
    pred = model.predict(X)
    if ranges is None:
        ranges = np.ptp(np.vstack([X[:, :STATE_DIM], y]), axis=0)
    keep = ranges > 0
    e = (y - pred)[:, keep] / ranges[keep]
    return float(np.sqrt(np.mean(np.sum(e * e, axis=1))))


@dataclass
class ValidationReport:
    R: float
    NRMSE: float
    R_per_dim: np.ndarray
    R_pooled: float
    horizons: np.ndarray
    R_T: np.ndarray
    NRMSE_T: np.ndarray
    rho: np.ndarray                   # per-horizon correlation (not averaged)
    n_starts: np.ndarray              # windows available per horizon
    dropped_dims: list = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["horizon", "R_T", "NRMSE_T", "rho_horizon", "n_windows"])
            for row in zip(self.horizons, self.R_T, self.NRMSE_T, self.rho, self.n_starts):
                w.writerow([int(row[0]), repr(float(row[1])), repr(float(row[2])), repr(float(row[3])), int(row[4])])

    def summary(self):
        return {"R": self.R, "NRMSE": self.NRMSE, "R_pooled": self.R_pooled,
                "R_T_max": float(self.R_T[-1]), "NRMSE_T_max": float(self.NRMSE_T[-1]),
                "T_max": int(self.horizons[-1])}


def validate(model, val_set: Dataset, T_max=200) -> ValidationReport:
    """One-step and T-step open-loop scores over every window of the validation set.

    ``model`` needs ``predict_states(S, A)``. Each start state s_t of every
    sequence is propagated open loop; horizon i is scored over all starts with
    i steps of ground truth ahead. NRMSE^T averages the squared normalized
    error over horizons 1..T for starts that have T steps ahead; R^T is the
    mean of the per-horizon correlations.
    """
    if len(val_set) == 0:
        raise EmptyDatasetError("validation set is empty")
    if T_max < 1:
        raise ValueError("T_max must be at least 1")
    longest = max(len(q) for q in val_set.sequences)
    if longest < T_max:
        raise ValueError(f"validation sequences hold at most {longest} steps, fewer than T_max={T_max}")

    all_states = np.concatenate([q.states for q in val_set.sequences])
    ranges = np.ptp(all_states, axis=0)
    keep = ranges > 0
    dropped = [int(d) for d in np.flatnonzero(~keep)]
    if dropped:
        log.warning("state dimension(s) %s are constant over the validation set; excluded from NRMSE", dropped)
    scale = np.where(keep, ranges, 1.0)

    # one row per start (sequence q, time t)
    seq_ids, times, remain = [], [], []
    for qi, q in enumerate(val_set.sequences):
        n = len(q)
        seq_ids.append(np.full(n, qi))
        times.append(np.arange(n))
        remain.append(n - np.arange(n))
    seq_ids = np.concatenate(seq_ids)
    times = np.concatenate(times)
    remain = np.concatenate(remain)
    n_starts = len(times)

    states = [q.states for q in val_set.sequences]
    actions = [q.actions for q in val_set.sequences]

    def gather(arrs, offset, rows):
        return np.stack([arrs[seq_ids[r]][times[r] + offset] for r in rows]) if len(rows) else np.empty((0, arrs[0].shape[1]))

    sq_err = np.full((n_starts, T_max), np.nan)
    rho = np.zeros(T_max)
    counts = np.zeros(T_max, dtype=int)
    rho_dims = None

    # pre-stack flat arrays for fast gathering
    offsets = np.cumsum([0] + [len(s) for s in states])[:-1]
    S_flat = np.concatenate(states)
    A_offsets = np.cumsum([0] + [len(a) for a in actions])[:-1]
    A_flat = np.concatenate(actions)
    base_s = offsets[seq_ids] + times
    base_a = A_offsets[seq_ids] + times

    active = np.arange(n_starts)
    pred = S_flat[base_s]
    for i in range(1, T_max + 1):
        alive = remain[active] >= i
        active = active[alive]
        pred = pred[alive]
        if len(active) == 0:
            break
        pred = np.asarray(model.predict_states(pred, A_flat[base_a[active] + i - 1]), dtype=np.float64)
        truth = S_flat[base_s[active] + i]
        e = (truth - pred) / scale
        e[:, ~keep] = 0.0
        sq_err[active, i - 1] = np.sum(e * e, axis=1)
        r = _correlations(truth[:, keep], pred[:, keep])
        if i == 1:
            rho_dims = np.zeros(STATE_DIM)
            rho_dims[keep] = r
            t1, p1 = truth, pred
        rho[i - 1] = float(np.mean(r))
        counts[i - 1] = len(active)

    horizons = np.arange(1, T_max + 1)
    nrmse_T = np.empty(T_max)
    for T in horizons:
        rows = remain >= T
        nrmse_T[T - 1] = math.sqrt(float(np.mean(np.mean(sq_err[rows, :T], axis=1))))
    R_T = np.cumsum(rho) / horizons

    z_true = (t1 / scale)[:, keep].ravel()
    z_pred = (p1 / scale)[:, keep].ravel()
    pooled = float(_correlations(z_true[:, None], z_pred[:, None])[0])
    return ValidationReport(
        R=float(R_T[0]), NRMSE=float(nrmse_T[0]), R_per_dim=rho_dims, R_pooled=pooled,
        horizons=horizons, R_T=R_T, NRMSE_T=nrmse_T, rho=rho, n_starts=counts, dropped_dims=dropped,
    )


class PlantOracle:
    """Wraps the noise-free plant as a dynamics 'model' for metric checks.

    The plant has hidden internal state, so the oracle re-simulates every
    validation sequence and remembers the internal snapshot behind each
    observed state; predictions resume from the matching snapshot.
    """

    def __init__(self, plant_factory, val_set: Dataset):
        self._plant = plant_factory()
        self._snaps = {}
        for q in val_set.sequences:
            self._plant.reset(q.seed)
            self._snaps.setdefault(q.states[0].tobytes(), self._plant.snapshot())
            for a in q.actions:
                self._plant.step(a)
                self._snaps.setdefault(self._plant.true_state.tobytes(), self._plant.snapshot())

    def predict_states(self, S, A):
        out = np.empty((len(S), STATE_DIM))
        for k, (s, a) in enumerate(zip(np.asarray(S), np.asarray(A))):
            self._plant.restore(self._snaps[s.tobytes()])
            self._plant.step(a)
            nxt = self._plant.true_state
            self._snaps.setdefault(nxt.tobytes(), self._plant.snapshot())
            out[k] = nxt
        return out
