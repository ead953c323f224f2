"""Small feed-forward networks with hand-written reverse-mode gradients.

Parameters are immutable value objects: :func:`optimizer_step` returns a new
:class:`MLPParams` instead of mutating in place, and a forward cache remembers
which parameter bundle produced it so a stale cache cannot be replayed.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "linear", "tanh", "softplus")
PARAMS_FORMAT_VERSION = 1


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths from input to output and one activation per layer."""

    widths: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        acts = tuple(self.activations)
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "activations", acts)
        if len(widths) < 2:
            raise ValueError("an MLP needs at least an input and an output width")
        if any(w <= 0 for w in widths):
            raise ValueError(f"widths must be positive, got {widths}")
        if len(acts) != len(widths) - 1:
            raise ValueError(
                f"{len(widths) - 1} layers need {len(widths) - 1} activations, got {len(acts)}"
            )
        bad = [a for a in acts if a not in ACTIVATIONS]
        if bad:
            raise ValueError(f"unknown activation(s) {bad}; choose from {ACTIVATIONS}")

    @classmethod
    def hidden(cls, n_in, hidden, n_out, activation="relu", output="linear"):
        widths = (n_in, *hidden, n_out)
        return cls(widths, (activation,) * len(hidden) + (output,))

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def to_dict(self):
        return {"widths": list(self.widths), "activations": list(self.activations)}


@dataclass(frozen=True, eq=False)
class MLPParams:
    spec: MLPSpec
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    seed: int | None = None

    def __post_init__(self):
        if len(self.weights) != self.spec.n_layers or len(self.biases) != self.spec.n_layers:
            raise ShapeError("number of weight/bias arrays does not match the layer widths")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.spec.widths[k], self.spec.widths[k + 1])
            if w.shape != expect or b.shape != (expect[1],):
                raise ShapeError(
                    f"layer {k}: weight {w.shape} / bias {b.shape}, expected {expect} / ({expect[1]},)"
                )
            w.flags.writeable = False
            b.flags.writeable = False

    def arrays(self):
        return list(self.weights) + list(self.biases)

    def n_parameters(self):
        return sum(a.size for a in self.arrays())

    @classmethod
    def from_arrays(cls, spec, arrays, seed=None):
        n = spec.n_layers
        return cls(spec, tuple(arrays[:n]), tuple(arrays[n:]), seed)

    def __eq__(self, other):
        if not isinstance(other, MLPParams) or other.spec != self.spec:
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))

    __hash__ = None


def init_params(spec: MLPSpec, seed: int) -> MLPParams:
    """He-uniform for ReLU layers, Xavier-uniform for all others; zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for k, act in enumerate(spec.activations):
        fan_in, fan_out = spec.widths[k], spec.widths[k + 1]
        if act == "relu":
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MLPParams(spec, tuple(weights), tuple(biases), seed)


def _activate(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "softplus":
        return np.logaddexp(0.0, z)
    return z


def _activation_grad(name, z, h, grad):
    if name == "relu":
        return grad * (z > 0.0)
    if name == "tanh":
        return grad * (1.0 - h * h)
    if name == "softplus":
        # sigmoid(z), evaluated without overflow
        return grad * np.exp(-np.logaddexp(0.0, -z))
    return grad


@dataclass(frozen=True, eq=False)
class ForwardCache:
    params: MLPParams
    inputs: tuple[np.ndarray, ...]   # input to each layer
    pre: tuple[np.ndarray, ...]      # pre-activations
    post: tuple[np.ndarray, ...]     # activations


@dataclass(frozen=True)
class Gradients:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    inputs: np.ndarray

    def arrays(self):
        return list(self.weights) + list(self.biases)


def forward(params: MLPParams, x) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.spec.widths[0]:
        raise ShapeError(f"input of shape {x.shape} does not match input width {params.spec.widths[0]}")
    inputs, pre, post = [], [], []
    h = x
    for w, b, act in zip(params.weights, params.biases, params.spec.activations):
        inputs.append(h)
        z = h @ w + b
        h = _activate(act, z)
        pre.append(z)
        post.append(h)
    out = h[0] if squeeze else h
    return out, ForwardCache(params, tuple(inputs), tuple(pre), tuple(post))


def predict(params: MLPParams, x) -> np.ndarray:
    """Forward pass without keeping the cache."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.spec.widths[0]:
        raise ShapeError(f"input of shape {x.shape} does not match input width {params.spec.widths[0]}")
    h = x
    for w, b, act in zip(params.weights, params.biases, params.spec.activations):
        h = _activate(act, h @ w + b)
    return h


def backward(params: MLPParams, cache: ForwardCache, output_gradient) -> Gradients:
    """Reverse-mode gradients of ``sum(output * output_gradient)``.

    Batch reduction (mean or sum) is whatever the caller folded into
    ``output_gradient``.
    """
    if cache.params is not params:
        raise StaleCacheError("cache was produced by a different parameter bundle")
    g = np.asarray(output_gradient, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.post[-1].shape:
        raise ShapeError(f"output gradient {g.shape} does not match output {cache.post[-1].shape}")
    n = params.spec.n_layers
    gw, gb = [None] * n, [None] * n
    for k in range(n - 1, -1, -1):
        act = params.spec.activations[k]
        g = _activation_grad(act, cache.pre[k], cache.post[k], g)
        gw[k] = cache.inputs[k].T @ g
        gb[k] = g.sum(axis=0)
        g = g @ params.weights[k].T
    return Gradients(tuple(gw), tuple(gb), g)


@dataclass(frozen=True, eq=False)
class AdamState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: MLPParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        zeros = tuple(np.zeros_like(a) for a in params.arrays())
        return cls(zeros, zeros, 0, lr, beta1, beta2, eps)


def adam_update(arrays, grads, state: AdamState, names=None):
    """Adam on a flat list of arrays; returns (new_arrays, new_state)."""
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise ShapeError("parameter, gradient and optimizer-state lists differ in length")
    for k, (a, g) in enumerate(zip(arrays, grads)):
        if a.shape != g.shape:
            raise ShapeError(f"gradient {k} has shape {g.shape}, parameter has {a.shape}")
        if not np.all(np.isfinite(g)):
            label = names[k] if names else f"array {k}"
            raise NonFiniteError(f"non-finite gradient in {label}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_arrays, new_m, new_v = [], [], []
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_arrays.append(a - step)
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(tuple(new_m), tuple(new_v), t, state.lr, b1, b2, state.eps)
    return new_arrays, new_state


def _layer_names(spec):
    n = spec.n_layers
    return [f"layer {k} weight" for k in range(n)] + [f"layer {k} bias" for k in range(n)]


def optimizer_step(params: MLPParams, grads: Gradients, state: AdamState):
    new_arrays, new_state = adam_update(
        params.arrays(), grads.arrays(), state, names=_layer_names(params.spec)
    )
    return MLPParams.from_arrays(params.spec, new_arrays, params.seed), new_state


def soft_update(target: MLPParams, online: MLPParams, tau: float) -> MLPParams:
    arrays = [(1.0 - tau) * t + tau * o for t, o in zip(target.arrays(), online.arrays())]
    return MLPParams.from_arrays(target.spec, arrays, target.seed)


# --- serialization -------------------------------------------------------
# A parameter file is a numpy .npz archive holding a JSON header
# (format version, spec, seed) plus one array per weight/bias.

def params_to_npz_dict(params: MLPParams, prefix=""):
    header = {
        "format_version": PARAMS_FORMAT_VERSION,
        "spec": params.spec.to_dict(),
        "seed": params.seed,
    }
    out = {f"{prefix}header": np.array(json.dumps(header))}
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        out[f"{prefix}w{k}"] = np.asarray(w)
        out[f"{prefix}b{k}"] = np.asarray(b)
    return out


def params_from_npz_dict(data, prefix=""):
    header = json.loads(str(data[f"{prefix}header"]))
    if header.get("format_version") != PARAMS_FORMAT_VERSION:
        raise ValueError(f"unsupported parameter format version {header.get('format_version')}")
    spec = MLPSpec(tuple(header["spec"]["widths"]), tuple(header["spec"]["activations"]))
    weights = tuple(np.array(data[f"{prefix}w{k}"], dtype=np.float64) for k in range(spec.n_layers))
    biases = tuple(np.array(data[f"{prefix}b{k}"], dtype=np.float64) for k in range(spec.n_layers))
    return MLPParams(spec, weights, biases, header["seed"])


def save_params(params: MLPParams, path):
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **params_to_npz_dict(params))


def load_params(path) -> MLPParams:
    with np.load(Path(path), allow_pickle=False) as data:
        return params_from_npz_dict(data)


def params_to_bytes(params: MLPParams) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, **params_to_npz_dict(params))
    return buf.getvalue()
