"""Conditional velocity-field MLP over flat float64 parameter vectors.

The network maps (state, time, condition) to a velocity of the same
dimension as the state. Time enters as the fixed embedding
(tau, sin 2*pi*tau, cos 2*pi*tau) and the condition as a one-hot vector,
so the parameter count is a pure function of the architecture spec.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Var, value_of
from .exceptions import ConfigurationError, NumericsError

TIME_EMBED_DIM = 3
ACTIVATIONS = ("tanh", "smooth-relu")


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of the velocity net.

    ``input_dim`` = state dim + time embedding dim + number of conditions;
    ``output_dim`` equals the state dimension.
    """

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims",
                           tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ConfigurationError("hidden_dims must be non-empty")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigurationError("hidden_dims must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(
                f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if self.n_conditions < 1:
            raise ConfigurationError(
                "input_dim must leave room for at least one condition "
                f"(input_dim={self.input_dim}, output_dim={self.output_dim})")

    @property
    def state_dim(self) -> int:
        return self.output_dim

    @property
    def n_conditions(self) -> int:
        return self.input_dim - self.output_dim - TIME_EMBED_DIM

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def param_count(self) -> int:
        return sum(fan_in * fan_out + fan_out
                   for fan_in, fan_out in self.layer_shapes())

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim,
                "hidden_dims": list(self.hidden_dims),
                "output_dim": self.output_dim,
                "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(input_dim=int(d["input_dim"]),
                   hidden_dims=tuple(d["hidden_dims"]),
                   output_dim=int(d["output_dim"]),
                   activation=d["activation"])


def velocity_spec(n_conditions: int, hidden_dims=(64, 64, 64),
                  activation: str = "tanh", state_dim: int = 2) -> MlpSpec:
    """Spec for a velocity net over ``state_dim``-D states with one-hot conditions."""
    return MlpSpec(input_dim=state_dim + TIME_EMBED_DIM + n_conditions,
                   hidden_dims=tuple(hidden_dims),
                   output_dim=state_dim,
                   activation=activation)


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform fan-in init for hidden layers; final layer all zeros.

    The zero final layer makes the untrained field identically zero, which
    keeps early pretraining steps well scaled.
    """
    chunks = []
    shapes = spec.layer_shapes()
    for i, (fan_in, fan_out) in enumerate(shapes):
        if i == len(shapes) - 1:
            chunks.append(np.zeros(fan_in * fan_out + fan_out))
            continue
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def unpack_params(spec: MlpSpec, params):
    """Split a flat parameter vector (ndarray or Var) into (W, b) pairs."""
    layers = []
    offset = 0
    for fan_in, fan_out in spec.layer_shapes():
        w = params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset:offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def embed_inputs(state, time, condition, spec: MlpSpec) -> np.ndarray:
    """Build the (batch, input_dim) feature matrix for the net.

    Accepts a single state ``(d,)`` or a batch ``(B, d)``; time and
    condition may be scalars or per-row arrays.
    """
    x = np.asarray(state, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    n = x.shape[0]
    if x.shape[1] != spec.state_dim:
        raise ConfigurationError(
            f"state dim {x.shape[1]} does not match spec state dim {spec.state_dim}")
    tau = np.broadcast_to(np.asarray(time, dtype=np.float64), (n,))
    cond = np.broadcast_to(np.asarray(condition, dtype=np.int64), (n,))
    if np.any(cond < 0) or np.any(cond >= spec.n_conditions):
        raise ConfigurationError(
            f"condition ids must lie in [0, {spec.n_conditions})")
    features = np.empty((n, spec.input_dim))
    features[:, :spec.state_dim] = x
    base = spec.state_dim
    features[:, base] = tau
    features[:, base + 1] = np.sin(2.0 * np.pi * tau)
    features[:, base + 2] = np.cos(2.0 * np.pi * tau)
    onehot = np.zeros((n, spec.n_conditions))
    onehot[np.arange(n), cond] = 1.0
    features[:, base + TIME_EMBED_DIM:] = onehot
    return features, single


def _activate(h, name: str):
    if isinstance(h, Var):
        return h.tanh() if name == "tanh" else h.softplus()
    return np.tanh(h) if name == "tanh" else np.logaddexp(0.0, h)


def forward(spec: MlpSpec, params, state, time, condition):
    """Evaluate the velocity field; pure and deterministic.

    ``params`` may be a flat ndarray (plain evaluation) or a ``Var`` (the
    result participates in a gradient tape). Returns ``(d,)`` for a single
    state, ``(B, d)`` for a batch.
    """
    n_params = value_of(params).shape[0]
    if n_params != spec.param_count():
        raise ConfigurationError(
            f"parameter vector has length {n_params}, spec implies {spec.param_count()}")
    features, single = embed_inputs(state, time, condition, spec)
    layers = unpack_params(spec, params)
    h = features
    for w, b in layers[:-1]:
        h = _activate(h @ w + b, spec.activation)
    w, b = layers[-1]
    out = h @ w + b
    if single:
        return out[0]
    return out


def backward(spec: MlpSpec, params: np.ndarray, loss_closure):
    """Exact reverse-mode gradient of a scalar closure w.r.t. ``params``.

    ``loss_closure(params_var)`` must return a scalar built from ``Var``
    operations (typically compositions of :func:`forward` evaluations).
    Closures that never touch the parameters yield a zero gradient.
    """
    pvar = Var(np.asarray(params, dtype=np.float64))
    out = loss_closure(pvar)
    if not isinstance(out, Var):
        loss = float(np.asarray(out))
        if not np.isfinite(loss):
            raise NumericsError(f"loss is not finite: {loss}")
        return loss, np.zeros_like(pvar.value)
    loss = float(out.value)
    if not np.isfinite(loss):
        raise NumericsError(f"loss is not finite: {loss}")
    out.backward()
    grad = pvar.grad
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise NumericsError(
            f"gradient has {bad.size} non-finite entries (first at index {bad[0]})")
    return loss, grad


@dataclass
class AdamState:
    """First/second moment accumulators and the step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n_params: int) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), step=0)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update; returns (new_params, new_state).

    Descends along ``grad``; callers maximizing an objective pass the
    gradient of its negation.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ConfigurationError("parameter, gradient and moment shapes must match")
    if not np.all(np.isfinite(grad)):
        raise NumericsError("refusing Adam step: gradient has non-finite entries")
    b1, b2 = betas
    step = state.step + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m=m, v=v, step=step)


CHECKPOINT_FORMAT = "tpflow-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, spec: MlpSpec, params: np.ndarray, seed: int,
                    meta: dict | None = None) -> Path:
    """Write params as a JSON header line plus a little-endian float64 payload."""
    path = Path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": spec.to_dict(),
        "seed": int(seed),
        "n_params": int(params.shape[0]),
        "dtype": "<f8",
    }
    if meta:
        header["meta"] = meta
    payload = np.ascontiguousarray(params, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)
    return path


def load_checkpoint(path):
    """Read a checkpoint; returns (spec, params, header)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    spec = MlpSpec.from_dict(header["spec"])
    params = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if params.shape[0] != header["n_params"]:
        raise ConfigurationError(
            f"checkpoint payload has {params.shape[0]} values, header says {header['n_params']}")
    if params.shape[0] != spec.param_count():
        raise ConfigurationError("checkpoint payload does not match its spec")
    return spec, params, header
