"""Rectified-flow sampling and pretraining for 2-D conditional targets.

Conventions: tau=0 is the data end, tau high (near 1) the noise end; the
step index t counts remaining denoising steps, so a rollout walks
t = T, T-1, ..., 0 while tau decreases. The learned field regresses the
straight-line velocity (noise - data), so a denoising Euler step subtracts
h * v. The stochastic sampler adds a score-based drift correction and
Gaussian noise of scale sigma(tau) * sqrt(h); with exact velocities this
leaves the per-time marginals unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigurationError, NumericsError
from .mlp import (AdamState, MlpSpec, adam_step, backward, forward,
                  init_params, velocity_spec)

LOG_TWO_PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class TimeGrid:
    """Continuous times for a T-step rollout: taus[0]=0, taus[T]=tau_max < 1."""

    n_steps: int
    taus: np.ndarray

    def __post_init__(self):
        taus = np.asarray(self.taus, dtype=np.float64)
        object.__setattr__(self, "taus", taus)
        if taus.shape != (self.n_steps + 1,):
            raise ConfigurationError("grid must hold n_steps + 1 times")
        if taus[0] != 0.0:
            raise ConfigurationError("grid must start at tau = 0 (data end)")
        if taus[-1] >= 1.0:
            raise ConfigurationError("noise-end time must stay below 1")
        if np.any(np.diff(taus) <= 0.0):
            raise ConfigurationError("times must be strictly increasing in step index")

    def step_size(self, t: int) -> float:
        """Magnitude of the denoising step from t to t-1."""
        return float(self.taus[t] - self.taus[t - 1])


def uniform_time_grid(n_steps: int, tau_max: float | None = None) -> TimeGrid:
    """Uniform grid taus[t] = tau_max * t / T.

    The default tau_max = T / (T + 1) keeps the first stochastic step's
    drift multiplier at alpha^2 / 2 for any T; values much closer to 1
    make that step numerically explosive at small T.
    """
    if n_steps < 1:
        raise ConfigurationError("n_steps must be >= 1")
    if tau_max is None:
        tau_max = n_steps / (n_steps + 1.0)
    if not 0.0 < tau_max < 1.0:
        raise ConfigurationError("tau_max must lie in (0, 1)")
    taus = tau_max * np.arange(n_steps + 1) / n_steps
    return TimeGrid(n_steps=n_steps, taus=taus)


@dataclass(frozen=True)
class SamplerConfig:
    """Noise scale, grid, and which leading steps are stochastic.

    ``sde_window`` counts denoising steps from the noise end that use the
    stochastic sampler; the final step (t=1) stays deterministic unless
    ``final_step_sde`` is set.
    """

    alpha: float
    grid: TimeGrid
    sde_window: int
    final_step_sde: bool = False

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0.0:
            raise ConfigurationError("alpha must be finite and >= 0")
        if not 0 <= self.sde_window <= self.grid.n_steps:
            raise ConfigurationError(
                f"sde_window must lie in [0, {self.grid.n_steps}]")

    def uses_sde(self, t: int) -> bool:
        """Whether the step from t to t-1 is stochastic."""
        if t < 1 or t > self.grid.n_steps:
            raise ConfigurationError(f"step index {t} outside [1, {self.grid.n_steps}]")
        if t == 1 and not self.final_step_sde:
            return False
        return t > self.grid.n_steps - self.sde_window

    def sde_steps(self) -> list[int]:
        """Stochastic step indices, descending from the noise end."""
        return [t for t in range(self.grid.n_steps, 0, -1) if self.uses_sde(t)]


@dataclass
class StepRecord:
    """Transition statistics for one denoising step.

    Stores everything needed to recompute the transition density later:
    the times, the noise variance actually used, and the realized draw.
    """

    used_sde: bool
    tau: float
    h: float
    mean: np.ndarray
    std: float
    sigma_sq: float
    noise_draw: np.ndarray | None
    velocity: np.ndarray
    log_prob: float | None


@dataclass
class Trajectory:
    """One rollout: states indexed by remaining-step count t (states[0] clean)."""

    condition: int
    states: np.ndarray
    step_records: list[StepRecord | None]
    seed: int

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    def terminal_state(self) -> np.ndarray:
        return self.states[0]


@dataclass
class VelocityModel:
    """A velocity field: architecture spec plus flat parameters."""

    spec: MlpSpec
    params: np.ndarray

    def velocity(self, state, time, condition):
        return forward(self.spec, self.params, state, time, condition)


def noise_variance(tau: float, alpha: float) -> float:
    """sigma(tau)^2 = alpha^2 * tau / (1 - tau); grows toward the noise end."""
    return alpha * alpha * tau / (1.0 - tau)


def sigma_noise(tau: float, alpha: float) -> float:
    return np.sqrt(noise_variance(tau, alpha))


def sde_mean(x, v, tau: float, h: float, sigma_sq: float):
    """Mean of the stochastic step: Euler drift plus the score-based correction.

    Works with ``v`` as ndarray or Var; ``x`` and the scalars are constants.
    """
    return x - h * (v + (sigma_sq / (2.0 * tau)) * (x + (1.0 - tau) * v))


def gaussian_log_prob(y, mean, std):
    """Log density of an isotropic Gaussian; sums over the last axis.

    ``mean`` may be a Var; ``y`` and ``std`` are constants.
    """
    d = np.asarray(y).shape[-1]
    diff = y - mean
    sq = (diff * diff).sum(axis=-1)
    std = np.asarray(std, dtype=np.float64)
    return -0.5 * sq / (std * std) - d * np.log(std) - 0.5 * d * LOG_TWO_PI


def ode_step(model: VelocityModel, x, tau: float, h: float, condition=0):
    """Deterministic Euler step toward data: x - h * v(x, tau, c)."""
    if h <= 0.0:
        raise ConfigurationError("step magnitude h must be positive")
    if tau - h < -1e-12:
        raise ConfigurationError("step would cross tau = 0")
    v = model.velocity(x, tau, condition)
    return x - h * v


def sde_step(model: VelocityModel, x, tau: float, h: float, alpha: float,
             rng: np.random.Generator | None = None, condition=0, noise=None):
    """One stochastic denoising step; returns (x_next, mean, std).

    With alpha = 0 the correction and the noise both vanish and the result
    equals :func:`ode_step` bitwise. Returning mean and std keeps the
    transition density recomputable.
    """
    if not 0.0 < tau < 1.0:
        raise ConfigurationError("stochastic steps need tau strictly inside (0, 1)")
    if h <= 0.0:
        raise ConfigurationError("step magnitude h must be positive")
    if tau - h < -1e-12:
        raise ConfigurationError("step would cross tau = 0")
    v = model.velocity(x, tau, condition)
    sigma_sq = noise_variance(tau, alpha)
    mean = sde_mean(x, v, tau, h, sigma_sq)
    std = np.sqrt(sigma_sq * h)
    if noise is None:
        if rng is None:
            raise ConfigurationError("sde_step needs an rng or an explicit noise draw")
        noise = rng.standard_normal(np.shape(mean))
    x_next = mean + std * noise
    return x_next, mean, std


def _noise_block(seed: int, n_steps: int, dim: int) -> np.ndarray:
    """Per-trajectory draws: row 0 is the initial noise, row T-t+1 feeds step t."""
    rng = np.random.default_rng(int(seed))
    return rng.standard_normal((n_steps + 1, dim))


def sample_trajectories(model: VelocityModel, conditions: Sequence[int],
                        config: SamplerConfig,
                        seeds: Sequence[int]) -> list[Trajectory]:
    """Roll out a batch of trajectories, one independent noise stream each.

    Every trajectory's draws depend only on its own seed, so results do not
    depend on batch composition. Per-step velocities are recorded so later
    ODE completions can reuse them for their first step.
    """
    conditions = np.asarray(conditions, dtype=np.int64)
    seeds = [int(s) for s in seeds]
    if conditions.shape[0] != len(seeds):
        raise ConfigurationError("need one seed per trajectory")
    n = conditions.shape[0]
    grid = config.grid
    big_t = grid.n_steps
    dim = model.spec.state_dim
    blocks = np.stack([_noise_block(s, big_t, dim) for s in seeds])
    states = np.empty((n, big_t + 1, dim))
    x = blocks[:, 0, :].copy()
    states[:, big_t] = x
    records: list[list[StepRecord | None]] = [[None] * (big_t + 1) for _ in range(n)]
    for t in range(big_t, 0, -1):
        tau = float(grid.taus[t])
        h = grid.step_size(t)
        v = forward(model.spec, model.params, x, tau, conditions)
        if config.uses_sde(t):
            sigma_sq = noise_variance(tau, config.alpha)
            mean = sde_mean(x, v, tau, h, sigma_sq)
            std = float(np.sqrt(sigma_sq * h))
            eps = blocks[:, big_t - t + 1, :]
            x_next = mean + std * eps
            logp = gaussian_log_prob(x_next, mean, std) if std > 0.0 else None
            for i in range(n):
                records[i][t] = StepRecord(
                    used_sde=True, tau=tau, h=h, mean=mean[i], std=std,
                    sigma_sq=sigma_sq, noise_draw=eps[i], velocity=v[i],
                    log_prob=float(logp[i]) if logp is not None else None)
        else:
            x_next = x - h * v
            for i in range(n):
                records[i][t] = StepRecord(
                    used_sde=False, tau=tau, h=h, mean=x_next[i], std=0.0,
                    sigma_sq=0.0, noise_draw=None, velocity=v[i], log_prob=None)
        states[:, t - 1] = x_next
        x = x_next
    if not np.all(np.isfinite(states)):
        raise NumericsError("rollout produced non-finite states")
    return [Trajectory(condition=int(conditions[i]), states=states[i],
                       step_records=records[i], seed=seeds[i])
            for i in range(n)]


def sample_trajectory(model: VelocityModel, condition: int,
                      config: SamplerConfig, seed: int) -> Trajectory:
    """Single rollout; see :func:`sample_trajectories`."""
    return sample_trajectories(model, [condition], config, [seed])[0]


def ode_complete(model: VelocityModel, x, t: int, grid: TimeGrid, condition=0):
    """Finish a state at step t deterministically: t Euler steps down to tau = 0."""
    if not 0 <= t <= grid.n_steps:
        raise ConfigurationError(f"step index {t} outside [0, {grid.n_steps}]")
    x = np.asarray(x, dtype=np.float64)
    for k in range(t, 0, -1):
        x = ode_step(model, x, float(grid.taus[k]), grid.step_size(k), condition)
    return x


def ode_complete_batch(model: VelocityModel, x: np.ndarray, t: int,
                       grid: TimeGrid, conditions,
                       first_velocity: np.ndarray | None = None) -> np.ndarray:
    """Batched :func:`ode_complete`; optionally reuses a cached first-step velocity."""
    x = np.asarray(x, dtype=np.float64)
    for k in range(t, 0, -1):
        tau = float(grid.taus[k])
        h = grid.step_size(k)
        if k == t and first_velocity is not None:
            v = first_velocity
        else:
            v = forward(model.spec, model.params, x, tau, conditions)
        x = x - h * v
    return x


def transition_mean(params, trajectory: Trajectory, t: int, spec: MlpSpec):
    """Recompute the step-t transition mean under ``params`` (ndarray or Var)."""
    rec = trajectory.step_records[t]
    v = forward(spec, params, trajectory.states[t], rec.tau, trajectory.condition)
    return sde_mean(trajectory.states[t], v, rec.tau, rec.h, rec.sigma_sq)


def transition_log_prob(model: VelocityModel, trajectory: Trajectory, t: int) -> float:
    """Log density of states[t-1] given states[t] under ``model``'s parameters.

    Only the mean depends on the parameters; the recorded std is reused
    because the noise scale is a function of (tau, alpha) alone.
    """
    rec = trajectory.step_records[t]
    if rec is None or not rec.used_sde or rec.std <= 0.0:
        raise ValueError(
            f"step {t} was deterministic; it carries no transition density")
    mean = transition_mean(model.params, trajectory, t, model.spec)
    return float(gaussian_log_prob(trajectory.states[t - 1], mean, rec.std))


def pretrain_flow(points: np.ndarray, conditions: np.ndarray, spec: MlpSpec,
                  n_iters: int, batch_size: int, learning_rate: float,
                  rng: np.random.Generator,
                  init: np.ndarray | None = None):
    """Flow-matching regression onto straight-line velocities.

    Each step draws data points, prior noise and times tau ~ U(0, 1), forms
    the interpolants (1 - tau) * data + tau * noise, and minimizes the mean
    squared error between the field and (noise - data). Returns
    (params, info) with the loss curve and held-out losses before/after.
    """
    points = np.asarray(points, dtype=np.float64)
    conditions = np.asarray(conditions, dtype=np.int64)
    if points.ndim != 2 or points.shape[1] != spec.state_dim:
        raise ConfigurationError("dataset must be (n, state_dim)")
    if points.shape[0] == 0:
        raise ConfigurationError("dataset is empty")
    missing = np.setdiff1d(np.arange(spec.n_conditions), np.unique(conditions))
    if missing.size:
        raise ConfigurationError(
            f"dataset has no points for conditions {missing.tolist()}")
    params = init_params(spec, rng) if init is None else np.array(init, dtype=np.float64)

    n = points.shape[0]
    held_idx = rng.integers(0, n, size=min(n, 256))
    held_batch = _flow_batch(points[held_idx], conditions[held_idx], rng)

    def batch_loss(pvar, batch):
        x_tau, tau, cond, target = batch
        v = forward(spec, pvar, x_tau, tau, cond)
        diff = v - target
        return (diff * diff).sum() / x_tau.shape[0]

    held_initial = backward(spec, params, lambda p: batch_loss(p, held_batch))[0]
    adam = AdamState.zeros(params.shape[0])
    curve = np.empty(n_iters)
    for it in range(n_iters):
        idx = rng.integers(0, n, size=batch_size)
        batch = _flow_batch(points[idx], conditions[idx], rng)
        loss, grad = backward(spec, params, lambda p: batch_loss(p, batch))
        params, adam = adam_step(adam, params, grad, learning_rate)
        curve[it] = loss
    held_final = backward(spec, params, lambda p: batch_loss(p, held_batch))[0]
    info = {"loss_curve": curve, "heldout_initial": held_initial,
            "heldout_final": held_final}
    return params, info


def _flow_batch(x0: np.ndarray, cond: np.ndarray, rng: np.random.Generator):
    tau = rng.uniform(0.0, 1.0, size=x0.shape[0])
    x1 = rng.standard_normal(x0.shape)
    x_tau = (1.0 - tau)[:, None] * x0 + tau[:, None] * x1
    return x_tau, tau, cond, x1 - x0


class RectifiedFlow(BaseEstimator):
    """Conditional rectified-flow generative model on R^d (d = 2 by default).

    ``fit(X, y)`` learns the velocity field from points X with integer
    condition labels y; ``sample`` integrates the deterministic sampler
    from fresh prior noise.
    """

    def __init__(self, n_conditions=1, hidden_dims=(64, 64, 64),
                 activation="tanh", n_train_steps=10, tau_max=None,
                 pretrain_iters=2000, batch_size=256, learning_rate=1e-3,
                 random_state=0):
        self.n_conditions = n_conditions
        self.hidden_dims = hidden_dims
        self.activation = activation
        self.n_train_steps = n_train_steps
        self.tau_max = tau_max
        self.pretrain_iters = pretrain_iters
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if y is None:
            y = np.zeros(X.shape[0], dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (X.shape[0],):
            raise ConfigurationError("y must hold one condition id per row of X")
        self.spec_ = velocity_spec(self.n_conditions, self.hidden_dims,
                                   self.activation, state_dim=X.shape[1])
        self.grid_ = uniform_time_grid(self.n_train_steps, self.tau_max)
        rng = np.random.default_rng(self.random_state)
        params, info = pretrain_flow(
            X, y, self.spec_, n_iters=self.pretrain_iters,
            batch_size=self.batch_size, learning_rate=self.learning_rate,
            rng=rng)
        self.params_ = params
        self.loss_curve_ = info["loss_curve"]
        self.heldout_losses_ = (info["heldout_initial"], info["heldout_final"])
        self.n_features_in_ = X.shape[1]
        return self

    def model(self) -> VelocityModel:
        check_is_fitted(self, "params_")
        return VelocityModel(self.spec_, self.params_)

    def sample(self, n_samples, condition=0, n_steps=None, random_state=None):
        """Deterministic samples: prior draws integrated down the grid."""
        check_is_fitted(self, "params_")
        grid = (self.grid_ if n_steps is None
                else uniform_time_grid(n_steps, self.tau_max))
        seed = self.random_state if random_state is None else random_state
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((n_samples, self.spec_.state_dim))
        conds = np.full(n_samples, condition, dtype=np.int64)
        return ode_complete_batch(self.model(), x, grid.n_steps, grid, conds)
