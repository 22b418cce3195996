"""Toy rewards on 2-D samples and per-step reward evaluation for rollouts.

Each condition id owns one mode center. The bounded "gaussian-bump" kind
peaks at 1 on the center; "neg-sq-distance" is its unbounded counterpart.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import ConfigurationError
from .flow import TimeGrid, Trajectory, VelocityModel, ode_complete_batch

REWARD_KINDS = ("gaussian-bump", "neg-sq-distance")


@dataclass(frozen=True)
class RewardSpec:
    """Mode centers (one per condition), bandwidth, and functional form."""

    centers: np.ndarray
    bandwidth: float = 1.0
    kind: str = "gaussian-bump"

    def __post_init__(self):
        centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        object.__setattr__(self, "centers", centers)
        if centers.shape[0] < 1:
            raise ConfigurationError("need at least one mode center")
        if self.bandwidth <= 0.0:
            raise ConfigurationError("bandwidth must be positive")
        if self.kind not in REWARD_KINDS:
            raise ConfigurationError(
                f"unknown reward kind {self.kind!r}; expected one of {REWARD_KINDS}")
        for i in range(centers.shape[0]):
            for j in range(i + 1, centers.shape[0]):
                if np.array_equal(centers[i], centers[j]):
                    raise ConfigurationError("mode centers must be pairwise distinct")

    @property
    def n_conditions(self) -> int:
        return self.centers.shape[0]


def default_reward_spec() -> RewardSpec:
    """Four bumps at (+-2, +-2) with unit bandwidth."""
    centers = np.array([[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]])
    return RewardSpec(centers=centers, bandwidth=1.0, kind="gaussian-bump")


def reward(x, condition, spec: RewardSpec):
    """Reward of point(s) x under the given condition's mode.

    gaussian-bump: exp(-||x - mu||^2 / (2 s^2)), in (0, 1];
    neg-sq-distance: -||x - mu||^2. Vectorized over rows of x.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    cond = np.broadcast_to(np.asarray(condition, dtype=np.int64), (x.shape[0],))
    if np.any(cond < 0) or np.any(cond >= spec.n_conditions):
        raise ConfigurationError(
            f"condition ids must lie in [0, {spec.n_conditions})")
    diff = x - spec.centers[cond]
    sq = np.einsum("ij,ij->i", diff, diff)
    if spec.kind == "gaussian-bump":
        out = np.exp(-sq / (2.0 * spec.bandwidth ** 2))
    else:
        out = -sq
    return float(out[0]) if single else out


@dataclass
class IntermediateRewards:
    """values[t] = reward of the deterministic completion of states[t].

    values[0] is the raw rollout's terminal reward (zero completion steps).
    """

    values: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.values.shape[0] - 1

    @property
    def terminal(self) -> float:
        return float(self.values[0])


def _pure_ode_suffix(trajectory: Trajectory) -> int:
    """Largest L such that steps L..1 were all deterministic (0 if none)."""
    suffix = 0
    for t in range(1, trajectory.n_steps + 1):
        if trajectory.step_records[t].used_sde:
            break
        suffix = t
    return suffix


def evaluate_intermediate_rewards_batch(
        model: VelocityModel, trajectories: Sequence[Trajectory],
        reward_spec: RewardSpec, grid: TimeGrid) -> list[IntermediateRewards]:
    """Per-step completion rewards for a batch of rollouts.

    For step indices whose remaining steps were all deterministic, the
    completion coincides with the rollout's own tail, so the terminal
    reward is reused without re-integrating. Elsewhere the completion's
    first Euler step reuses the recorded rollout velocity, costing t - 1
    fresh field evaluations per completed step.
    """
    n = len(trajectories)
    if n == 0:
        return []
    big_t = grid.n_steps
    conds = np.array([tr.condition for tr in trajectories], dtype=np.int64)
    values = np.empty((n, big_t + 1))
    values[:, 0] = reward(np.stack([tr.states[0] for tr in trajectories]),
                          conds, reward_spec)
    suffix = np.array([_pure_ode_suffix(tr) for tr in trajectories])
    for t in range(1, big_t + 1):
        needs = np.flatnonzero(suffix < t)
        reuse = np.flatnonzero(suffix >= t)
        if reuse.size:
            values[reuse, t] = values[reuse, 0]
        if needs.size:
            x = np.stack([trajectories[i].states[t] for i in needs])
            v0 = np.stack([trajectories[i].step_records[t].velocity for i in needs])
            done = ode_complete_batch(model, x, t, grid, conds[needs],
                                      first_velocity=v0)
            values[needs, t] = reward(done, conds[needs], reward_spec)
    return [IntermediateRewards(values=values[i].copy()) for i in range(n)]


def evaluate_intermediate_rewards(model: VelocityModel, trajectory: Trajectory,
                                  reward_spec: RewardSpec,
                                  grid: TimeGrid) -> IntermediateRewards:
    """Single-trajectory form of :func:`evaluate_intermediate_rewards_batch`."""
    return evaluate_intermediate_rewards_batch(
        model, [trajectory], reward_spec, grid)[0]
