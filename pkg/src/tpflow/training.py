"""Training orchestration: rollouts, credit assignment, policy updates.

One outer iteration snapshots the sampling policy, collects N rollouts in
groups of G sharing a condition, scores every intermediate state, assigns
effective per-step rewards, normalizes them into per-timestep advantages,
and then runs Adam ascent on the clipped objective over the stochastic
steps. All randomness derives from (seed, iteration, trajectory index),
so reruns are bitwise identical and rollouts do not depend on the
credit-assignment variant.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import credit
from .config import ExperimentConfig
from .credit import (LossConfig, StepRewardTable, VARIANT_BASELINE,
                     apply_balancing, compute_advantages, grpo_objective,
                     group_tables)
from .exceptions import ConfigurationError, NumericsError
from .flow import (SamplerConfig, Trajectory, VelocityModel,
                   ode_complete_batch, pretrain_flow, sample_trajectories,
                   uniform_time_grid, velocity_spec)
from .mlp import AdamState, MlpSpec, adam_step, backward, save_checkpoint
from .rewards import (IntermediateRewards, RewardSpec,
                      evaluate_intermediate_rewards_batch, reward)

MAX_SEED = 2**63 - 1


def reward_spec_from_config(config: ExperimentConfig) -> RewardSpec:
    return RewardSpec(centers=np.asarray(config.reward.centers, dtype=np.float64),
                      bandwidth=config.reward.bandwidth,
                      kind=config.reward.kind)


def sampler_from_config(config: ExperimentConfig) -> SamplerConfig:
    grid = uniform_time_grid(config.sampler.n_steps, config.sampler.tau_max)
    return SamplerConfig(alpha=config.sampler.alpha, grid=grid,
                         sde_window=config.sampler.window,
                         final_step_sde=config.sampler.final_step_sde)


def mlp_spec_from_config(config: ExperimentConfig) -> MlpSpec:
    n_conditions = len(config.reward.centers)
    return velocity_spec(n_conditions, config.model.hidden_dims,
                         config.model.activation)


def make_pretrain_dataset(config: ExperimentConfig,
                          rng: np.random.Generator):
    """Condition-independent Gaussian blob; every condition gets points."""
    p = config.pretrain
    n_conditions = len(config.reward.centers)
    points = (np.asarray(p.data_center, dtype=np.float64)
              + p.data_std * rng.standard_normal((p.n_points, 2)))
    conditions = np.arange(p.n_points, dtype=np.int64) % n_conditions
    return points, conditions


def pretrain_from_config(config: ExperimentConfig):
    """Pretrain the base velocity field; returns (spec, params, info)."""
    spec = mlp_spec_from_config(config)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0,)))
    points, conditions = make_pretrain_dataset(config, rng)
    params, info = pretrain_flow(
        points, conditions, spec,
        n_iters=config.pretrain.iterations,
        batch_size=config.pretrain.batch_size,
        learning_rate=config.pretrain.learning_rate,
        rng=rng)
    return spec, params, info


def evaluate(spec: MlpSpec, params: np.ndarray, reward_spec: RewardSpec,
             n_steps: int, samples_per_condition: int, seed: int,
             tau_max: float | None = None):
    """Mean and std of the terminal reward over deterministic samples.

    Each condition contributes ``samples_per_condition`` fresh prior draws
    integrated down an ``n_steps`` grid. Deterministic given the seed.
    """
    grid = uniform_time_grid(n_steps, tau_max)
    model = VelocityModel(spec, params)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    all_rewards = []
    for c in range(reward_spec.n_conditions):
        x = rng.standard_normal((samples_per_condition, spec.state_dim))
        conds = np.full(samples_per_condition, c, dtype=np.int64)
        done = ode_complete_batch(model, x, grid.n_steps, grid, conds)
        all_rewards.append(reward(done, conds, reward_spec))
    pooled = np.concatenate(all_rewards)
    return float(pooled.mean()), float(pooled.std())


@dataclass
class IterationBatch:
    """Stage-1 output for one iteration: rollouts and their reward tables."""

    trajectories: list[Trajectory]
    rewards: list[IntermediateRewards]
    tables: list[StepRewardTable]
    advantages: np.ndarray
    group_slices: list[slice]
    balance_stats: dict


@dataclass
class TrainerState:
    """Mutable training-loop state: parameters, snapshots, optimizer, history."""

    params: np.ndarray
    params_ref: np.ndarray | None
    adam: AdamState
    iteration: int = 0
    metrics: list[dict] = field(default_factory=list)
    params_old: np.ndarray | None = None


def iteration_seeds(config: ExperimentConfig, iteration: int):
    """Conditions and per-trajectory seeds for one iteration.

    Derived only from (config.seed, iteration) so stage 1 is identical
    across credit-assignment variants. Returns (conditions, seeds, rng);
    the returned rng continues the stream for minibatch shuffling.
    """
    t = config.train
    n_groups = t.samples_per_iteration // t.group_size
    rng = np.random.default_rng(
        np.random.SeedSequence(config.seed, spawn_key=(1, iteration)))
    n_conditions = len(config.reward.centers)
    pool = (np.arange(n_conditions, dtype=np.int64)
            if t.condition_pool is None
            else np.asarray(t.condition_pool, dtype=np.int64))
    group_conditions = pool[rng.integers(0, pool.shape[0], size=n_groups)]
    seeds = rng.integers(0, MAX_SEED, size=t.samples_per_iteration)
    conditions = np.repeat(group_conditions, t.group_size)
    return conditions, seeds, rng


def collect_iteration_batch(model: VelocityModel, config: ExperimentConfig,
                            sampler: SamplerConfig, reward_spec: RewardSpec,
                            loss_config: LossConfig, iteration: int):
    """Stage 1: sample rollouts, score them, assign effective rewards.

    Everything here reads the sampling-time parameters only; the returned
    advantages are frozen before any optimization step runs.
    """
    t = config.train
    conditions, seeds, rng = iteration_seeds(config, iteration)
    trajectories = sample_trajectories(model, conditions, sampler, seeds)
    rewards = evaluate_intermediate_rewards_batch(
        model, trajectories, reward_spec, sampler.grid)
    steps = sampler.sde_steps()
    tables = group_tables(trajectories, rewards, loss_config,
                          candidate_steps=steps)
    n_groups = t.samples_per_iteration // t.group_size
    group_slices = [slice(g * t.group_size, (g + 1) * t.group_size)
                    for g in range(n_groups)]
    balance_on = loss_config.balance and loss_config.variant != VARIANT_BASELINE
    balance_stats = apply_balancing(
        tables, enabled=balance_on,
        group_slices=group_slices if loss_config.balance_scope == "group" else None)
    effective = np.stack([tb.effective for tb in tables])
    advantages = np.zeros_like(effective)
    for sl in group_slices:
        advantages[sl] = compute_advantages(effective[sl], steps)
    batch = IterationBatch(trajectories=trajectories, rewards=rewards,
                           tables=tables, advantages=advantages,
                           group_slices=group_slices,
                           balance_stats=balance_stats)
    return batch, rng


@dataclass
class TrainingResult:
    params: np.ndarray
    metrics: list[dict]
    state: TrainerState


def run_training(config: ExperimentConfig, base_params: np.ndarray,
                 spec: MlpSpec | None = None, out_dir=None,
                 progress=None) -> TrainingResult:
    """Fine-tune pretrained parameters; optionally stream artifacts to disk.

    Writes metrics.jsonl (one record per iteration), periodic and best-by-
    evaluation checkpoints under ``out_dir`` when given. Raises
    NumericsError and persists the failing state if the objective turns
    non-finite.
    """
    config.validate()
    spec = mlp_spec_from_config(config) if spec is None else spec
    if base_params.shape[0] != spec.param_count():
        raise ConfigurationError("base parameters do not match the model spec")
    sampler = sampler_from_config(config)
    reward_spec = reward_spec_from_config(config)
    loss_config = config.loss.to_loss_config()
    t = config.train
    if t.iterations > 0 and sampler.sde_window > 0 and sampler.alpha <= 0.0:
        raise ConfigurationError(
            "fine-tuning needs sampler.alpha > 0 to give stochastic steps a density")
    steps = sampler.sde_steps()
    if t.iterations > 0 and not steps:
        raise ConfigurationError("no stochastic steps to optimize: widen sampler.window")

    state = TrainerState(
        params=np.array(base_params, dtype=np.float64),
        params_ref=(np.array(base_params, dtype=np.float64)
                    if loss_config.kl_beta > 0.0 else None),
        adam=AdamState.zeros(base_params.shape[0]))

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "w", encoding="utf-8")
    best_eval = -np.inf

    try:
        for k in range(t.iterations):
            state.iteration = k
            state.params_old = state.params.copy()
            model_old = VelocityModel(spec, state.params_old)
            batch, rng = collect_iteration_batch(
                model_old, config, sampler, reward_spec, loss_config, k)

            objective_sum = 0.0
            kl_sum = 0.0
            ratio_hi = 1.0
            clip_frac_sum = 0.0
            n_updates = 0
            try:
                for _ in range(t.inner_epochs):
                    order = rng.permutation(len(batch.group_slices))
                    for g in order:
                        sl = batch.group_slices[g]
                        trajs = batch.trajectories[sl]
                        adv = batch.advantages[sl]

                        def closure(pvar):
                            obj, stats = grpo_objective(
                                pvar, state.params_ref, trajs, adv,
                                loss_config, spec, steps)
                            closure.stats = stats
                            return -obj

                        loss, grad = backward(spec, state.params, closure)
                        state.params, state.adam = adam_step(
                            state.adam, state.params, grad,
                            lr=t.learning_rate,
                            betas=(t.adam_beta1, t.adam_beta2),
                            eps=t.adam_eps)
                        stats = closure.stats
                        objective_sum += stats["objective"]
                        kl_sum += stats["kl"]
                        clip_frac_sum += stats["clip_fraction"]
                        ratio_hi = max(ratio_hi, stats["ratio_max"])
                        n_updates += 1
            except NumericsError:
                if out_dir is not None:
                    save_checkpoint(out_dir / "checkpoint-failed.bin", spec,
                                    state.params, config.seed,
                                    meta={"iteration": k, "status": "failed"})
                raise

            terminal = np.array([iv.terminal for iv in batch.rewards])
            flags = [f for tb in batch.tables for f in tb.flags]
            record = {
                "iteration": k,
                "mean_reward": float(terminal.mean()),
                "std_reward": float(terminal.std()),
                "objective": objective_sum / max(n_updates, 1),
                "kl": kl_sum / max(n_updates, 1),
                "clip_fraction": clip_frac_sum / max(n_updates, 1),
                "ratio_max": ratio_hi,
                "turning_points": flags.count(credit.FLAG_TURNING_POINT),
                "first_step_selected": flags.count(credit.FLAG_FIRST_STEP),
                "balance_kept_positive": batch.balance_stats["kept_positive"],
                "balance_kept_negative": batch.balance_stats["kept_negative"],
                "balance_dropped": batch.balance_stats["dropped"],
            }
            if t.eval_every > 0 and (k % t.eval_every == 0 or k == t.iterations - 1):
                mean_r, std_r = evaluate(
                    spec, state.params, reward_spec,
                    config.eval.n_steps, config.eval.samples_per_condition,
                    config.seed, config.sampler.tau_max)
                record["eval_reward"] = mean_r
                record["eval_std"] = std_r
                if out_dir is not None and mean_r > best_eval:
                    best_eval = mean_r
                    save_checkpoint(out_dir / "checkpoint-best.bin", spec,
                                    state.params, config.seed,
                                    meta={"iteration": k, "eval_reward": mean_r})
            state.metrics.append(record)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
                metrics_fh.flush()
            if out_dir is not None and t.checkpoint_every > 0 \
                    and (k + 1) % t.checkpoint_every == 0:
                save_checkpoint(out_dir / f"checkpoint-{k + 1:05d}.bin", spec,
                                state.params, config.seed, meta={"iteration": k})
            if progress is not None:
                progress(record)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint-final.bin", spec, state.params,
                        config.seed, meta={"iterations": t.iterations})
    return TrainingResult(params=state.params, metrics=state.metrics, state=state)


def trace_trajectories(spec: MlpSpec, params: np.ndarray,
                       config: ExperimentConfig, n: int, out_dir,
                       loss_config: LossConfig | None = None):
    """Emit n rollouts with full step-reward tables as JSONL + CSV.

    The CSV holds one row per (trajectory, step) with the completion
    reward, increment, trend sign, flag and effective reward; re-running
    the detector on the value column reproduces the flags.
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sampler = sampler_from_config(config)
    reward_spec = reward_spec_from_config(config)
    loss_config = config.loss.to_loss_config() if loss_config is None else loss_config
    model = VelocityModel(spec, params)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(3,)))
    jsonl_path = out_dir / "trace.jsonl"
    csv_path = out_dir / "trace.csv"
    if n > 0:
        n_conditions = len(config.reward.centers)
        conditions = rng.integers(0, n_conditions, size=n)
        seeds = rng.integers(0, MAX_SEED, size=n)
        trajectories = sample_trajectories(model, conditions, sampler, seeds)
        rewards = evaluate_intermediate_rewards_batch(
            model, trajectories, reward_spec, sampler.grid)
        tables = group_tables(trajectories, rewards, loss_config,
                              candidate_steps=sampler.sde_steps())
    else:
        trajectories, tables = [], []

    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for i, (traj, table) in enumerate(zip(trajectories, tables)):
            rec = {
                "index": i,
                "condition": traj.condition,
                "seed": traj.seed,
                "states": traj.states.tolist(),
                "used_sde": [bool(r.used_sde) if r is not None else None
                             for r in traj.step_records],
                "rewards": table.values.tolist(),
                "increments": table.increments.tolist(),
                "signs": table.signs.tolist(),
                "flags": table.flags,
                "effective": table.effective.tolist(),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trajectory", "t", "value", "increment", "sign",
                         "flag", "effective"])
        for i, table in enumerate(tables):
            for t_step in range(table.n_steps, -1, -1):
                if t_step == 0:
                    writer.writerow([i, 0, repr(float(table.values[0])),
                                     "", "", "", ""])
                else:
                    writer.writerow([
                        i, t_step, repr(float(table.values[t_step])),
                        repr(float(table.increments[t_step])),
                        int(table.signs[t_step]), table.flags[t_step],
                        repr(float(table.effective[t_step]))])
    return jsonl_path, csv_path


class TurningPointGRPO(BaseEstimator):
    """Fine-tunes a fitted RectifiedFlow against a mode-seeking reward.

    ``fit(X)`` runs the two-stage loop; X may be None (train on every
    condition) or an array of condition ids to sample from. The tuned
    parameters land in ``params_`` and per-iteration metrics in
    ``history_``.
    """

    def __init__(self, flow=None, variant="tp_unconstrained", iterations=300,
                 samples_per_iteration=96, group_size=24, learning_rate=1e-3,
                 inner_epochs=1, clip_eps=0.2, kl_beta=0.0, alpha=0.7,
                 window=10, final_step_sde=False, balance=True,
                 first_step_rule=True, reward_kind="gaussian-bump",
                 reward_centers=((2.0, 2.0), (-2.0, 2.0), (-2.0, -2.0), (2.0, -2.0)),
                 reward_bandwidth=1.0, eval_steps=40,
                 eval_samples_per_condition=256, random_state=0):
        self.flow = flow
        self.variant = variant
        self.iterations = iterations
        self.samples_per_iteration = samples_per_iteration
        self.group_size = group_size
        self.learning_rate = learning_rate
        self.inner_epochs = inner_epochs
        self.clip_eps = clip_eps
        self.kl_beta = kl_beta
        self.alpha = alpha
        self.window = window
        self.final_step_sde = final_step_sde
        self.balance = balance
        self.first_step_rule = first_step_rule
        self.reward_kind = reward_kind
        self.reward_centers = reward_centers
        self.reward_bandwidth = reward_bandwidth
        self.eval_steps = eval_steps
        self.eval_samples_per_condition = eval_samples_per_condition
        self.random_state = random_state

    def _config(self, condition_pool=None) -> ExperimentConfig:
        from .config import (EvalSettings, LossSettings, ModelSettings,
                             RewardSettings, SamplerSettings, TrainSettings)
        flow = self.flow
        return ExperimentConfig(
            model=ModelSettings(hidden_dims=tuple(flow.hidden_dims),
                                activation=flow.activation),
            sampler=SamplerSettings(n_steps=flow.n_train_steps,
                                    tau_max=flow.tau_max, alpha=self.alpha,
                                    window=self.window,
                                    final_step_sde=self.final_step_sde),
            reward=RewardSettings(kind=self.reward_kind,
                                  centers=tuple(tuple(c) for c in self.reward_centers),
                                  bandwidth=self.reward_bandwidth),
            loss=LossSettings(clip_eps=self.clip_eps, kl_beta=self.kl_beta,
                              variant=self.variant, balance=self.balance,
                              first_step_rule=self.first_step_rule),
            train=TrainSettings(iterations=self.iterations,
                                samples_per_iteration=self.samples_per_iteration,
                                group_size=self.group_size,
                                inner_epochs=self.inner_epochs,
                                learning_rate=self.learning_rate,
                                condition_pool=condition_pool),
            eval=EvalSettings(n_steps=self.eval_steps,
                              samples_per_condition=self.eval_samples_per_condition),
            seed=self.random_state,
        )

    def fit(self, X=None, y=None):
        if self.flow is None:
            raise ConfigurationError("TurningPointGRPO needs a fitted RectifiedFlow")
        check_is_fitted(self.flow, "params_")
        n_conditions = len(self.reward_centers)
        if self.flow.n_conditions != n_conditions:
            raise ConfigurationError(
                "flow.n_conditions must match the number of reward centers")
        pool = None
        if X is not None:
            pool = tuple(int(c) for c in np.asarray(X).ravel())
        config = self._config(condition_pool=pool)
        result = run_training(config, self.flow.params_, spec=self.flow.spec_)
        self.params_ = result.params
        self.history_ = result.metrics
        self.spec_ = self.flow.spec_
        return self

    def sample(self, n_samples, condition=0, n_steps=None, random_state=None):
        """Deterministic samples from the fine-tuned field."""
        check_is_fitted(self, "params_")
        n_steps = self.eval_steps if n_steps is None else n_steps
        grid = uniform_time_grid(n_steps, self.flow.tau_max)
        seed = self.random_state if random_state is None else random_state
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((n_samples, self.spec_.state_dim))
        conds = np.full(n_samples, condition, dtype=np.int64)
        model = VelocityModel(self.spec_, self.params_)
        return ode_complete_batch(model, x, grid.n_steps, grid, conds)
