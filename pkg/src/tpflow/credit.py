"""Step-level credit assignment and the clipped group-relative objective.

Works on per-step completion rewards values[t] (t = T..0, values[0]
terminal). Increments isolate one stochastic step's effect; steps that
flip the local trend back in line with the whole trajectory get the
aggregated reward values[0] - values[t] instead, optionally balanced per
batch so positive and negative replacements come in equal numbers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Var, clip, minimum, scalar_value, value_of
from .exceptions import ConfigurationError, NumericsError
from .flow import Trajectory, gaussian_log_prob, sde_mean
from .mlp import MlpSpec, forward

VARIANT_BASELINE = "baseline_terminal"
VARIANT_TP = "tp_unconstrained"
VARIANT_TP_CONSTRAINED = "tp_constrained"
VARIANTS = (VARIANT_BASELINE, VARIANT_TP, VARIANT_TP_CONSTRAINED)
TP_VARIANTS = (VARIANT_TP, VARIANT_TP_CONSTRAINED)

FLAG_NONE = "none"
FLAG_TURNING_POINT = "turning_point"
FLAG_FIRST_STEP = "first_step_selected"

ADVANTAGE_STD_FLOOR = 1e-8


@dataclass(frozen=True)
class LossConfig:
    """Clip range, KL weight, credit-assignment variant and its switches."""

    clip_eps: float = 0.2
    kl_beta: float = 0.0
    variant: str = VARIANT_TP
    balance: bool = True
    balance_scope: str = "batch"
    first_step_rule: bool = True

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigurationError("clip_eps must lie in (0, 1)")
        if self.kl_beta < 0.0:
            raise ConfigurationError("kl_beta must be >= 0")
        if self.variant not in VARIANTS:
            raise ConfigurationError(
                f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.balance_scope not in ("batch", "group"):
            raise ConfigurationError("balance_scope must be 'batch' or 'group'")


def step_increments(values: np.ndarray) -> np.ndarray:
    """r[t] = values[t-1] - values[t] for t = T..1; index 0 unused (zero)."""
    values = np.asarray(values, dtype=np.float64)
    r = np.zeros_like(values)
    r[1:] = values[:-1] - values[1:]
    return r


def overall_trend(values: np.ndarray) -> float:
    """Sign of the whole-trajectory reward change, values[0] - values[T]."""
    return float(np.sign(values[0] - values[-1]))


def trend_signs(values: np.ndarray) -> np.ndarray:
    """s[t] = sign(values[t-1] - values[t]) * sign(values[0] - values[T]).

    Ties give sign 0, which fails every strict comparison downstream.
    Index 0 is unused (zero).
    """
    values = np.asarray(values, dtype=np.float64)
    s = np.zeros_like(values)
    s[1:] = np.sign(values[:-1] - values[1:]) * overall_trend(values)
    return s


def detect_turning_points(values: np.ndarray, variant: str) -> list[int]:
    """Steps where the local trend flips into agreement with the overall trend.

    Both variants require s[t+1] < 0 and s[t] > 0 with 1 <= t <= T-1. The
    third condition compares the local change's sign against the remaining
    change measured from the pre-step completion (unconstrained) or from
    the post-step completion (constrained); the constrained set is always
    a subset of the unconstrained one.
    """
    if variant not in TP_VARIANTS:
        raise ConfigurationError(
            f"turning-point detection needs one of {TP_VARIANTS}, got {variant!r}")
    values = np.asarray(values, dtype=np.float64)
    s = trend_signs(values)
    big_t = values.shape[0] - 1
    found = []
    for t in range(1, big_t):
        if not (s[t + 1] < 0.0 and s[t] > 0.0):
            continue
        local = np.sign(values[t - 1] - values[t])
        if variant == VARIANT_TP:
            remaining = np.sign(values[0] - values[t])
        else:
            remaining = np.sign(values[0] - values[t - 1])
        if local * remaining > 0.0:
            found.append(t)
    return found


def select_first_step(values: np.ndarray) -> bool:
    """Whether the first denoising step (t = T) earns the aggregated reward.

    True iff its local change strictly agrees in sign with the overall
    trajectory change.
    """
    values = np.asarray(values, dtype=np.float64)
    local = np.sign(values[-2] - values[-1])
    return bool(local * overall_trend(values) > 0.0)


def aggregated_reward(values: np.ndarray, t: int) -> float:
    """Reward change from the step's pre-state completion to the final sample."""
    if not 1 <= t <= values.shape[0] - 1:
        raise ConfigurationError("aggregated reward needs 1 <= t <= T")
    return float(values[0] - values[t])


@dataclass
class StepRewardTable:
    """Per-step rewards for one trajectory, after credit assignment.

    ``effective[t]`` is what the advantage computation consumes: the local
    increment, the aggregated reward at flagged steps, or the terminal
    reward everywhere under the baseline variant.
    """

    values: np.ndarray
    increments: np.ndarray
    signs: np.ndarray
    trend: float
    flags: list[str]
    effective: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.values.shape[0] - 1


def build_step_reward_table(values: np.ndarray, variant: str,
                            first_step_rule: bool = True,
                            candidate_steps: Iterable[int] | None = None
                            ) -> StepRewardTable:
    """Assign per-step effective rewards for one trajectory.

    ``candidate_steps`` restricts which steps may receive the aggregated
    reward (the trainer passes the optimized stochastic steps); detection
    itself is a pure function of the values.
    """
    values = np.asarray(values, dtype=np.float64)
    big_t = values.shape[0] - 1
    increments = step_increments(values)
    signs = trend_signs(values)
    trend = overall_trend(values)
    flags = [FLAG_NONE] * (big_t + 1)
    if variant == VARIANT_BASELINE:
        effective = np.full(big_t + 1, values[0])
        effective[0] = 0.0
        return StepRewardTable(values=values, increments=increments,
                               signs=signs, trend=trend, flags=flags,
                               effective=effective)
    allowed = set(range(1, big_t + 1)) if candidate_steps is None \
        else set(int(t) for t in candidate_steps)
    effective = increments.copy()
    for t in detect_turning_points(values, variant):
        if t in allowed:
            flags[t] = FLAG_TURNING_POINT
            effective[t] = aggregated_reward(values, t)
    if first_step_rule and big_t in allowed and select_first_step(values):
        flags[big_t] = FLAG_FIRST_STEP
        effective[big_t] = aggregated_reward(values, big_t)
    return StepRewardTable(values=values, increments=increments, signs=signs,
                           trend=trend, flags=flags, effective=effective)


@dataclass(frozen=True)
class Candidate:
    """One aggregated-reward replacement: which trajectory, which step."""

    trajectory: int
    t: int
    r_agg: float


def balance_replacements(candidates: Sequence[Candidate],
                         enabled: bool = True):
    """Keep equally many positive and negative replacements, largest first.

    With m = min(#positive, #negative), the m largest |r_agg| of each sign
    survive; the rest are dropped (their steps revert to the local
    increment). Disabled balancing keeps everything. Returns
    (kept, dropped).
    """
    if not enabled:
        return list(candidates), []
    pos = [c for c in candidates if c.r_agg > 0.0]
    neg = [c for c in candidates if c.r_agg < 0.0]
    keep = min(len(pos), len(neg))

    def rank(group):
        return sorted(group, key=lambda c: (-abs(c.r_agg), c.trajectory, c.t))

    kept, dropped = [], []
    for group in (pos, neg):
        ranked = rank(group)
        kept.extend(ranked[:keep])
        dropped.extend(ranked[keep:])
    return kept, dropped


def apply_balancing(tables: Sequence[StepRewardTable], enabled: bool,
                    group_slices: Sequence[slice] | None = None) -> dict:
    """Balance replacements across tables, reverting dropped ones in place.

    ``group_slices`` switches the pooling scope from the whole batch to
    per-group. Reverted steps get their flag cleared and their effective
    reward reset to the local increment. Returns counting stats.
    """
    scopes = [slice(0, len(tables))] if group_slices is None else list(group_slices)
    kept_pos = kept_neg = dropped_n = 0
    for scope in scopes:
        offset = scope.start or 0
        pool = []
        for i, table in enumerate(tables[scope], start=offset):
            for t in range(1, table.n_steps + 1):
                if table.flags[t] != FLAG_NONE:
                    pool.append(Candidate(trajectory=i, t=t,
                                          r_agg=float(table.effective[t])))
        kept, dropped = balance_replacements(pool, enabled=enabled)
        for c in dropped:
            table = tables[c.trajectory]
            table.flags[c.t] = FLAG_NONE
            table.effective[c.t] = table.increments[c.t]
        kept_pos += sum(1 for c in kept if c.r_agg > 0.0)
        kept_neg += sum(1 for c in kept if c.r_agg < 0.0)
        dropped_n += len(dropped)
    return {"kept_positive": kept_pos, "kept_negative": kept_neg,
            "dropped": dropped_n}


def compute_advantages(effective: np.ndarray,
                       steps: Iterable[int] | None = None) -> np.ndarray:
    """Per-timestep group normalization of effective rewards.

    ``effective`` is (G, T+1), column t aligned with step t. For each
    selected step the column is centered and divided by its population
    std plus a small floor, so an all-equal column yields exact zeros.
    Columns outside ``steps`` stay zero.
    """
    effective = np.asarray(effective, dtype=np.float64)
    if effective.ndim != 2 or effective.shape[0] < 2:
        raise ConfigurationError("advantages need a (G, T+1) array with G >= 2")
    big_t = effective.shape[1] - 1
    steps = range(1, big_t + 1) if steps is None else list(steps)
    adv = np.zeros_like(effective)
    for t in steps:
        col = effective[:, t]
        centered = col - col.mean()
        adv[:, t] = centered / (col.std() + ADVANTAGE_STD_FLOOR)
    return adv


def group_tables(trajectories: Sequence[Trajectory],
                 rewards: Sequence, loss_config: LossConfig,
                 candidate_steps: Iterable[int] | None = None
                 ) -> list[StepRewardTable]:
    """Build one step-reward table per trajectory."""
    return [build_step_reward_table(iv.values, loss_config.variant,
                                    loss_config.first_step_rule,
                                    candidate_steps)
            for _, iv in zip(trajectories, rewards)]


def grpo_objective(params, ref_params, trajectories: Sequence[Trajectory],
                   advantages: np.ndarray, loss_config: LossConfig,
                   spec: MlpSpec, steps: Iterable[int] | None = None):
    """Clipped surrogate with per-step Gaussian KL; returns (objective, stats).

    Averages min(ratio * A, clip(ratio) * A) - beta * KL over every
    (trajectory, stochastic step) pair, where the ratio compares the
    current transition density against the rollout-time one and the KL is
    the closed form ||mean - mean_ref||^2 / (2 std^2) for equal stds.
    ``params`` may be a Var, in which case the result carries gradients.
    """
    rows = []
    for i, traj in enumerate(trajectories):
        for t in (steps if steps is not None else range(1, traj.n_steps + 1)):
            rec = traj.step_records[t]
            if rec is None or not rec.used_sde:
                if steps is not None:
                    raise ConfigurationError(
                        f"step {t} of trajectory {i} was deterministic; "
                        "only stochastic steps can be optimized")
                continue
            if rec.std <= 0.0:
                raise ConfigurationError(
                    f"step {t} of trajectory {i} has zero transition noise")
            rows.append((i, t))
    if not rows:
        raise ConfigurationError("no stochastic steps to optimize")

    x = np.stack([trajectories[i].states[t] for i, t in rows])
    y = np.stack([trajectories[i].states[t - 1] for i, t in rows])
    taus = np.array([trajectories[i].step_records[t].tau for i, t in rows])
    hs = np.array([trajectories[i].step_records[t].h for i, t in rows])
    sig2 = np.array([trajectories[i].step_records[t].sigma_sq for i, t in rows])
    stds = np.array([trajectories[i].step_records[t].std for i, t in rows])
    old_logp = np.array([trajectories[i].step_records[t].log_prob for i, t in rows])
    conds = np.array([trajectories[i].condition for i, t in rows], dtype=np.int64)
    adv = np.array([advantages[i, t] for i, t in rows])

    v = forward(spec, params, x, taus, conds)
    mean = sde_mean(x, v, taus[:, None], hs[:, None], sig2[:, None])
    logp = gaussian_log_prob(y, mean, stds)
    ratio = (logp - old_logp).exp() if isinstance(logp, Var) \
        else np.exp(logp - old_logp)
    ratio_values = value_of(ratio)
    if not np.all(np.isfinite(ratio_values)):
        bad = int(np.flatnonzero(~np.isfinite(ratio_values))[0])
        i, t = rows[bad]
        raise NumericsError(
            f"non-finite probability ratio at trajectory {i}, step {t}")
    clipped = clip(ratio, 1.0 - loss_config.clip_eps, 1.0 + loss_config.clip_eps)
    surrogate = minimum(ratio * adv, clipped * adv)

    kl_value = 0.0
    if loss_config.kl_beta > 0.0:
        if ref_params is None:
            raise ConfigurationError("kl_beta > 0 requires reference parameters")
        v_ref = forward(spec, np.asarray(ref_params, dtype=np.float64),
                        x, taus, conds)
        mean_ref = sde_mean(x, v_ref, taus[:, None], hs[:, None], sig2[:, None])
        diff = mean - mean_ref
        kl = (diff * diff).sum(axis=-1) / (2.0 * stds * stds)
        objective = (surrogate - loss_config.kl_beta * kl).mean()
        kl_value = float(value_of(kl).mean())
    else:
        objective = surrogate.mean() if isinstance(surrogate, Var) \
            else np.mean(surrogate)

    stats = {
        "n_terms": len(rows),
        "ratio_mean": float(ratio_values.mean()),
        "ratio_max": float(ratio_values.max()),
        "clip_fraction": float(np.mean(
            (ratio_values < 1.0 - loss_config.clip_eps)
            | (ratio_values > 1.0 + loss_config.clip_eps))),
        "kl": kl_value,
        "objective": scalar_value(objective),
    }
    return objective, stats


@dataclass
class LemmaSuiteResult:
    """Counts from the randomized sign-consistency suite."""

    n_sequences: int
    n_unconstrained: int = 0
    n_constrained: int = 0
    sign_violations: int = 0
    magnitude_violations: int = 0
    subset_violations: int = 0
    first_step_selected: int = 0

    @property
    def passed(self) -> bool:
        return (self.sign_violations == 0 and self.magnitude_violations == 0
                and self.subset_violations == 0)


def run_lemma_suite(n_sequences: int = 10000, n_steps: int = 10,
                    seed: int = 0) -> LemmaSuiteResult:
    """Randomized check of the detector guarantees.

    For i.i.d. uniform reward sequences without ties: every unconstrained
    turning point has r * r_agg > 0; every constrained one additionally
    has |r_agg| > |r|; and the constrained set is a subset of the
    unconstrained set.
    """
    rng = np.random.default_rng(seed)
    out = LemmaSuiteResult(n_sequences=n_sequences)
    for _ in range(n_sequences):
        values = rng.uniform(0.0, 1.0, size=n_steps + 1)
        while np.unique(values).size < values.size:  # ties have measure zero
            values = rng.uniform(0.0, 1.0, size=n_steps + 1)
        r = step_increments(values)
        unconstrained = detect_turning_points(values, VARIANT_TP)
        constrained = detect_turning_points(values, VARIANT_TP_CONSTRAINED)
        out.n_unconstrained += len(unconstrained)
        out.n_constrained += len(constrained)
        if select_first_step(values):
            out.first_step_selected += 1
        for t in unconstrained:
            if not r[t] * aggregated_reward(values, t) > 0.0:
                out.sign_violations += 1
        for t in constrained:
            agg = aggregated_reward(values, t)
            if not r[t] * agg > 0.0:
                out.sign_violations += 1
            if not abs(agg) > abs(r[t]):
                out.magnitude_violations += 1
        if not set(constrained) <= set(unconstrained):
            out.subset_violations += 1
    return out
