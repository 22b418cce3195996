"""Desk-scale rectified-flow lab with turning-point-aware GRPO fine-tuning."""

from .autodiff import Var, clip, minimum
from .config import (EvalSettings, ExperimentConfig, LossSettings,
                     ModelSettings, PretrainSettings, RewardSettings,
                     SamplerSettings, TrainSettings, apply_overrides,
                     config_from_dict, config_to_dict, load_config,
                     save_config)
from .credit import (Candidate, LossConfig, StepRewardTable,
                     VARIANT_BASELINE, VARIANT_TP, VARIANT_TP_CONSTRAINED,
                     aggregated_reward, apply_balancing, balance_replacements,
                     build_step_reward_table, compute_advantages,
                     detect_turning_points, grpo_objective, run_lemma_suite,
                     select_first_step, step_increments, trend_signs)
from .exceptions import ConfigurationError, NumericsError, TpflowError
from .flow import (RectifiedFlow, SamplerConfig, StepRecord, TimeGrid,
                   Trajectory, VelocityModel, ode_complete, ode_step,
                   pretrain_flow, sample_trajectories, sample_trajectory,
                   sde_step, transition_log_prob, uniform_time_grid)
from .mlp import (AdamState, MlpSpec, adam_step, backward, forward,
                  init_params, load_checkpoint, save_checkpoint,
                  velocity_spec)
from .rewards import (IntermediateRewards, RewardSpec, default_reward_spec,
                      evaluate_intermediate_rewards,
                      evaluate_intermediate_rewards_batch, reward)
from .training import (TrainingResult, TurningPointGRPO, evaluate,
                       pretrain_from_config, run_training, trace_trajectories)

__version__ = "0.1.0"
