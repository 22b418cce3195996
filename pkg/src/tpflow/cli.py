"""Command-line entry point: pretrain, train, eval, trace, plot, lemma-suite.

Exit codes: 0 success, 1 runtime failure (an error record is written),
2 bad configuration or refusal to overwrite existing artifacts.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import (ExperimentConfig, apply_overrides, load_config,
                     save_config)
from .credit import run_lemma_suite
from .exceptions import ConfigurationError, TpflowError
from .mlp import load_checkpoint, save_checkpoint
from .svgplot import render_curves
from .training import (evaluate, pretrain_from_config,
                       reward_spec_from_config, run_training,
                       trace_trajectories)

VARIANT_NAMES = {
    "flow-grpo": "baseline_terminal",
    "tp": "tp_unconstrained",
    "tp-constrained": "tp_constrained",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tpflow",
        description="Desk-scale rectified-flow lab with turning-point-aware "
                    "group-relative fine-tuning.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_out=True):
        p.add_argument("--config", type=Path, default=None,
                       help="JSON experiment config (defaults used if omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="dotted config override, e.g. train.learning_rate=0.01")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        if needs_out:
            p.add_argument("--out", type=Path, required=True,
                           help="output directory for artifacts")
            p.add_argument("--overwrite", action="store_true",
                           help="replace existing artifacts in --out")

    p = sub.add_parser("pretrain", help="train the base velocity field")
    add_common(p)

    p = sub.add_parser("train", help="fine-tune with group-relative updates")
    add_common(p)
    p.add_argument("--variant", choices=sorted(VARIANT_NAMES), default=None,
                   help="credit-assignment variant")
    p.add_argument("--base", type=Path, default=None,
                   help="pretrained checkpoint (pretrains on the fly if omitted)")
    p.add_argument("--no-kl", action="store_true",
                   help="drop the KL penalty (sets loss.kl_beta = 0)")
    p.add_argument("--window", type=int, default=None,
                   help="stochastic-step window size")
    p.add_argument("--alpha", type=float, default=None, help="noise scale")

    p = sub.add_parser("eval", help="mean terminal reward of a checkpoint")
    add_common(p, needs_out=False)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("trace", help="emit rollouts with step-reward tables")
    add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--n", type=int, default=8, help="number of trajectories")

    p = sub.add_parser("plot", help="render metrics JSONL to SVG")
    p.add_argument("--metrics", type=Path, nargs="+", required=True,
                   help="one or more metrics.jsonl files")
    p.add_argument("--labels", nargs="*", default=None,
                   help="legend labels, one per metrics file")
    p.add_argument("--field", default="eval_reward",
                   help="metric field to plot (default eval_reward)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("lemma-suite",
                       help="randomized detector guarantees, standalone")
    p.add_argument("--n", type=int, default=10000, help="number of sequences")
    p.add_argument("--steps", type=int, default=10, help="steps per sequence")
    p.add_argument("--seed", type=int, default=0)
    return parser


def resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    overrides = list(getattr(args, "overrides", []))
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "variant", None) is not None:
        overrides.append(f"loss.variant={VARIANT_NAMES[args.variant]}")
    if getattr(args, "no_kl", False):
        overrides.append("loss.kl_beta=0")
    if getattr(args, "window", None) is not None:
        overrides.append(f"sampler.window={args.window}")
    if getattr(args, "alpha", None) is not None:
        overrides.append(f"sampler.alpha={args.alpha}")
    if overrides:
        config = apply_overrides(config, overrides)
    return config.validate()


def prepare_out_dir(out: Path, artifacts, overwrite: bool) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    if not overwrite:
        for name in artifacts:
            matches = sorted(out.glob(name))
            if matches:
                raise ConfigurationError(
                    f"refusing to overwrite {matches[0]} (pass --overwrite)")
    else:
        for name in artifacts:
            for path in out.glob(name):
                path.unlink()
    return out


def cmd_pretrain(args) -> int:
    config = resolve_config(args)
    out = prepare_out_dir(args.out, ["checkpoint-base.bin", "pretrain-info.json",
                                     "config-resolved.json"], args.overwrite)
    save_config(config, out / "config-resolved.json")
    spec, params, info = pretrain_from_config(config)
    save_checkpoint(out / "checkpoint-base.bin", spec, params, config.seed,
                    meta={"stage": "pretrain"})
    with open(out / "pretrain-info.json", "w", encoding="utf-8") as fh:
        json.dump({"heldout_initial": info["heldout_initial"],
                   "heldout_final": info["heldout_final"],
                   "final_loss": float(info["loss_curve"][-1])
                   if len(info["loss_curve"]) else None},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {out / 'checkpoint-base.bin'} "
          f"(held-out loss {info['heldout_initial']:.4f} -> "
          f"{info['heldout_final']:.4f})")
    return 0


def cmd_train(args) -> int:
    config = resolve_config(args)
    out = prepare_out_dir(args.out, ["metrics.jsonl", "checkpoint-*.bin",
                                     "config-resolved.json"], args.overwrite)
    save_config(config, out / "config-resolved.json")
    if args.base is not None:
        spec, params, _ = load_checkpoint(args.base)
        expected = len(config.reward.centers)
        if spec.n_conditions != expected:
            raise ConfigurationError(
                f"checkpoint was built for {spec.n_conditions} conditions, "
                f"config has {expected}")
    else:
        spec, params, _ = pretrain_from_config(config)
        save_checkpoint(out / "checkpoint-base.bin", spec, params, config.seed,
                        meta={"stage": "pretrain"})
    result = run_training(config, params, spec=spec, out_dir=out)
    final = result.metrics[-1] if result.metrics else {}
    print(f"finished {config.train.iterations} iterations; "
          f"final mean rollout reward "
          f"{final.get('mean_reward', float('nan')):.4f}, "
          f"eval reward {final.get('eval_reward', float('nan')):.4f}")
    print(f"artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    config = resolve_config(args)
    spec, params, _ = load_checkpoint(args.checkpoint)
    reward_spec = reward_spec_from_config(config)
    if spec.n_conditions != reward_spec.n_conditions:
        raise ConfigurationError(
            f"checkpoint was built for {spec.n_conditions} conditions, "
            f"config has {reward_spec.n_conditions}")
    mean_r, std_r = evaluate(spec, params, reward_spec, config.eval.n_steps,
                             config.eval.samples_per_condition, config.seed,
                             config.sampler.tau_max)
    print(f"mean reward {mean_r:.6f} +- {std_r:.6f} "
          f"({config.eval.samples_per_condition} samples/condition, "
          f"T={config.eval.n_steps})")
    return 0


def cmd_trace(args) -> int:
    config = resolve_config(args)
    out = prepare_out_dir(args.out, ["trace.jsonl", "trace.csv"], args.overwrite)
    spec, params, _ = load_checkpoint(args.checkpoint)
    if spec.n_conditions != len(config.reward.centers):
        raise ConfigurationError(
            "checkpoint conditions do not match the reward configuration")
    jsonl_path, csv_path = trace_trajectories(spec, params, config, args.n, out)
    print(f"wrote {jsonl_path} and {csv_path}")
    return 0


def cmd_plot(args) -> int:
    out = prepare_out_dir(args.out, ["curves.svg"], args.overwrite)
    labels = args.labels
    if labels and len(labels) != len(args.metrics):
        raise ConfigurationError("--labels needs one label per metrics file")
    series = []
    for i, path in enumerate(args.metrics):
        xs, ys = [], []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                if args.field in rec and rec[args.field] is not None:
                    xs.append(float(rec["iteration"]))
                    ys.append(float(rec[args.field]))
        label = labels[i] if labels else Path(path).parent.name or str(path)
        series.append((label, xs, ys))
    target = render_curves(series, out / "curves.svg",
                           title=args.field.replace("_", " "),
                           x_label="iteration", y_label=args.field)
    print(f"wrote {target}")
    return 0


def cmd_lemma_suite(args) -> int:
    result = run_lemma_suite(n_sequences=args.n, n_steps=args.steps,
                             seed=args.seed)
    print(f"sequences checked:          {result.n_sequences}")
    print(f"turning points (plain):     {result.n_unconstrained}")
    print(f"turning points (strict):    {result.n_constrained}")
    print(f"first-step selections:      {result.first_step_selected}")
    print(f"sign violations:            {result.sign_violations}")
    print(f"magnitude violations:       {result.magnitude_violations}")
    print(f"subset violations:          {result.subset_violations}")
    print("PASS" if result.passed else "FAIL")
    return 0 if result.passed else 1


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "trace": cmd_trace,
    "plot": cmd_plot,
    "lemma-suite": cmd_lemma_suite,
}


def write_error_record(args, exc: Exception) -> Path:
    out = getattr(args, "out", None)
    base = Path(out) if out is not None else Path.cwd()
    try:
        base.mkdir(parents=True, exist_ok=True)
        record = {"error": type(exc).__name__, "message": str(exc),
                  "command": getattr(args, "command", None)}
        path = base / "error.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path
    except OSError:
        return base / "error.json"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TpflowError, OSError, ValueError) as exc:
        path = write_error_record(args, exc)
        print(f"error: {exc}\nerror record: {path}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
