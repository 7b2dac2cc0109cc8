"""Command-line entry point.

Subcommands: gen-data, train-diffusion, sample, train-ssl, experiment,
report. Every subcommand takes an optional --config JSON file; explicit
flags override file values, which override defaults. The effective merged
configuration is dumped next to each subcommand's outputs so any run can
be reproduced from its dump alone.

Exit codes: 0 success, 2 configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .datagen import bayes_gap_check, load_bundle, make_bundle, save_bundle
from .diffusion import (
    DiffusionSchedule,
    ancestral_sample,
    save_pool,
    train_denoiser,
)
from .errors import ConfigError
from .experiments import (
    DESK_CLASSIFIER,
    DESK_DENOISER,
    DESK_DIFFUSION,
    build_experiment,
    report,
    run_experiment,
)
from .models import (
    ClassifierConfig,
    DenoiserConfig,
    checkpoint_hash,
    load_checkpoint,
    save_checkpoint,
)
from .schedulers import schedule_from_config
from .training import TrainConfig, train_run, write_metrics_csv


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        with open(p, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return cfg


def _merge(defaults: dict, file_cfg: dict, flags: dict) -> dict:
    """defaults <- file <- explicit flags (None flags do not override)."""
    out = dict(defaults)
    out.update({k: v for k, v in file_cfg.items() if k in defaults})
    out.update({k: v for k, v in flags.items() if v is not None})
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return out


def _dump_effective(directory: Path, cfg: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "effective_config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)


def _require(cfg: dict, key: str, sub: str):
    if cfg.get(key) is None:
        raise ConfigError(f"{sub}: missing required option --{key.replace('_', '-')}")
    return cfg[key]


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    defaults = {
        "out": None,
        "seed": 0,
        "pool_kind": "real_clean",
        "n_labeled_per_class": 10,
        "n_unlabeled": 6000,
        "n_test_per_class": 200,
        "bias_spec": [0.7, 0.2, 0.1],
        "synthetic_pool": None,
    }
    flags = {
        "out": args.out,
        "seed": args.seed,
        "pool_kind": args.pool_kind,
        "n_labeled_per_class": args.n_labeled_per_class,
        "n_unlabeled": args.n_unlabeled,
        "n_test_per_class": args.n_test_per_class,
        "synthetic_pool": args.synthetic_pool,
    }
    cfg = _merge(defaults, _load_config_file(args.config), flags)
    out = Path(_require(cfg, "out", "gen-data"))
    bundle = make_bundle(
        n_labeled_per_class=int(cfg["n_labeled_per_class"]),
        n_unlabeled=int(cfg["n_unlabeled"]),
        n_test_per_class=int(cfg["n_test_per_class"]),
        pool_kind=cfg["pool_kind"],
        bias_spec=tuple(cfg["bias_spec"]),
        seed=int(cfg["seed"]),
        synthetic_pool_dir=cfg["synthetic_pool"],
    )
    save_bundle(out, bundle)
    _dump_effective(out, cfg)
    gap = bayes_gap_check(bundle)
    print(
        f"wrote bundle to {out} "
        f"(labeled={len(bundle.labeled_images)}, unlabeled={len(bundle.unlabeled_images)}, "
        f"test={len(bundle.test_images)}); hand-classifier test accuracy "
        f"{gap['test_accuracy']:.3f}"
    )
    return 0


def _cmd_train_diffusion(args) -> int:
    defaults = {
        "bundle": None,
        "out": None,
        "seed": 0,
        "steps": 3000,
        "batch": 16,
        "learning_rate": 2e-4,
        "momentum": 0.9,
        "num_steps": DESK_DIFFUSION["num_steps"],
        "beta_start": DESK_DIFFUSION["beta_start"],
        "beta_end": DESK_DIFFUSION["beta_end"],
        "base_channels": DESK_DENOISER.base_channels,
        "depth": DESK_DENOISER.depth,
        "time_embed_dim": DESK_DENOISER.time_embed_dim,
    }
    flags = {
        "bundle": args.bundle,
        "out": args.out,
        "seed": args.seed,
        "steps": args.steps,
        "batch": args.batch,
        "learning_rate": args.learning_rate,
        "num_steps": args.num_steps,
        "base_channels": args.base_channels,
    }
    cfg = _merge(defaults, _load_config_file(args.config), flags)
    bundle_dir = _require(cfg, "bundle", "train-diffusion")
    out = Path(_require(cfg, "out", "train-diffusion"))
    bundle = load_bundle(bundle_dir)
    schedule = DiffusionSchedule.linear(
        int(cfg["num_steps"]), float(cfg["beta_start"]), float(cfg["beta_end"])
    )
    dconfig = DenoiserConfig(
        base_channels=int(cfg["base_channels"]),
        depth=int(cfg["depth"]),
        time_embed_dim=int(cfg["time_embed_dim"]),
    )
    params, losses = train_denoiser(
        dconfig,
        schedule,
        bundle.unlabeled_images,
        seed=int(cfg["seed"]),
        steps=int(cfg["steps"]),
        batch=int(cfg["batch"]),
        learning_rate=float(cfg["learning_rate"]),
        momentum=float(cfg["momentum"]),
    )
    save_checkpoint(
        out,
        params,
        {"denoiser": dconfig.to_dict(), "diffusion": schedule.to_dict()},
        extra={"seed": int(cfg["seed"]), "steps": int(cfg["steps"])},
    )
    _dump_effective(out, cfg)
    with open(out / "loss_trace.csv", "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for step, loss in losses:
            fh.write(f"{step},{loss!r}\n")
    last = losses[-1][1] if losses else float("nan")
    print(f"trained denoiser for {cfg['steps']} steps (final loss {last:.4f}) -> {out}")
    return 0


def _cmd_sample(args) -> int:
    defaults = {"checkpoint": None, "out": None, "n": 6000, "batch": 250, "seed": 0}
    flags = {
        "checkpoint": args.checkpoint,
        "out": args.out,
        "n": args.n,
        "batch": args.batch,
        "seed": args.seed,
    }
    cfg = _merge(defaults, _load_config_file(args.config), flags)
    ckpt_dir = _require(cfg, "checkpoint", "sample")
    out = Path(_require(cfg, "out", "sample"))
    params, manifest = load_checkpoint(ckpt_dir)
    dconfig = DenoiserConfig.from_dict(manifest["config"]["denoiser"])
    schedule = DiffusionSchedule.from_dict(manifest["config"]["diffusion"])
    images = ancestral_sample(
        params,
        dconfig,
        schedule,
        n=int(cfg["n"]),
        seed=int(cfg["seed"]),
        batch=int(cfg["batch"]),
    )
    save_pool(
        out,
        images,
        meta={
            "count": int(cfg["n"]),
            "seed": int(cfg["seed"]),
            "schedule": schedule.to_dict(),
            "denoiser_checkpoint_hash": checkpoint_hash(ckpt_dir),
        },
    )
    _dump_effective(out, cfg)
    print(f"sampled {cfg['n']} images -> {out}")
    return 0


def _cmd_train_ssl(args) -> int:
    defaults = {
        "bundle": None,
        "out": None,
        "train": TrainConfig().to_dict(),
        "classifier": DESK_CLASSIFIER.to_dict(),
        "schedule": {"kind": "sinusoidal_decay"},
    }
    file_cfg = _load_config_file(args.config)
    file_cfg = {k: v for k, v in file_cfg.items() if k in defaults}
    cfg = dict(defaults)
    for key in ("train", "classifier", "schedule"):
        sub = dict(defaults[key])
        sub.update(file_cfg.get(key, {}))
        cfg[key] = sub
    cfg["bundle"] = file_cfg.get("bundle", None)
    cfg["out"] = file_cfg.get("out", None)
    if args.bundle is not None:
        cfg["bundle"] = args.bundle
    if args.out is not None:
        cfg["out"] = args.out
    if args.schedule_kind is not None:
        cfg["schedule"]["kind"] = args.schedule_kind
    if args.iterations is not None:
        cfg["train"]["iterations"] = args.iterations
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    if args.lambda_u is not None:
        cfg["train"]["lambda_u"] = args.lambda_u

    bundle_dir = _require(cfg, "bundle", "train-ssl")
    out = Path(_require(cfg, "out", "train-ssl"))
    bundle = load_bundle(bundle_dir)
    try:
        train_cfg = TrainConfig.from_dict(cfg["train"])
        classifier_cfg = ClassifierConfig.from_dict(
            {**cfg["classifier"], "input_size": tuple(cfg["classifier"]["input_size"])}
        )
        schedule = schedule_from_config(cfg["schedule"], num_classes=bundle.num_classes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train-ssl: bad configuration: {exc}") from exc
    records, trainer = train_run(train_cfg, bundle, schedule, classifier_cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", records)
    save_checkpoint(
        out / "checkpoint",
        trainer.ema.as_tensors(),
        classifier_cfg.to_dict(),
        extra={"weights": "ema"},
    )
    _dump_effective(out, cfg)
    (out / "done.marker").write_text("ok\n", encoding="utf-8")
    final = records[-1].test_accuracy if records else float("nan")
    print(f"train-ssl finished ({train_cfg.iterations} iters, final accuracy {final:.3f}) -> {out}")
    return 0


def _cmd_experiment(args) -> int:
    defaults = {
        "name": None,
        "runs": "runs",
        "seeds": [1, 2, 3],
        "iterations": None,
        "synthetic_pool": None,
        "n_unlabeled": None,
        "eval_every": None,
    }
    flags = {
        "name": args.name,
        "runs": args.runs,
        "seeds": [int(s) for s in args.seeds.split(",")] if args.seeds else None,
        "iterations": args.iterations,
        "synthetic_pool": args.synthetic_pool,
        "n_unlabeled": args.n_unlabeled,
        "eval_every": args.eval_every,
    }
    cfg = _merge(defaults, _load_config_file(args.config), flags)
    name = _require(cfg, "name", "experiment")
    train_kwargs = {}
    if cfg["iterations"] is not None:
        train_kwargs["iterations"] = int(cfg["iterations"])
    if cfg["eval_every"] is not None:
        train_kwargs["eval_every"] = int(cfg["eval_every"])
    train = TrainConfig(**train_kwargs) if train_kwargs else None
    data = {"n_unlabeled": int(cfg["n_unlabeled"])} if cfg["n_unlabeled"] else None
    spec = build_experiment(name, seeds=tuple(cfg["seeds"]), train=train, data=data)
    rows = run_experiment(
        spec, cfg["runs"], synthetic_pool_dir=cfg["synthetic_pool"], progress=print
    )
    for row in rows:
        print(
            f"{row.experiment}/{row.cell}: {row.mean_accuracy:.4f} "
            f"+- {row.std_accuracy:.4f} over seeds {list(row.seeds)}"
        )
    return 0


def _cmd_report(args) -> int:
    defaults = {"runs": "runs", "name": None}
    cfg = _merge(
        defaults,
        _load_config_file(args.config),
        {"runs": args.runs, "name": args.name},
    )
    name = _require(cfg, "name", "report")
    out = report(cfg["runs"], name)
    for row in out["rows"]:
        print(
            f"{row.experiment}/{row.cell}: {row.mean_accuracy:.4f} "
            f"+- {row.std_accuracy:.4f}"
        )
    print(f"wrote {out['summary']}, {out['threshold_trace']}, {out['mask_rate_trace']}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sinematch",
        description="Semi-supervised training with sinusoidal threshold decay "
        "and diffusion-generated unlabeled data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a procedural dataset bundle")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument(
        "--pool-kind",
        dest="pool_kind",
        choices=["real_clean", "real_biased", "synthetic"],
        default=None,
    )
    p.add_argument("--n-labeled-per-class", dest="n_labeled_per_class", type=int, default=None)
    p.add_argument("--n-unlabeled", dest="n_unlabeled", type=int, default=None)
    p.add_argument("--n-test-per-class", dest="n_test_per_class", type=int, default=None)
    p.add_argument("--synthetic-pool", dest="synthetic_pool", default=None)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train-diffusion", help="train the noise predictor on a bundle's unlabeled pool")
    p.add_argument("--config", default=None)
    p.add_argument("--bundle", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    p.add_argument("--num-steps", dest="num_steps", type=int, default=None)
    p.add_argument("--base-channels", dest="base_channels", type=int, default=None)
    p.set_defaults(func=_cmd_train_diffusion)

    p = sub.add_parser("sample", help="draw a synthetic pool from a trained denoiser")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("train-ssl", help="one semi-supervised training run")
    p.add_argument("--config", default=None)
    p.add_argument("--bundle", default=None)
    p.add_argument("--out", default=None)
    p.add_argument(
        "--schedule-kind",
        dest="schedule_kind",
        choices=["fixed", "linear_decay", "sinusoidal_decay", "adaptive_ascent"],
        default=None,
    )
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lambda-u", dest="lambda_u", type=float, default=None)
    p.set_defaults(func=_cmd_train_ssl)

    p = sub.add_parser("experiment", help="run one of the named experiment grids")
    p.add_argument("--config", default=None)
    p.add_argument(
        "--name",
        choices=["ablation_thresholds", "pool_comparison", "baseline_vs_ssl"],
        default=None,
    )
    p.add_argument("--runs", default=None)
    p.add_argument("--seeds", default=None, help="comma-separated, e.g. 1,2,3")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=None)
    p.add_argument("--n-unlabeled", dest="n_unlabeled", type=int, default=None)
    p.add_argument("--synthetic-pool", dest="synthetic_pool", default=None)
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("report", help="summaries and plot-data files for an experiment")
    p.add_argument("--config", default=None)
    p.add_argument("--runs", default=None)
    p.add_argument("--name", default=None)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError,) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
