"""Command-line interface: the reproducibility surface of the repo.

Subcommands cover the whole pipeline: `gen-data` collects offline
datasets, `pretrain` fits the per-task ensemble models, `train` runs
meta-training, `eval` scores a trained run under either protocol,
`ablate` drives the named sweeps, and `diag` computes representation
diagnostics. Every subcommand takes --seed and --out, writes a
manifest.json recording the resolved config and produced artifacts, and
exits 0 on success, 1 on runtime failure, 2 on config errors, 3 on
missing inputs. GENTLE_THREADS caps BLAS worker parallelism.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__, nn
from .datasets import QUALITIES, collect_suite, load_suite
from .ensembles import ModelTrainConfig, load_model, save_model, train_task_model
from .envs import FAMILIES, get_config
from .errors import ConfigError, DataFormatError, GentleError, MissingInputError
from .evaluation import (GIVEN_CONTEXT, ONE_SHOT, diagnostics_from_datasets,
                         evaluate_task_set, export_reps, make_expert_pool,
                         rep_diagnostics, collect_oneshot_contexts)
from .rng import Rng
from .tae import load_tae
from .td3bc import ActorCritic
from .trainer import (TrainConfig, VARIANTS, meta_train, save_run_artifacts)

MANIFEST_VERSION = 1
RATIO_SWEEP = (0, 1, 3, 6, 9, 12, 15)   # k2 = ratio * k1
TASK_COUNT_SWEEP = (4, 6, 8, 10)
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3


def _apply_thread_cap():
    from ._threads import worker_limit
    limit = worker_limit()
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=limit)
    except ImportError:
        pass


def _config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _write_manifest(out_dir, subcommand: str, config: dict, seed: int,
                    artifacts: dict, started: float) -> None:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "schema_version": MANIFEST_VERSION,
        "tool_version": __version__,
        "subcommand": subcommand,
        "config": config,
        "config_hash": _config_hash(config),
        "seed": seed,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "wall_clock_s": round(time.time() - started, 3),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def _load_json_config(path) -> dict:
    if not os.path.exists(path):
        raise MissingInputError(f"config file not found: {path}")
    with open(path) as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON ({exc})") from None


def _require_keys(config: dict, keys) -> None:
    for key in keys:
        if key not in config:
            raise ConfigError(f"config is missing required key: {key!r}")


# ---------------------------------------------------------------------------
# Subcommands

def cmd_gen_data(args) -> None:
    started = time.time()
    out = os.path.join(args.out, args.family, args.quality)
    manifest = collect_suite(args.family, args.quality, args.n_train_tasks,
                             args.n_test_tasks, args.n_traj, args.seed, out,
                             horizon=args.horizon)
    config = {
        "family": args.family, "quality": args.quality,
        "n_train_tasks": args.n_train_tasks, "n_test_tasks": args.n_test_tasks,
        "n_traj": args.n_traj, "horizon": manifest.horizon,
    }
    artifacts = {e.file: os.path.join(out, e.file) for e in manifest.entries}
    artifacts["dataset_manifest"] = os.path.join(out, "manifest.json")
    _write_manifest(args.out, "gen-data", config, args.seed, artifacts, started)
    print(f"collected {len(manifest.entries)} task datasets under {out}")


def cmd_pretrain(args) -> None:
    started = time.time()
    _, datasets = load_suite(args.data, split="train")
    if not datasets:
        raise MissingInputError(f"no train-split datasets under {args.data}")
    family = datasets[0].spec.family
    cfg = ModelTrainConfig.for_family(family, max_epochs=args.max_epochs)
    os.makedirs(args.out, exist_ok=True)
    artifacts = {}
    for ds in datasets:
        model = train_task_model(ds, cfg, args.seed)
        save_model(model, args.out)
        artifacts[f"model_task_{ds.task_id:03d}"] = os.path.join(
            args.out, f"model_task_{ds.task_id:03d}.json")
        print(f"task {ds.task_id}: best holdout MSE "
              f"{min(i.best_holdout_mse for i in model.train_info):.3e}")
    config = {"family": family, "data": str(args.data), "max_epochs": args.max_epochs,
              "model": cfg.__dict__}
    _write_manifest(args.out, "pretrain", config, args.seed, artifacts, started)


def _train_config_from_args(args) -> TrainConfig:
    config = {}
    if args.config:
        config = _load_json_config(args.config)
        _require_keys(config, ["family", "seed"])
    overrides = {
        "seed": args.seed, "epochs": args.epochs, "steps_per_epoch": args.steps_per_epoch,
        "variant": args.variant, "k1": args.k1, "k2": args.k2,
        "n_train_tasks": args.n_train_tasks,
        "oracle_model": args.oracle_model if args.oracle_model else None,
    }
    for key, value in overrides.items():
        if value is not None:
            config[key] = value
    return TrainConfig.from_json(config)


def _run_training(cfg: TrainConfig, data_dir, models_dir, out_dir,
                  rl_data_dir=None) -> dict:
    _, datasets = load_suite(data_dir, split="train")
    if len(datasets) < cfg.n_train_tasks:
        raise MissingInputError(
            f"{data_dir} holds {len(datasets)} train tasks, config wants {cfg.n_train_tasks}")
    datasets = datasets[:cfg.n_train_tasks]
    rl_datasets = None
    if rl_data_dir is not None:
        _, rl_datasets = load_suite(rl_data_dir, split="train")
        rl_datasets = rl_datasets[:cfg.n_train_tasks]
    models = None
    if cfg.variant != "no_relabel" and not cfg.oracle_model:
        if models_dir is None:
            raise MissingInputError("this variant needs --models (pretrained ensembles)")
        models = [load_model(models_dir, ds.task_id) for ds in datasets]
    run = meta_train(cfg, datasets, models, rl_datasets=rl_datasets)
    return save_run_artifacts(run, out_dir)


def cmd_train(args) -> None:
    started = time.time()
    cfg = _train_config_from_args(args)
    artifacts = _run_training(cfg, args.data, args.models, args.out)
    _write_manifest(args.out, "train", cfg.resolved().to_json(), cfg.seed, artifacts, started)
    print(f"training complete; artifacts in {args.out}")


def _load_nets(policy_path, encoder_path):
    meta_path = os.path.join(os.path.dirname(policy_path), "nets_meta.json")
    if not os.path.exists(meta_path):
        raise MissingInputError(f"nets_meta.json not found next to {policy_path}")
    with open(meta_path) as f:
        meta = json.load(f)
    if not os.path.exists(policy_path):
        raise MissingInputError(f"policy snapshot not found: {policy_path}")
    actor = nn.load_mlp(policy_path)
    decoder_path = os.path.join(os.path.dirname(encoder_path), "tae_decoder.bin")
    if not os.path.exists(encoder_path):
        raise MissingInputError(f"encoder snapshot not found: {encoder_path}")
    pair = load_tae(encoder_path, decoder_path)
    bound = meta["action_bound"]

    def policy_sz(sz):
        return bound * nn.mlp_forward_batch(actor, np.atleast_2d(sz))

    return policy_sz, pair, meta


def cmd_eval(args) -> None:
    started = time.time()
    policy_sz, pair, meta = _load_nets(args.policy, args.encoder)
    manifest, _ = load_suite(args.data, split=None)
    specs = [e.spec for e in manifest.entries if e.split == args.split]
    if not specs:
        raise MissingInputError(f"no {args.split}-split tasks in {args.data}")
    protocol = GIVEN_CONTEXT if args.protocol == "given" else ONE_SHOT
    pools = None
    if protocol == GIVEN_CONTEXT:
        pools = [make_expert_pool(spec, args.seed, task_id=t) for t, spec in enumerate(specs)]
    report = evaluate_task_set(policy_sz, pair, specs, protocol, args.episodes,
                               args.seed, args.split, expert_pools=pools)
    os.makedirs(args.out, exist_ok=True)
    eval_path = os.path.join(args.out, "eval.csv")
    import csv as _csv
    with open(eval_path, "w", newline="") as f:
        writer = _csv.writer(f)
        writer.writerow(["task_id", "protocol", "split", "mean_return", "std_return",
                         "n_episodes", "prior_return"])
        for row in report.rows:
            writer.writerow([row.task_id, row.protocol, row.split, repr(row.mean_return),
                             repr(row.std_return), row.n_episodes,
                             "" if row.prior_return is None else repr(row.prior_return)])
        writer.writerow(["aggregate", report.protocol, report.split,
                         repr(report.aggregate_mean), repr(report.aggregate_std),
                         args.episodes, ""])
    config = {"protocol": args.protocol, "split": args.split, "episodes": args.episodes,
              "policy": str(args.policy), "encoder": str(args.encoder), "data": str(args.data)}
    _write_manifest(args.out, "eval", config, args.seed, {"eval": eval_path}, started)
    print(f"{args.protocol}/{args.split}: mean return "
          f"{report.aggregate_mean:.3f} +- {report.aggregate_std:.3f}")


def cmd_diag(args) -> None:
    started = time.time()
    if args.policy:
        policy_sz, pair, _ = _load_nets(args.policy, args.encoder)
    else:
        policy_sz = None
        if not os.path.exists(args.encoder):
            raise MissingInputError(f"encoder snapshot not found: {args.encoder}")
        decoder_path = os.path.join(os.path.dirname(args.encoder), "tae_decoder.bin")
        pair = load_tae(args.encoder, decoder_path)
    manifest, datasets = load_suite(args.data, split=args.split)
    if args.source == "oneshot":
        if policy_sz is None:
            raise ConfigError("--source oneshot needs --policy")
        rng = Rng(args.seed).split("diag-oneshot")
        contexts = [collect_oneshot_contexts(policy_sz, pair, ds.spec, args.resamples,
                                             rng.split(t))
                    for t, ds in enumerate(datasets)]
        result = rep_diagnostics(pair, contexts)
    else:
        result = diagnostics_from_datasets(pair, datasets, args.resamples, args.seed)
    os.makedirs(args.out, exist_ok=True)
    reps_path = os.path.join(args.out, "reps.csv")
    task_ids = [datasets[i // args.resamples].task_id for i in range(len(result.labels))]
    export_reps(task_ids, [args.split] * len(task_ids), result.zs, result.projection, reps_path)
    config = {"source": args.source, "split": args.split, "resamples": args.resamples,
              "data": str(args.data)}
    _write_manifest(args.out, "diag", config, args.seed, {"reps": reps_path}, started)
    print(f"k-NN task-id accuracy ({args.source}, {args.split}): {result.knn_accuracy:.3f}")


def _sweep_points(sweep: str, base: TrainConfig) -> list[tuple[str, TrainConfig, dict]]:
    points = []
    if sweep == "ratio":
        for ratio in RATIO_SWEEP:
            import dataclasses
            cfg = dataclasses.replace(base, k2=base.k1 * ratio)
            points.append((f"ratio_1to{ratio}", cfg, {"ratio": f"1:{ratio}"}))
    elif sweep == "task-count":
        for n in TASK_COUNT_SWEEP:
            import dataclasses
            cfg = dataclasses.replace(base, n_train_tasks=n)
            points.append((f"tasks_{n}", cfg, {"n_train_tasks": n}))
    elif sweep == "variant":
        for variant in VARIANTS:
            import dataclasses
            cfg = dataclasses.replace(base, variant=variant,
                                      oracle_model=base.oracle_model and variant != "no_relabel")
            points.append((f"variant_{variant}", cfg, {"variant": variant}))
    elif sweep == "diversity":
        for quality in QUALITIES:
            points.append((f"diversity_{quality}", base, {"quality": quality}))
    else:
        raise ConfigError(f"unknown sweep {sweep!r}")
    return points


def cmd_ablate(args) -> None:
    started = time.time()
    base = _train_config_from_args(args)
    points = _sweep_points(args.sweep, base)
    root_seed = args.seed if args.seed is not None else base.seed
    plan = [{"name": name, "overrides": info,
             "seed": int(Rng(root_seed).split("ablate", name).integers(0, 2 ** 31))}
            for name, _, info in points]
    os.makedirs(args.out, exist_ok=True)
    if args.dry_run:
        _write_manifest(args.out, "ablate", {"sweep": args.sweep, "dry_run": True,
                                             "points": plan}, base.seed, {}, started)
        for p in plan:
            print(f"would run {p['name']} (seed {p['seed']})")
        return

    import csv as _csv
    import dataclasses
    summary_path = os.path.join(args.out, "summary.csv")
    rows = []
    artifacts = {}
    for (name, cfg, info), planned in zip(points, plan):
        cfg = dataclasses.replace(cfg, seed=planned["seed"])
        point_out = os.path.join(args.out, name)
        data_dir = args.data
        models_dir = args.models
        if args.sweep == "diversity":
            data_dir = os.path.join(args.data, info["quality"])
            models_dir = os.path.join(args.models, info["quality"]) if args.models else None
        rl_data_dir = None
        if args.sweep == "diversity" and info["quality"] != "expert":
            rl_data_dir = os.path.join(args.data, "expert")
        paths = _run_training(cfg, data_dir, models_dir, point_out, rl_data_dir=rl_data_dir)
        artifacts[name] = point_out

        policy_sz, pair, _ = _load_nets(paths["actor"], paths["tae_encoder"])
        manifest, _ = load_suite(data_dir, split=None)
        split_returns = {}
        for split in ("train", "test"):
            specs = [e.spec for e in manifest.entries if e.split == split][:cfg.n_train_tasks]
            if not specs:
                continue
            report = evaluate_task_set(policy_sz, pair, specs, ONE_SHOT,
                                       args.episodes, planned["seed"], split)
            split_returns[split] = (report.aggregate_mean, report.aggregate_std)
        rows.append([name, planned["seed"],
                     *(repr(v) for v in split_returns.get("train", (float("nan"),) * 2)),
                     *(repr(v) for v in split_returns.get("test", (float("nan"),) * 2))])
        print(f"{name}: train {split_returns.get('train')}, test {split_returns.get('test')}")

    with open(summary_path, "w", newline="") as f:
        writer = _csv.writer(f)
        writer.writerow(["point", "seed", "train_mean", "train_std", "test_mean", "test_std"])
        writer.writerows(rows)
    artifacts["summary"] = summary_path
    _write_manifest(args.out, "ablate", {"sweep": args.sweep, "points": plan},
                    base.seed, artifacts, started)


# ---------------------------------------------------------------------------
# Parser / entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gentle",
        description="Offline meta-RL pipeline on point-mass task families.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="collect offline datasets with scripted policies")
    p.add_argument("--family", required=True, choices=FAMILIES)
    p.add_argument("--quality", default="expert", choices=QUALITIES)
    p.add_argument("--n-train-tasks", type=int, default=10)
    p.add_argument("--n-test-tasks", type=int, default=10)
    p.add_argument("--n-traj", type=int, default=100)
    p.add_argument("--horizon", type=int, default=None,
                   help="override the family's episode length")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train per-task ensemble models")
    p.add_argument("--data", required=True, help="dataset directory (family/quality)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-epochs", type=int, default=200)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="run meta-training")
    p.add_argument("--config", default=None, help="flat JSON config (see TrainConfig)")
    p.add_argument("--data", required=True)
    p.add_argument("--models", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--steps-per-epoch", type=int, default=None)
    p.add_argument("--n-train-tasks", type=int, default=None)
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.add_argument("--k1", type=int, default=None)
    p.add_argument("--k2", type=int, default=None)
    p.add_argument("--oracle-model", action="store_true", default=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained policy/encoder")
    p.add_argument("--policy", required=True, help="actor snapshot (actor.bin)")
    p.add_argument("--encoder", required=True, help="encoder snapshot (tae_encoder.bin)")
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", required=True, choices=("given", "oneshot"))
    p.add_argument("--split", required=True, choices=("train", "test"))
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a named sweep of train+eval runs")
    p.add_argument("--sweep", required=True, choices=("ratio", "task-count", "diversity", "variant"))
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--models", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--steps-per-epoch", type=int, default=None)
    p.add_argument("--n-train-tasks", type=int, default=None)
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.add_argument("--k1", type=int, default=None)
    p.add_argument("--k2", type=int, default=None)
    p.add_argument("--oracle-model", action="store_true", default=False)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("diag", help="representation diagnostics (k-NN + 2-D projection)")
    p.add_argument("--encoder", required=True)
    p.add_argument("--policy", default=None, help="needed for --source oneshot")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train", choices=("train", "test"))
    p.add_argument("--source", default="dataset", choices=("dataset", "oneshot"))
    p.add_argument("--resamples", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diag)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_thread_cap()
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingInputError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (GentleError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
