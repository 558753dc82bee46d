"""Command-line surface: synth, train, pretrain, finetune, evaluate, explain,
gradcheck. Every command is deterministic given its config and seeds."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as datamod
from . import gradchecks
from . import interpret
from .data import Column, Dataset, FeatureSchema
from .decoder import Decoder, pretrain
from .encoder import ConfigError, ModelConfig, TabularEncoder
from .presets import get_preset
from .training import LrSchedule, evaluate, train

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_CHECK_FAILED = 3

_MODEL_KEYS = {
    "n_steps", "decision_dim", "attention_dim", "relaxation", "sparsity_weight",
    "entropy_eps", "n_shared_blocks", "n_step_blocks", "batch_size",
    "virtual_batch_size", "bn_momentum", "task", "out_dim",
}
_SCHEDULE_KEYS = {"learning_rate", "decay_rate", "decay_every"}
_RUN_KEYS = {
    "preset", "train_data", "valid_data", "test_data", "schema", "seed",
    "out_dir", "metric", "max_iters", "eval_every", "patience", "mask_prob",
    "decoder_steps", "desk_scale", "delimiter",
}
_ALL_KEYS = _MODEL_KEYS | _SCHEDULE_KEYS | _RUN_KEYS

_DEFAULTS = {
    "seed": 0,
    "eval_every": 200,
    "patience": 20,
    "mask_prob": 0.5,
    "delimiter": ",",
    "desk_scale": True,
}


class CliValidation(ValueError):
    pass


def load_run_config(path: str, overrides: list[str]) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise CliValidation(f"{path}: config must be a flat JSON object")
    if "preset" in doc:
        base = get_preset(doc["preset"])
        base.update(doc)
        doc = base
    for item in overrides:
        if "=" not in item:
            raise CliValidation(f"bad override {item!r}; expected key=value")
        key, value = item.split("=", 1)
        try:
            doc[key] = json.loads(value)
        except json.JSONDecodeError:
            doc[key] = value
    problems = [f"unknown config key {k!r}" for k in sorted(set(doc) - _ALL_KEYS)]
    merged = dict(_DEFAULTS)
    merged.update(doc)
    try:
        build_model_config(merged)
    except (ConfigError, TypeError, KeyError) as exc:
        problems.append(str(exc))
    if problems:
        raise CliValidation("; ".join(problems))
    return merged


def build_model_config(config: dict) -> ModelConfig:
    fields = {k: config[k] for k in _MODEL_KEYS if k in config}
    return ModelConfig(**fields)


def build_schedule(config: dict) -> LrSchedule:
    return LrSchedule(
        base=config["learning_rate"],
        decay=config.get("decay_rate", 1.0),
        every=int(config.get("decay_every", 1)),
    )


def _load_schema(config: dict, data_path: str) -> FeatureSchema:
    if config.get("schema"):
        return FeatureSchema.load(config["schema"])
    # without a sidecar, infer an all-numeric schema from the header row
    with open(data_path, newline="") as fh:
        header = next(csv.reader(fh, delimiter=config.get("delimiter", ",")))
    cols = [Column(name, "numeric") for name in header[:-1]]
    task = config.get("task", "classify")
    n_classes = config.get("out_dim", 0) if task == "classify" else 0
    return FeatureSchema(cols, header[-1], task, n_classes)


def _load_dataset(config: dict, path: str, schema: FeatureSchema) -> Dataset:
    return datamod.load_delimited(path, schema, config.get("delimiter", ","))


def _config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, metrics: dict,
                    artifacts: dict) -> None:
    manifest = {
        "command": command,
        "config": config,
        "config_sha256": _config_hash(config),
        "seed": config.get("seed", 0),
        "final_metrics": metrics,
        "artifacts": artifacts,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def _out_dir(config: dict) -> Path:
    root = config.get("out_dir") or os.environ.get("TABSEQ_OUT_ROOT", "runs")
    out = Path(root)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "lr", "train_loss", "valid_metric"])
        for row in history:
            writer.writerow([row["iteration"], repr(row["lr"]),
                             repr(row["train_loss"]), repr(row["valid_metric"])])


def _warn_if_large(config: dict) -> None:
    if not config.get("desk_scale", True):
        warnings.warn("this preset documents a published large-scale run; "
                      "expect it not to finish at desk scale", stacklevel=2)


# -- commands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    dataset = datamod.synth_generate(args.kind, args.n, args.seed)
    datamod.write_delimited(dataset, args.out)
    if args.schema_out:
        dataset.schema.save(args.schema_out)
    print(f"wrote {dataset.n_rows} rows to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_run_config(args.config, args.override)
    _warn_if_large(config)
    schema = _load_schema(config, config["train_data"])
    train_ds = _load_dataset(config, config["train_data"], schema)
    valid_ds = (_load_dataset(config, config["valid_data"], schema)
                if config.get("valid_data") else None)
    model_cfg = build_model_config(config)
    seed = int(config["seed"])
    if args.from_checkpoint:
        source = ckpt.load_encoder(args.from_checkpoint)
        model = ckpt.transfer_encoder(source, model_cfg, seed)
    else:
        model = TabularEncoder(schema, model_cfg, seed)
    result = train(
        model, train_ds, valid_ds, build_schedule(config), seed,
        max_iters=int(config["max_iters"]), eval_every=int(config["eval_every"]),
        patience=config["patience"], metric=config.get("metric"),
    )
    out = _out_dir(config)
    ckpt.save_encoder(model, out / "model.npz")
    _write_history(out / "history.csv", result.history)
    metrics = {
        "iterations": result.iterations,
        "best_iteration": result.best_iteration,
        "best_valid_metric": result.best_metric,
        "train_loss": result.final_train_loss(),
        "diverged": result.diverged,
    }
    if config.get("test_data"):
        test_ds = _load_dataset(config, config["test_data"], schema)
        metric = config.get("metric") or ("accuracy" if model_cfg.task == "classify" else "mse")
        metrics[f"test_{metric}"] = evaluate(model, test_ds, metric)
    _write_manifest(out, "finetune" if args.from_checkpoint else "train",
                    config, metrics, {"checkpoint": str(out / "model.npz"),
                                      "history": str(out / "history.csv")})
    print(json.dumps(metrics, indent=1))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    config = load_run_config(args.config, args.override)
    _warn_if_large(config)
    schema = _load_schema(config, config["train_data"])
    train_ds = _load_dataset(config, config["train_data"], schema)
    model_cfg = build_model_config(config)
    seed = int(config["seed"])
    encoder = TabularEncoder(schema, model_cfg, seed)
    decoder = Decoder(model_cfg, schema.n_features, seed + 1,
                      n_steps=config.get("decoder_steps"))
    result = pretrain(
        encoder, decoder, train_ds.features, build_schedule(config), seed,
        max_iters=int(config["max_iters"]), mask_prob=float(config["mask_prob"]),
    )
    out = _out_dir(config)
    ckpt.save_encoder(encoder, out / "pretrained.npz")
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in result.loss_curve:
            writer.writerow([step, repr(loss)])
    metrics = {
        "final_loss": result.loss_curve[-1][1] if result.loss_curve else float("nan"),
        "iterations": len(result.loss_curve),
        "diverged": result.diverged,
    }
    _write_manifest(out, "pretrain", config, metrics,
                    {"checkpoint": str(out / "pretrained.npz"),
                     "loss_curve": str(out / "loss_curve.csv")})
    print(json.dumps(metrics, indent=1))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = ckpt.load_encoder(args.checkpoint)
    dataset = datamod.load_delimited(args.data, model.schema, args.delimiter)
    score = evaluate(model, dataset, args.metric)
    print(json.dumps({args.metric: score}))
    return EXIT_OK


def cmd_explain(args) -> int:
    model = ckpt.load_encoder(args.checkpoint)
    dataset = datamod.load_delimited(args.data, model.schema, args.delimiter)
    report = interpret.compute_importance(model, dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = report.feature_names
    for s, mask in enumerate(report.step_masks, start=1):
        interpret._write_matrix(out / f"mask_step{s}.csv", names, mask, ",")
    interpret.export_importance(report, out / "aggregate_mask.csv", "delimited")
    interpret.export_importance(report, out / "importance.json", "structured")
    ranked = sorted(zip(names, report.global_importance), key=lambda kv: -kv[1])
    with open(out / "global_importance.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "importance"])
        for name, value in ranked:
            writer.writerow([name, repr(float(value))])
    print("\n".join(f"{name}\t{value:.4f}" for name, value in ranked[:10]))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = gradchecks.run_scope(args.scope, inject_fault=args.inject_fault)
    failed = [r for r in reports if not r.passed]
    for r in reports:
        print(r)
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tabseq",
        description="Sequential-attention tabular learner",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark dataset")
    p.add_argument("--kind", required=True, choices=datamod.SYN_KINDS)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--schema-out", default=None)
    p.set_defaults(func=cmd_synth)

    for name, needs_from in (("train", False), ("finetune", True)):
        p = sub.add_parser(name, help=f"{name} a model from a run config")
        p.add_argument("--config", required=True)
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE")
        if needs_from:
            p.add_argument("--from", dest="from_checkpoint", required=True)
        else:
            p.set_defaults(from_checkpoint=None)
        p.set_defaults(func=cmd_train)

    p = sub.add_parser("pretrain", help="masked-feature self-supervised pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metric", required=True, choices=["accuracy", "auc", "mse"])
    p.add_argument("--delimiter", default=",")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="export per-step and aggregate importances")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--delimiter", default=",")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--scope", required=True, choices=["layers", "encoder", "decoder"])
    p.add_argument("--inject-fault", action="store_true",
                   help="corrupt one backward rule (test fixture)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (CliValidation, ConfigError, datamod.DataError, KeyError,
            ckpt.CheckpointError, ckpt.TransferError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
