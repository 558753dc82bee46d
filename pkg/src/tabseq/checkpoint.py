"""Single-file checkpoints: config, schema, parameters and BN running stats.

Stored as an uncompressed .npz with one array per parameter / BN statistic and
a JSON metadata entry; float64 arrays round-trip bit-exactly.
"""
from __future__ import annotations

import json

import numpy as np

from .data import FeatureSchema
from .encoder import ModelConfig, TabularEncoder

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TransferError(ValueError):
    pass


def _collect(model) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for name, t in model.parameters():
        arrays[f"param:{name}"] = t.value
    for name, bn in model.bn_layers():
        for key, arr in bn.state().items():
            arrays[f"bn:{name}:{key}"] = arr
    return arrays


def _restore(model, arrays: dict[str, np.ndarray], where: str) -> None:
    for name, t in model.parameters():
        key = f"param:{name}"
        if key not in arrays:
            raise CheckpointError(f"{where}: missing {key}")
        if arrays[key].shape != t.value.shape:
            raise CheckpointError(
                f"{where}: {key} has shape {arrays[key].shape}, expected {t.value.shape}"
            )
        t.value = arrays[key].copy()
    for name, bn in model.bn_layers():
        bn.load_state({
            key: arrays[f"bn:{name}:{key}"]
            for key in ("running_mean", "running_var", "initialized")
        })


def save_encoder(model: TabularEncoder, path) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": "encoder",
        "seed": model.seed,
        "config": model.config.to_dict(),
        "schema": json.loads(model.schema.to_json()),
    }
    arrays = _collect(model)
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_encoder(path) -> TabularEncoder:
    with np.load(path) as bundle:
        arrays = {k: bundle[k] for k in bundle.files}
    meta = json.loads(bytes(arrays.pop("meta")).decode())
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
    if meta.get("kind") != "encoder":
        raise CheckpointError(f"{path}: not an encoder checkpoint")
    schema = FeatureSchema.from_json(json.dumps(meta["schema"]))
    config = ModelConfig.from_dict(meta["config"])
    model = TabularEncoder(schema, config, seed=meta.get("seed", 0))
    _restore(model, arrays, str(path))
    return model


_TRANSFER_FIELDS = (
    "n_steps", "decision_dim", "attention_dim", "n_shared_blocks", "n_step_blocks",
)


def transfer_encoder(pretrained: TabularEncoder, config: ModelConfig, seed: int
                     ) -> TabularEncoder:
    """Start a supervised model from a pretrained encoder.

    Copies every encoder parameter and BN statistic; the output head is
    freshly initialized for the new task. Architectures must match.
    """
    src, dst = pretrained.config, config
    problems = []
    for name in _TRANSFER_FIELDS:
        if getattr(src, name) != getattr(dst, name):
            problems.append(f"{name}: pretrained={getattr(src, name)} finetune={getattr(dst, name)}")
    if problems:
        raise TransferError("incompatible architectures:\n  " + "\n  ".join(problems))
    model = TabularEncoder(pretrained.schema, config, seed)
    src_params = dict(pretrained.encoder_parameters())
    for name, t in model.encoder_parameters():
        if name not in src_params:
            raise TransferError(f"pretrained model lacks parameter {name}")
        if src_params[name].value.shape != t.value.shape:
            raise TransferError(
                f"parameter {name}: pretrained shape {src_params[name].value.shape} "
                f"!= finetune shape {t.value.shape}"
            )
        t.value = src_params[name].value.copy()
    src_bns = dict(pretrained.bn_layers())
    for name, bn in model.bn_layers():
        bn.load_state(src_bns[name].state())
    return model
