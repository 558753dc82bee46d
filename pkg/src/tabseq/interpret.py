"""Feature-importance attribution from the per-step masks of a forward pass."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .encoder import MaskTrace, TabularEncoder


@dataclass
class ImportanceReport:
    feature_names: list[str]
    step_masks: list[np.ndarray]  # per step, (B, D)
    step_weights: np.ndarray  # (B, n_steps) contribution weights
    aggregate: np.ndarray  # (B, D), rows on the simplex (flagged rows uniform)
    uniform_flag: np.ndarray  # (B,) True where every step weight was zero
    global_importance: np.ndarray  # (D,), sums to 1


def step_contribution(step_output: np.ndarray) -> np.ndarray:
    """ReLU-sum of a step's decision representation, one weight per row."""
    return np.maximum(step_output, 0.0).sum(axis=1)


def aggregate_mask(trace: MaskTrace) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Contribution-weighted, row-normalized combination of the step masks.

    Rows whose every step weight is zero get a uniform attribution and are
    flagged rather than emitting NaN. Returns (aggregate, weights, flags).
    """
    masks = [m.value for m in trace.masks]
    weights = np.stack([step_contribution(d.value) for d in trace.step_outputs], axis=1)
    weighted = sum(w[:, None] * m for w, m in zip(weights.T, masks))
    totals = weighted.sum(axis=1, keepdims=True)
    flags = totals[:, 0] == 0.0
    out = np.empty_like(weighted)
    ok = ~flags
    out[ok] = weighted[ok] / totals[ok]
    out[flags] = 1.0 / weighted.shape[1]
    return out, weights, flags


def compute_importance(model: TabularEncoder, dataset: Dataset,
                       batch_size: int = 4096) -> ImportanceReport:
    """Run the model in inference mode and attribute over the whole dataset.

    Global importance is the mean aggregate mask over the evaluation rows.
    """
    names = [c.name for c in model.schema.columns]
    step_masks = [[] for _ in range(model.config.n_steps)]
    aggregates, weights, flags = [], [], []
    n = dataset.n_rows
    if n == 0:
        raise ValueError("cannot attribute an empty dataset")
    for start in range(0, n, batch_size):
        out = model.forward(dataset.features[start:start + batch_size], "infer")
        agg, w, fl = aggregate_mask(out.trace)
        for s, m in enumerate(out.trace.masks):
            step_masks[s].append(m.value)
        aggregates.append(agg)
        weights.append(w)
        flags.append(fl)
    aggregate = np.concatenate(aggregates, axis=0)
    return ImportanceReport(
        feature_names=names,
        step_masks=[np.concatenate(chunks, axis=0) for chunks in step_masks],
        step_weights=np.concatenate(weights, axis=0),
        aggregate=aggregate,
        uniform_flag=np.concatenate(flags),
        global_importance=aggregate.mean(axis=0),
    )


def _write_matrix(path, names: list[str], matrix: np.ndarray, delimiter: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(names)
        for row in matrix:
            writer.writerow([repr(float(v)) for v in row])


def read_matrix(path, delimiter: str = ",") -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        names = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    return names, np.array(rows)


def export_importance(report: ImportanceReport, path, fmt: str = "delimited",
                      delimiter: str = ",") -> None:
    """Write the aggregate attribution, one row per instance.

    `delimited` emits a header of feature names plus float rows; `structured`
    emits JSON records with per-feature maps, the flags and the global vector.
    """
    if not np.all(np.isfinite(report.aggregate)):
        raise ValueError("refusing to export non-finite attributions")
    if fmt == "delimited":
        _write_matrix(path, report.feature_names, report.aggregate, delimiter)
    elif fmt == "structured":
        doc = {
            "format_version": 1,
            "feature_names": report.feature_names,
            "global_importance": report.global_importance.tolist(),
            "instances": [
                {
                    "attribution": dict(zip(report.feature_names, row.tolist())),
                    "uniform_fallback": bool(flag),
                }
                for row, flag in zip(report.aggregate, report.uniform_flag)
            ],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)
    else:
        raise ValueError(f"unknown export format {fmt!r}")
