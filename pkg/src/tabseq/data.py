"""Schemas, delimited-file ingestion, synthetic generators, splits, batching."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class Column:
    name: str
    kind: str  # "numeric" | "categorical"
    cardinality: int = 0
    vocab: list[str] = field(default_factory=list)
    has_unknown: bool = False


@dataclass
class FeatureSchema:
    columns: list[Column]
    target_name: str
    task: str  # "classify" | "regress"
    n_classes: int = 0

    def __post_init__(self):
        names = [c.name for c in self.columns] + [self.target_name]
        if len(set(names)) != len(names):
            raise DataError("duplicate column names in schema")
        if self.task not in ("classify", "regress"):
            raise DataError(f"unknown task {self.task!r}")

    @property
    def n_features(self) -> int:
        return len(self.columns)

    def categorical_indices(self) -> list[int]:
        return [i for i, c in enumerate(self.columns) if c.kind == "categorical"]

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": 1,
                "columns": [
                    {
                        "name": c.name,
                        "kind": c.kind,
                        "cardinality": c.cardinality,
                        "vocab": c.vocab,
                        "has_unknown": c.has_unknown,
                    }
                    for c in self.columns
                ],
                "target": {"name": self.target_name, "task": self.task,
                           "n_classes": self.n_classes},
            },
            indent=1,
        )

    @staticmethod
    def from_json(text: str) -> "FeatureSchema":
        doc = json.loads(text)
        cols = [
            Column(c["name"], c["kind"], c.get("cardinality", 0),
                   list(c.get("vocab", [])), c.get("has_unknown", False))
            for c in doc["columns"]
        ]
        t = doc["target"]
        return FeatureSchema(cols, t["name"], t["task"], t.get("n_classes", 0))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @staticmethod
    def load(path) -> "FeatureSchema":
        with open(path) as fh:
            return FeatureSchema.from_json(fh.read())


@dataclass
class Dataset:
    """Feature matrix (categoricals as integer codes) plus target vector."""

    features: np.ndarray  # (n, D) float64
    targets: np.ndarray  # (n,) float64 or int64
    schema: FeatureSchema

    def __post_init__(self):
        if self.features.shape[0] != self.targets.shape[0]:
            raise DataError("feature/target row counts differ")

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    def take(self, index: np.ndarray) -> "Dataset":
        return Dataset(self.features[index], self.targets[index], self.schema)


def load_delimited(path, schema: FeatureSchema, delimiter: str = ",",
                   impute_numeric_mean: bool = False) -> Dataset:
    """Read a delimited text file (header row required) into a typed Dataset.

    Unseen categorical strings extend each column's vocabulary in first-seen
    order and are recorded back into the schema, unless the column already
    declares a closed vocabulary, in which case an unknown value either maps
    to the reserved slot (has_unknown) or raises.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        expected = [c.name for c in schema.columns] + [schema.target_name]
        if header != expected:
            raise DataError(f"{path}: header {header} does not match schema {expected}")
        rows = []
        targets = []
        missing_numeric: list[tuple[int, int]] = []
        closed = {i: bool(schema.columns[i].vocab) for i in range(schema.n_features)}
        interned = {i: {v: k for k, v in enumerate(schema.columns[i].vocab)}
                    for i in schema.categorical_indices()}
        for lineno, raw in enumerate(reader, start=2):
            if len(raw) != len(expected):
                raise DataError(
                    f"{path}:{lineno}: expected {len(expected)} fields, got {len(raw)}"
                )
            row = np.empty(schema.n_features)
            for i, col in enumerate(schema.columns):
                cell = raw[i]
                if col.kind == "numeric":
                    if cell == "":
                        if not impute_numeric_mean:
                            raise DataError(f"{path}:{lineno}: missing numeric value "
                                            f"in column {col.name!r}")
                        missing_numeric.append((len(rows), i))
                        row[i] = np.nan
                    else:
                        try:
                            row[i] = float(cell)
                        except ValueError:
                            raise DataError(
                                f"{path}:{lineno}: bad numeric value {cell!r} "
                                f"in column {col.name!r}"
                            ) from None
                else:
                    vocab = interned[i]
                    if cell not in vocab:
                        if closed[i]:
                            if col.has_unknown:
                                row[i] = col.cardinality - 1
                                continue
                            raise DataError(
                                f"{path}:{lineno}: unknown category {cell!r} "
                                f"in column {col.name!r}"
                            )
                        vocab[cell] = len(vocab)
                        col.vocab.append(cell)
                    row[i] = vocab[cell]
            rows.append(row)
            cell = raw[-1]
            if schema.task == "classify":
                targets.append(int(float(cell)))
            else:
                targets.append(float(cell))
    for i in schema.categorical_indices():
        col = schema.columns[i]
        if not closed[i]:
            col.cardinality = len(col.vocab) + (1 if col.has_unknown else 0)
    X = np.array(rows) if rows else np.empty((0, schema.n_features))
    if missing_numeric:
        means = np.nanmean(X, axis=0)
        for r, c in missing_numeric:
            X[r, c] = means[c]
    y = np.asarray(targets, dtype=np.int64 if schema.task == "classify" else np.float64)
    if schema.task == "classify" and y.size:
        observed = int(y.max()) + 1
        if schema.n_classes == 0:
            schema.n_classes = observed
        elif observed > schema.n_classes:
            raise DataError(f"{path}: label {y.max()} exceeds declared classes")
    return Dataset(X, y, schema)


def write_delimited(dataset: Dataset, path, delimiter: str = ",") -> None:
    schema = dataset.schema
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow([c.name for c in schema.columns] + [schema.target_name])
        cat = set(schema.categorical_indices())
        for row, target in zip(dataset.features, dataset.targets):
            cells = []
            for i, v in enumerate(row):
                if i in cat:
                    cells.append(schema.columns[i].vocab[int(v)])
                else:
                    cells.append(repr(float(v)))
            if schema.task == "classify":
                cells.append(str(int(target)))
            else:
                cells.append(repr(float(target)))
            writer.writerow(cells)


SYN_KINDS = ("syn1", "syn2", "syn3", "syn4", "syn5", "syn6")

# Which feature groups carry signal, per generator (1-based feature numbers).
SYN_SALIENT = {
    "syn1": [(1, 2)],
    "syn2": [(3, 4, 5, 6)],
    "syn3": [(7, 8, 9, 10)],
    "syn4": [(1, 2), (3, 4, 5, 6), (11,)],
    "syn5": [(1, 2), (7, 8, 9, 10), (11,)],
    "syn6": [(3, 4, 5, 6), (7, 8, 9, 10), (11,)],
}


def _syn_logits(kind: str, X: np.ndarray) -> np.ndarray:
    l1 = np.exp(X[:, 0] * X[:, 1])
    l2 = np.exp(np.sum(X[:, 2:6] ** 2, axis=1) - 4.0)
    l3 = np.exp(-10.0 * np.sin(2.0 * X[:, 6]) + 2.0 * np.abs(X[:, 7])
                + X[:, 8] + np.exp(-X[:, 9]) - 2.4)
    if kind == "syn1":
        return l1
    if kind == "syn2":
        return l2
    if kind == "syn3":
        return l3
    switch = X[:, 10] < 0
    if kind == "syn4":
        return np.where(switch, l1, l2)
    if kind == "syn5":
        return np.where(switch, l1, l3)
    if kind == "syn6":
        return np.where(switch, l2, l3)
    raise DataError(f"unknown synthetic kind {kind!r}")


def synth_schema() -> FeatureSchema:
    cols = [Column(f"X{i}", "numeric") for i in range(1, 12)]
    return FeatureSchema(cols, "label", "classify", n_classes=2)


def synth_generate(kind: str, n: int, seed: int) -> Dataset:
    """Draw 11 standard-normal features and a Bernoulli label whose odds are
    set by the generator kind's functional form; deterministic per seed."""
    kind = kind.lower()
    if kind not in SYN_KINDS:
        raise DataError(f"unknown synthetic kind {kind!r}; expected one of {SYN_KINDS}")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 11))
    logits = _syn_logits(kind, X)
    p1 = 1.0 / (1.0 + logits)
    y = (rng.random(n) < p1).astype(np.int64)
    return Dataset(X, y, synth_schema())


def split(dataset: Dataset, fractions: tuple[float, float, float], seed: int
          ) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic shuffled (train, valid, test) split; disjoint and exhaustive."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must sum to 1, got {fractions}")
    n = dataset.n_rows
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    parts = (perm[:n_train], perm[n_train:n_train + n_valid], perm[n_train + n_valid:])
    return tuple(dataset.take(p) for p in parts)


def batches(dataset: Dataset, batch_size: int, shuffle: bool = False,
            rng: np.random.Generator | None = None):
    """Yield (features, targets) covering the dataset once; short final batch kept."""
    n = dataset.n_rows
    if batch_size < 2:
        raise DataError("batch size must be >= 2 (batch norm needs a variance)")
    if batch_size > n:
        warnings.warn(f"batch size {batch_size} > dataset size {n}; using one full batch",
                      stacklevel=2)
        batch_size = n
    order = np.arange(n)
    if shuffle:
        if rng is None:
            raise DataError("shuffle=True requires an rng")
        order = rng.permutation(n)
    edges = list(range(0, n, batch_size)) + [n]
    if edges[-1] - edges[-2] == 1:
        del edges[-2]  # a singleton tail cannot be batch-normalized; merge it
    for start, stop in zip(edges[:-1], edges[1:]):
        idx = order[start:stop]
        yield dataset.features[idx], dataset.targets[idx]
