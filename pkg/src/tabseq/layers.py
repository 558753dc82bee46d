"""Building blocks: linear layers, (ghost) batch norm, GLU blocks, embeddings."""
from __future__ import annotations

import warnings

import numpy as np

from . import tensor
from .tensor import Tensor


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    """Fully-connected layer, Glorot-uniform weight and zero bias."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(glorot_uniform(rng, in_dim, out_dim), requires_grad=True)
        self.bias = Tensor(np.zeros((1, out_dim)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_dim:
            raise tensor.ShapeError(
                f"{self.name}: expected {self.in_dim} input columns, got {x.shape[1]}"
            )
        return tensor.add(tensor.matmul(x, self.weight), self.bias)

    def parameters(self):
        yield f"{self.name}.weight", self.weight
        yield f"{self.name}.bias", self.bias


def virtual_batch_slices(batch: int, virtual: int | None) -> list[tuple[int, int]]:
    """Split `batch` rows into virtual batches of size `virtual`.

    A trailing remainder of >= 2 rows becomes its own group; a singleton
    remainder merges into the previous group (variance of one row is
    undefined). `virtual=None` or virtual >= batch means one group.
    """
    if batch < 2:
        raise tensor.ShapeError(f"batch norm needs >= 2 rows, got {batch}")
    if virtual is None:
        return [(0, batch)]
    if virtual > batch:
        warnings.warn(
            f"virtual batch size {virtual} exceeds batch size {batch}; "
            "falling back to a single virtual batch",
            stacklevel=2,
        )
        return [(0, batch)]
    edges = list(range(0, batch, virtual)) + [batch]
    if edges[-1] - edges[-2] == 1:
        del edges[-2]
    return list(zip(edges[:-1], edges[1:]))


class BatchNorm:
    """Batch normalization over virtual sub-batches ("ghost" form).

    `virtual_batch=None` gives plain full-batch normalization. Running
    statistics follow running <- momentum*running + (1-momentum)*stat, where
    the per-step stat is averaged over the virtual batches.
    """

    def __init__(self, dim: int, name: str, virtual_batch: int | None = None,
                 momentum: float = 0.9, eps: float = 1e-5):
        self.name = name
        self.dim = dim
        self.virtual_batch = virtual_batch
        self.momentum = momentum
        self.eps = eps
        self.gain = Tensor(np.ones((1, dim)), requires_grad=True)
        self.shift = Tensor(np.zeros((1, dim)), requires_grad=True)
        self.running_mean = np.zeros((1, dim))
        self.running_var = np.ones((1, dim))
        self.initialized = False

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        if x.shape[1] != self.dim:
            raise tensor.ShapeError(f"{self.name}: expected {self.dim} columns, got {x.shape[1]}")
        if mode == "train":
            groups = virtual_batch_slices(x.shape[0], self.virtual_batch)
            out, means, variances = tensor.batch_norm_train(
                x, self.gain, self.shift, groups, self.eps
            )
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * means.mean(axis=0, keepdims=True)
            self.running_var = m * self.running_var + (1 - m) * variances.mean(axis=0, keepdims=True)
            self.initialized = True
            return out
        if mode == "infer":
            if not self.initialized:
                raise RuntimeError(f"{self.name}: inference before any training step")
            return tensor.batch_norm_infer(
                x, self.gain, self.shift, self.running_mean, self.running_var, self.eps
            )
        raise ValueError(f"unknown mode {mode!r}")

    def parameters(self):
        yield f"{self.name}.gain", self.gain
        yield f"{self.name}.shift", self.shift

    def state(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var,
                "initialized": np.array([float(self.initialized)])}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.running_mean = state["running_mean"].copy()
        self.running_var = state["running_var"].copy()
        self.initialized = bool(state["initialized"][0])


class GluBlock:
    """FC to twice the width, batch norm, then a gated linear unit."""

    def __init__(self, in_dim: int, units: int, rng: np.random.Generator, name: str,
                 virtual_batch: int | None = None, momentum: float = 0.9):
        self.name = name
        self.units = units
        self.fc = Linear(in_dim, 2 * units, rng, f"{name}.fc")
        self.bn = BatchNorm(2 * units, f"{name}.bn", virtual_batch, momentum)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return tensor.glu(self.bn(self.fc(x), mode), self.units)

    def parameters(self):
        yield from self.fc.parameters()
        yield from self.bn.parameters()


class EmbeddingTable:
    """One trainable scalar per category value, per categorical column."""

    def __init__(self, cardinality: int, rng: np.random.Generator, name: str):
        self.name = name
        self.cardinality = cardinality
        self.table = Tensor(rng.uniform(-0.1, 0.1, size=(cardinality, 1)), requires_grad=True)

    def __call__(self, codes: np.ndarray) -> Tensor:
        return tensor.gather_rows(self.table, codes)

    def parameters(self):
        yield f"{self.name}.table", self.table
