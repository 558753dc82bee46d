"""Adam, staircase learning-rate decay, the supervised loop and metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import checkpoint as ckpt
from .data import Dataset, batches
from .encoder import TabularEncoder, supervised_loss
from .tensor import Tensor


class DivergenceError(RuntimeError):
    pass


class MetricError(ValueError):
    pass


class Adam:
    """Bias-corrected Adam over a fixed list of named parameters."""

    def __init__(self, params: list[tuple[str, Tensor]], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(t.value) for _, t in self.params]
        self.v = [np.zeros_like(t.value) for _, t in self.params]

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for i, (name, t) in enumerate(self.params):
            g = t.grad
            if g is None:
                g = np.zeros_like(t.value)
            elif not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for parameter {name}")
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            t.value = t.value - lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.zero_grad()


@dataclass
class LrSchedule:
    """rate(t) = base * decay ** floor(t / every) -- exponential staircase."""

    base: float
    decay: float = 1.0
    every: int = 1

    def rate(self, t: int) -> float:
        if t < 0:
            raise ValueError("iteration index must be >= 0")
        return self.base * self.decay ** (t // self.every)


# -- metrics ----------------------------------------------------------------

def accuracy(labels: np.ndarray, scores: np.ndarray) -> float:
    """Fraction of rows whose argmax class matches the label."""
    return float(np.mean(np.argmax(scores, axis=1) == labels))


def auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Rank-based (Mann-Whitney) AUC with midrank tie handling."""
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: labels contain a single class")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def mse(targets: np.ndarray, predictions: np.ndarray) -> float:
    return float(np.mean((np.asarray(targets).reshape(predictions.shape) - predictions) ** 2))


def predict(model: TabularEncoder, dataset: Dataset, batch_size: int = 4096) -> np.ndarray:
    """Raw model outputs (logits or regression values) in dataset order."""
    outs = []
    n = dataset.n_rows
    for start in range(0, n, batch_size):
        chunk = dataset.features[start:start + batch_size]
        outs.append(model.forward(chunk, "infer").predictions.value)
    return np.concatenate(outs, axis=0)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def evaluate(model: TabularEncoder, dataset: Dataset, metric: str,
             batch_size: int = 4096) -> float:
    preds = predict(model, dataset, batch_size)
    if metric == "accuracy":
        return accuracy(dataset.targets, preds)
    if metric == "auc":
        if model.config.out_dim != 2:
            raise MetricError("AUC requires a binary classifier")
        return auc(dataset.targets, _softmax(preds)[:, 1])
    if metric == "mse":
        return mse(dataset.targets, preds)
    raise MetricError(f"unknown metric {metric!r}")


# -- supervised training -----------------------------------------------------

@dataclass
class TrainResult:
    model: TabularEncoder
    history: list[dict] = field(default_factory=list)
    iterations: int = 0
    best_iteration: int = -1
    best_metric: float = float("nan")
    diverged: bool = False

    def final_train_loss(self) -> float:
        return self.history[-1]["train_loss"] if self.history else float("nan")


def _metric_better(metric: str, new: float, old: float) -> bool:
    if np.isnan(old):
        return True
    return new < old if metric == "mse" else new > old


def train(model: TabularEncoder, train_data: Dataset, valid_data: Dataset | None,
          schedule: LrSchedule, seed: int, max_iters: int,
          eval_every: int = 200, patience: int = 20, metric: str | None = None,
          batch_size: int | None = None) -> TrainResult:
    """Run Adam on the supervised objective; keep the best-on-validation state.

    Deterministic given the seed. On a non-finite loss the last best (or
    initial) snapshot is restored and training stops.
    """
    cfg = model.config
    if metric is None:
        metric = "accuracy" if cfg.task == "classify" else "mse"
    if batch_size is None:
        batch_size = cfg.batch_size
    opt = Adam(list(model.parameters()))
    rng = np.random.default_rng(seed)
    result = TrainResult(model)
    best_snapshot = ckpt._collect(model)
    bad_evals = 0
    t = 0
    while t < max_iters:
        for X, y in batches(train_data, batch_size, shuffle=True, rng=rng):
            if t >= max_iters:
                break
            lr = schedule.rate(t)
            opt.zero_grad()
            out = model.forward(X, "train")
            loss = supervised_loss(out.predictions, y, cfg.task,
                                   cfg.sparsity_weight, out.sparse_loss)
            loss_val = float(loss.value[0, 0])
            if not np.isfinite(loss_val):
                ckpt._restore(model, best_snapshot, "last good snapshot")
                result.diverged = True
                result.iterations = t
                return result
            loss.backward()
            try:
                opt.step(lr)
            except DivergenceError:
                ckpt._restore(model, best_snapshot, "last good snapshot")
                result.diverged = True
                result.iterations = t
                return result
            t += 1
            if (t % eval_every == 0 or t == max_iters) and valid_data is not None:
                score = evaluate(model, valid_data, metric)
                result.history.append(
                    {"iteration": t, "lr": lr, "train_loss": loss_val, "valid_metric": score}
                )
                if _metric_better(metric, score, result.best_metric):
                    result.best_metric = score
                    result.best_iteration = t
                    best_snapshot = ckpt._collect(model)
                    bad_evals = 0
                else:
                    bad_evals += 1
                    if patience is not None and bad_evals >= patience:
                        ckpt._restore(model, best_snapshot, "best snapshot")
                        result.iterations = t
                        return result
            elif t % eval_every == 0 or t == max_iters:
                result.history.append(
                    {"iteration": t, "lr": lr, "train_loss": loss_val,
                     "valid_metric": float("nan")}
                )
    if valid_data is not None and result.best_iteration >= 0:
        ckpt._restore(model, best_snapshot, "best snapshot")
    result.iterations = t
    return result
