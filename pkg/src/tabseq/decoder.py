"""Reconstruction decoder and the masked-feature self-supervised objective."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .encoder import FeatureTransformer, ModelConfig, TabularEncoder
from .layers import GluBlock, Linear
from .tensor import Tensor
from .training import Adam, DivergenceError, LrSchedule


@dataclass
class PretrainMask:
    """Bernoulli indicator of the feature cells hidden from the encoder."""

    hidden: np.ndarray  # (B, D), entries in {0, 1}; 1 = must be reconstructed
    mask_prob: float


def sample_mask(batch: int, n_features: int, mask_prob: float,
                rng: np.random.Generator) -> PretrainMask:
    if not (0.0 < mask_prob < 1.0):
        raise ValueError(f"mask probability must be in (0, 1), got {mask_prob}")
    hidden = (rng.random((batch, n_features)) < mask_prob).astype(np.float64)
    return PretrainMask(hidden, mask_prob)


class Decoder:
    """Per-step feature transformers plus FC layers; step outputs are summed.

    Step count defaults to the encoder's. With more decoder steps than
    encoder steps, the encoder's step representations are cycled.
    """

    def __init__(self, config: ModelConfig, n_features: int, seed: int,
                 n_steps: int | None = None):
        self.config = config
        self.n_features = n_features
        self.n_steps = config.n_steps if n_steps is None else n_steps
        self.seed = seed
        rng = np.random.default_rng(seed)
        width = config.decision_dim
        vb, mom = config.virtual_batch_size, config.bn_momentum
        self.shared_blocks = [
            GluBlock(width, width, rng, f"dec.shared.{i}", vb, mom)
            for i in range(config.n_shared_blocks)
        ]
        self.transformers: list[FeatureTransformer] = []
        self.heads: list[Linear] = []
        for s in range(self.n_steps):
            own = [
                GluBlock(width, width, rng, f"dec.step{s}.block{i}", vb, mom)
                for i in range(config.n_step_blocks)
            ]
            self.transformers.append(FeatureTransformer(self.shared_blocks, own))
            self.heads.append(Linear(width, n_features, rng, f"dec.step{s}.out"))

    def parameters(self):
        for block in self.shared_blocks:
            yield from block.parameters()
        for s, (ft, head) in enumerate(zip(self.transformers, self.heads)):
            yield from ft.parameters()
            yield from head.parameters()

    def bn_layers(self):
        for block in self.shared_blocks:
            yield block.bn.name, block.bn
        for ft in self.transformers:
            for block in ft.own:
                yield block.bn.name, block.bn

    def forward(self, step_reps: list[Tensor], hidden: np.ndarray, mode: str) -> Tensor:
        if not step_reps:
            raise ValueError("decoder needs at least one step representation")
        if len(step_reps) > self.n_steps:
            # fewer representations than steps is the documented cycling case
            raise ValueError(
                f"decoder has {self.n_steps} steps but got {len(step_reps)} representations"
            )
        total: Tensor | None = None
        for s in range(self.n_steps):
            rep = step_reps[s % len(step_reps)]
            out = self.heads[s](self.transformers[s](rep, mode))
            total = out if total is None else tensor.add(total, out)
        return tensor.mul(total, tensor.constant(hidden))


def reconstruction_loss(reconstructed: Tensor, truth: np.ndarray,
                        hidden: np.ndarray) -> Tensor:
    """Squared error on hidden cells, column-normalized by the ground truth's
    population spread sqrt(sum_b (f - mean)^2); zero-spread columns use 1."""
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape[0] < 2:
        raise ValueError("reconstruction loss needs at least 2 rows")
    colnorm = np.sqrt(((truth - truth.mean(axis=0)) ** 2).sum(axis=0))
    colnorm = np.where(colnorm == 0.0, 1.0, colnorm)
    weights = hidden / colnorm
    diff = tensor.sub(reconstructed, tensor.constant(truth))
    return tensor.tsum(tensor.square(tensor.mul(diff, tensor.constant(weights))))


@dataclass
class PretrainResult:
    encoder: TabularEncoder
    decoder: Decoder
    loss_curve: list[tuple[int, float]] = field(default_factory=list)
    diverged: bool = False


def pretrain(encoder: TabularEncoder, decoder: Decoder, features: np.ndarray,
             schedule: LrSchedule, seed: int, max_iters: int,
             mask_prob: float = 0.5, batch_size: int | None = None) -> PretrainResult:
    """Masked-feature pretraining over an unlabeled feature matrix.

    Per batch: sample the Bernoulli mask, feed the encoder the unmasked cells
    with a matching initial prior, reconstruct the hidden cells from the
    per-step decision representations, and take one Adam step.
    """
    if batch_size is None:
        batch_size = encoder.config.batch_size
    n = features.shape[0]
    batch_size = min(batch_size, n)
    opt = Adam(list(encoder.parameters()) + list(decoder.parameters()))
    rng = np.random.default_rng(seed)
    result = PretrainResult(encoder, decoder)
    t = 0
    while t < max_iters:
        order = rng.permutation(n)
        for start in range(0, n - 1, batch_size):
            if t >= max_iters:
                break
            idx = order[start:start + batch_size]
            if idx.size < 2:
                continue
            raw = features[idx]
            mask = sample_mask(idx.size, encoder.schema.n_features, mask_prob, rng)
            visible = 1.0 - mask.hidden
            truth = encoder.embed(raw).value
            opt.zero_grad()
            out = encoder.forward(raw, "train", prior0=visible, input_mask=visible)
            recon = decoder.forward(out.trace.step_outputs, mask.hidden, "train")
            loss = reconstruction_loss(recon, truth, mask.hidden)
            loss_val = float(loss.value[0, 0])
            if not np.isfinite(loss_val):
                result.diverged = True
                return result
            loss.backward()
            try:
                opt.step(schedule.rate(t))
            except DivergenceError:
                result.diverged = True
                return result
            t += 1
            result.loss_curve.append((t, loss_val))
    return result
