"""Sequential-attention encoder: per-step masking, prior bookkeeping, feature
transformation, decision aggregation, sparsity loss and the output head."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor
from .data import FeatureSchema
from .layers import BatchNorm, EmbeddingTable, GluBlock, Linear
from .tensor import Tensor

# Added to prior-scaled mask logits wherever the prior is exactly zero, so the
# projection can never place mass on a spent or hidden feature.
_EXCLUDED_LOGIT = -1e12

SQRT_HALF = math.sqrt(0.5)


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_steps: int = 3
    decision_dim: int = 8
    attention_dim: int = 8
    relaxation: float = 1.5
    sparsity_weight: float = 0.0001
    entropy_eps: float = 1e-15
    n_shared_blocks: int = 2
    n_step_blocks: int = 2
    batch_size: int = 256
    virtual_batch_size: int = 128
    bn_momentum: float = 0.9
    task: str = "classify"
    out_dim: int = 2

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.relaxation < 1.0:
            raise ConfigError(f"relaxation must be >= 1, got {self.relaxation}")
        if self.sparsity_weight < 0.0:
            raise ConfigError("sparsity_weight must be >= 0")
        if self.decision_dim < 1 or self.attention_dim < 1:
            raise ConfigError("decision_dim and attention_dim must be >= 1")
        if self.n_shared_blocks + self.n_step_blocks < 1:
            raise ConfigError("feature transformer needs at least one block")
        if not (0.0 < self.bn_momentum <= 1.0):
            raise ConfigError("bn_momentum must be in (0, 1]")
        if self.task not in ("classify", "regress"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.out_dim < 1 or (self.task == "classify" and self.out_dim < 2):
            raise ConfigError(f"bad out_dim {self.out_dim} for task {self.task}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(doc: dict) -> "ModelConfig":
        return ModelConfig(**doc)


class FeatureTransformer:
    """Chain of GLU blocks; the leading blocks may be shared across steps.

    The first block of the chain changes the width and carries no residual;
    every later block is width-preserving and applies
    out = (block(out) + out) * sqrt(0.5).
    """

    def __init__(self, shared: list[GluBlock], own: list[GluBlock]):
        if not shared and not own:
            raise ConfigError("feature transformer needs at least one block")
        self.blocks = list(shared) + list(own)
        self.own = list(own)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        out = self.blocks[0](x, mode)
        for block in self.blocks[1:]:
            out = tensor.scale(tensor.add(block(out, mode), out), SQRT_HALF)
        return out

    def parameters(self):
        for block in self.own:
            yield from block.parameters()


class AttentiveTransformer:
    """FC + ghost BN mapping the carried state to mask logits over features."""

    def __init__(self, attention_dim: int, n_features: int, rng, name: str,
                 virtual_batch: int, momentum: float):
        self.fc = Linear(attention_dim, n_features, rng, f"{name}.fc")
        self.bn = BatchNorm(n_features, f"{name}.bn", virtual_batch, momentum)

    def __call__(self, carried: Tensor, prior: Tensor, mode: str) -> Tensor:
        logits = self.bn(self.fc(carried), mode)
        scaled = tensor.mul(prior, logits)
        zero = prior.value == 0.0
        if zero.any():
            scaled = tensor.add(scaled, tensor.constant(_EXCLUDED_LOGIT * zero))
        return tensor.sparsemax(scaled)

    def parameters(self):
        yield from self.fc.parameters()
        yield from self.bn.parameters()


@dataclass
class MaskTrace:
    """Per-step interpretability record of one forward pass."""

    masks: list[Tensor]  # M[i], (B, D)
    priors: list[np.ndarray]  # P[i] after the step's update, (B, D)
    step_outputs: list[Tensor]  # d[i], (B, decision_dim)


@dataclass
class EncoderOutput:
    predictions: Tensor
    decision_embedding: Tensor
    trace: MaskTrace
    sparse_loss: Tensor


class TabularEncoder:
    """All trainable state of the encoder, built deterministically from a seed."""

    def __init__(self, schema: FeatureSchema, config: ModelConfig, seed: int):
        self.schema = schema
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        D = schema.n_features
        width = config.decision_dim + config.attention_dim
        vb, mom = config.virtual_batch_size, config.bn_momentum

        self.embeddings: dict[int, EmbeddingTable] = {}
        for i in schema.categorical_indices():
            col = schema.columns[i]
            self.embeddings[i] = EmbeddingTable(col.cardinality, rng, f"embed.{col.name}")

        # Input-feature BN is plain (full batch); all other BN layers are ghost.
        self.input_bn = BatchNorm(D, "input_bn", virtual_batch=None, momentum=mom)

        self.shared_blocks = [
            GluBlock(D if i == 0 else width, width, rng, f"shared.{i}", vb, mom)
            for i in range(config.n_shared_blocks)
        ]

        def step_blocks(tag: str) -> list[GluBlock]:
            lead = config.n_shared_blocks
            return [
                GluBlock(D if lead + i == 0 else width, width, rng,
                         f"{tag}.block{i}", vb, mom)
                for i in range(config.n_step_blocks)
            ]

        self.bootstrap_transformer = FeatureTransformer(self.shared_blocks, step_blocks("step0"))
        self.attentives: list[AttentiveTransformer] = []
        self.step_transformers: list[FeatureTransformer] = []
        for s in range(1, config.n_steps + 1):
            self.attentives.append(
                AttentiveTransformer(config.attention_dim, D, rng, f"attn.{s}", vb, mom)
            )
            self.step_transformers.append(
                FeatureTransformer(self.shared_blocks, step_blocks(f"step{s}"))
            )
        self.head = Linear(config.decision_dim, config.out_dim, rng, "head")

    # -- parameter / state enumeration ------------------------------------
    def parameters(self):
        for i in sorted(self.embeddings):
            yield from self.embeddings[i].parameters()
        yield from self.input_bn.parameters()
        for block in self.shared_blocks:
            yield from block.parameters()
        yield from self.bootstrap_transformer.parameters()
        for at, ft in zip(self.attentives, self.step_transformers):
            yield from at.parameters()
            yield from ft.parameters()
        yield from self.head.parameters()

    def encoder_parameters(self):
        """Parameters transferred from pretraining: everything but the head."""
        head = {id(t) for _, t in self.head.parameters()}
        for name, t in self.parameters():
            if id(t) not in head:
                yield name, t

    def bn_layers(self):
        yield self.input_bn.name, self.input_bn
        for block in self.shared_blocks:
            yield block.bn.name, block.bn
        for ft in [self.bootstrap_transformer] + self.step_transformers:
            for block in ft.own:
                yield block.bn.name, block.bn
        for at in self.attentives:
            yield at.bn.name, at.bn

    def n_parameters(self) -> int:
        return sum(t.value.size for _, t in self.parameters())

    # -- forward -----------------------------------------------------------
    def embed(self, raw: np.ndarray) -> Tensor:
        """Map raw feature rows (categoricals as codes) to the real-valued
        feature matrix the network consumes."""
        if raw.shape[1] != self.schema.n_features:
            raise tensor.ShapeError(
                f"expected {self.schema.n_features} feature columns, got {raw.shape[1]}"
            )
        if not self.embeddings:
            return tensor.constant(np.asarray(raw, dtype=np.float64))
        parts = []
        for i in range(self.schema.n_features):
            if i in self.embeddings:
                parts.append(self.embeddings[i](raw[:, i].astype(np.int64)))
            else:
                parts.append(tensor.constant(raw[:, i:i + 1]))
        return tensor.concat_cols(parts)

    def forward(self, raw: np.ndarray, mode: str, prior0: np.ndarray | None = None,
                input_mask: np.ndarray | None = None) -> EncoderOutput:
        cfg = self.config
        features = self.embed(raw)
        if input_mask is not None:
            features = tensor.mul(features, tensor.constant(input_mask))
        x = self.input_bn(features, mode)

        boot = self.bootstrap_transformer(x, mode)
        carried = tensor.slice_cols(boot, cfg.decision_dim,
                                    cfg.decision_dim + cfg.attention_dim)

        if prior0 is None:
            prior0 = np.ones((x.shape[0], x.shape[1]))
        else:
            if prior0.shape != x.value.shape:
                raise tensor.ShapeError(
                    f"prior0 shape {prior0.shape} != features {x.value.shape}"
                )
            if prior0.min() < 0.0 or prior0.max() > 1.0:
                raise ValueError("prior0 entries must lie in [0, 1]")
        prior = tensor.constant(prior0)

        masks: list[Tensor] = []
        priors: list[np.ndarray] = []
        step_outputs: list[Tensor] = []
        decision_sum: Tensor | None = None
        for at, ft in zip(self.attentives, self.step_transformers):
            mask = at(carried, prior, mode)
            # P[i] = P[i-1] * (relaxation - M[i])
            prior = tensor.mul(prior, tensor.add_scalar(tensor.scale(mask, -1.0),
                                                        cfg.relaxation))
            out = ft(tensor.mul(mask, x), mode)
            d = tensor.slice_cols(out, 0, cfg.decision_dim)
            carried = tensor.slice_cols(out, cfg.decision_dim,
                                        cfg.decision_dim + cfg.attention_dim)
            contrib = tensor.relu(d)
            decision_sum = contrib if decision_sum is None else tensor.add(decision_sum, contrib)
            masks.append(mask)
            priors.append(prior.value)
            step_outputs.append(d)

        predictions = self.head(decision_sum)
        sparse = sparsity_loss(masks, cfg.entropy_eps)
        trace = MaskTrace(masks, priors, step_outputs)
        return EncoderOutput(predictions, decision_sum, trace, sparse)


def sparsity_loss(masks: list[Tensor], entropy_eps: float) -> Tensor:
    """Mean per-step, per-row entropy of the mask rows."""
    batch = masks[0].shape[0]
    total: Tensor | None = None
    for mask in masks:
        term = tensor.tsum(
            tensor.mul(tensor.scale(mask, -1.0), tensor.log(tensor.add_scalar(mask, entropy_eps)))
        )
        total = term if total is None else tensor.add(total, term)
    return tensor.scale(total, 1.0 / (len(masks) * batch))


def task_loss(predictions: Tensor, targets: np.ndarray, task: str) -> Tensor:
    if task == "classify":
        return tensor.softmax_cross_entropy(predictions, targets)
    target = np.asarray(targets, dtype=np.float64)
    if target.ndim == 1:
        target = target.reshape(-1, 1)
    if target.shape != predictions.shape:
        raise tensor.ShapeError(
            f"regression targets {target.shape} != predictions {predictions.shape}"
        )
    return tensor.tmean(tensor.square(tensor.sub(predictions, tensor.constant(target))))


def supervised_loss(predictions: Tensor, targets: np.ndarray, task: str,
                    sparsity_weight: float, sparse_loss: Tensor) -> Tensor:
    base = task_loss(predictions, targets, task)
    if sparsity_weight == 0.0:
        return base
    return tensor.add(base, tensor.scale(sparse_loss, sparsity_weight))
