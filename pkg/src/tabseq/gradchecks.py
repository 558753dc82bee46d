"""Finite-difference gradient suites used by tests and the gradcheck command."""
from __future__ import annotations

import numpy as np

from . import tensor
from .data import Column, FeatureSchema
from .decoder import Decoder, reconstruction_loss
from .encoder import ModelConfig, TabularEncoder, supervised_loss
from .layers import BatchNorm, EmbeddingTable, GluBlock, Linear
from .tensor import GradReport, Tensor, grad_check


def _rand(rng, rows, cols, grad=True):
    return Tensor(rng.standard_normal((rows, cols)), requires_grad=grad)


def check_primitives(seed: int = 0, tolerance: float = 1e-4) -> list[GradReport]:
    rng = np.random.default_rng(seed)
    reports = []

    a, b = _rand(rng, 5, 4), _rand(rng, 4, 3)
    wab = tensor.constant(rng.standard_normal((5, 3)))
    reports.append(grad_check(
        lambda: tensor.tsum(tensor.mul(tensor.matmul(a, b), wab)),
        [a, b], tolerance, name="matmul"))

    x, y = _rand(rng, 4, 6), _rand(rng, 4, 6)
    w = tensor.constant(rng.standard_normal((4, 6)))
    for name, fn in [
        ("add", lambda: tensor.tsum(tensor.mul(tensor.add(x, y), w))),
        ("sub", lambda: tensor.tsum(tensor.mul(tensor.sub(x, y), w))),
        ("mul", lambda: tensor.tsum(tensor.mul(tensor.mul(x, y), w))),
        ("div", lambda: tensor.tsum(tensor.mul(tensor.div(
            x, tensor.add_scalar(tensor.square(y), 1.0)), w))),
        ("relu", lambda: tensor.tsum(tensor.mul(tensor.relu(x), w))),
        ("sigmoid", lambda: tensor.tsum(tensor.mul(tensor.sigmoid(x), w))),
        ("exp", lambda: tensor.tsum(tensor.mul(tensor.exp(x), w))),
        ("log", lambda: tensor.tsum(tensor.mul(tensor.log(
            tensor.add_scalar(tensor.square(x), 0.5)), w))),
        ("sqrt", lambda: tensor.tsum(tensor.mul(tensor.sqrt(
            tensor.add_scalar(tensor.square(x), 0.5)), w))),
        ("square", lambda: tensor.tsum(tensor.mul(tensor.square(x), w))),
        ("scale", lambda: tensor.tsum(tensor.mul(tensor.scale(x, -1.7), w))),
        ("slice_concat", lambda: tensor.tsum(tensor.mul(tensor.concat_cols(
            [tensor.slice_cols(x, 3, 6), tensor.slice_cols(x, 0, 3)]), w))),
        ("sum_axis0", lambda: tensor.tsum(tensor.square(tensor.tsum(x, axis=0)))),
        ("sum_axis1", lambda: tensor.tsum(tensor.square(tensor.tsum(x, axis=1)))),
    ]:
        reports.append(grad_check(fn, [x, y], tolerance, name=name))

    row = Tensor(rng.standard_normal((1, 6)), requires_grad=True)
    reports.append(grad_check(
        lambda: tensor.tsum(tensor.mul(tensor.add(x, row), w)),
        [x, row], tolerance, name="row_broadcast_add"))

    z = _rand(rng, 6, 5)
    v = tensor.constant(rng.standard_normal((6, 5)))
    reports.append(grad_check(
        lambda: tensor.tsum(tensor.mul(tensor.sparsemax(z), v)),
        [z], tolerance, name="sparsemax"))

    logits = _rand(rng, 6, 3)
    labels = rng.integers(0, 3, size=6)
    reports.append(grad_check(
        lambda: tensor.softmax_cross_entropy(logits, labels),
        [logits], tolerance, name="softmax_cross_entropy"))
    return reports


def check_layers(seed: int = 0, tolerance: float = 1e-4) -> list[GradReport]:
    rng = np.random.default_rng(seed)
    reports = []

    fc = Linear(5, 3, rng, "fc")
    x = _rand(rng, 6, 5)
    w = tensor.constant(rng.standard_normal((6, 3)))
    reports.append(grad_check(
        lambda: tensor.tsum(tensor.mul(fc(x), w)),
        [x, fc.weight, fc.bias], tolerance, name="linear"))

    bn = BatchNorm(4, "bn", virtual_batch=3, momentum=0.9)
    xb = _rand(rng, 7, 4)
    wb = tensor.constant(rng.standard_normal((7, 4)))
    reports.append(grad_check(
        lambda: tensor.tsum(tensor.mul(bn(xb, "train"), wb)),
        [xb, bn.gain, bn.shift], tolerance, name="ghost_batch_norm_train"))
    reports.append(grad_check(
        lambda: tensor.tsum(tensor.mul(bn(xb, "infer"), wb)),
        [xb, bn.gain, bn.shift], tolerance, name="batch_norm_infer"))

    glu = GluBlock(5, 4, rng, "glu", virtual_batch=4, momentum=0.9)
    xg = _rand(rng, 8, 5)
    wg = tensor.constant(rng.standard_normal((8, 4)))
    params = [xg] + [t for _, t in glu.parameters()]
    reports.append(grad_check(
        lambda: tensor.tsum(tensor.mul(glu(xg, "train"), wg)),
        params, tolerance, name="glu_block"))

    table = EmbeddingTable(4, rng, "embed")
    codes = rng.integers(0, 4, size=9)
    we = tensor.constant(rng.standard_normal((9, 1)))
    reports.append(grad_check(
        lambda: tensor.tsum(tensor.mul(table(codes), we)),
        [table.table], tolerance, name="embedding_lookup"))
    return reports


def _tiny_setup(seed: int = 0):
    schema = FeatureSchema([Column(f"f{i}", "numeric") for i in range(4)],
                           "label", "classify", 2)
    config = ModelConfig(
        n_steps=2, decision_dim=3, attention_dim=3, relaxation=1.5,
        sparsity_weight=0.01, n_shared_blocks=1, n_step_blocks=1,
        batch_size=4, virtual_batch_size=4, bn_momentum=0.9,
        task="classify", out_dim=2,
    )
    model = TabularEncoder(schema, config, seed=seed)
    rng = np.random.default_rng(seed + 100)
    X = rng.standard_normal((4, 4))
    y = rng.integers(0, 2, size=4)
    return model, X, y


def check_encoder(seed: int = 0, tolerance: float = 1e-3) -> list[GradReport]:
    model, X, y = _tiny_setup(seed)
    cfg = model.config
    params = [t for _, t in model.parameters()]

    def loss():
        out = model.forward(X, "train")
        return supervised_loss(out.predictions, y, cfg.task,
                               cfg.sparsity_weight, out.sparse_loss)

    return [grad_check(loss, params, tolerance, name="encoder_full")]


def check_decoder(seed: int = 0, tolerance: float = 1e-4) -> list[GradReport]:
    rng = np.random.default_rng(seed)
    config = ModelConfig(
        n_steps=2, decision_dim=3, attention_dim=3, n_shared_blocks=1,
        n_step_blocks=1, batch_size=4, virtual_batch_size=4,
    )
    dec = Decoder(config, n_features=4, seed=seed)
    reps = [_rand(rng, 5, 3) for _ in range(2)]
    truth = rng.standard_normal((5, 4))
    hidden = (rng.random((5, 4)) < 0.5).astype(float)
    params = reps + [t for _, t in dec.parameters()]

    def loss():
        recon = dec.forward(reps, hidden, "train")
        return reconstruction_loss(recon, truth, hidden)

    return [grad_check(loss, params, tolerance, name="decoder_full")]


def run_scope(scope: str, inject_fault: bool = False) -> list[GradReport]:
    if scope == "layers":
        reports = check_primitives() + check_layers()
    elif scope == "encoder":
        reports = check_encoder()
    elif scope == "decoder":
        reports = check_decoder()
    else:
        raise ValueError(f"unknown scope {scope!r}")
    if inject_fault:
        # deliberately corrupt one report so callers can verify the exit path
        bad = reports[0]
        reports[0] = GradReport(bad.op_name + " (injected fault)",
                                max(bad.max_rel_error, 1.0) * 2.0,
                                bad.worst_coordinate, False)
    return reports
