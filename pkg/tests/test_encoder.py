"""Encoder architecture: masks, priors, parameter counts, sparsity loss."""
import numpy as np
import pytest

from tabseq import checkpoint as ckpt
from tabseq import tensor
from tabseq.data import Column, FeatureSchema
from tabseq.encoder import (
    ConfigError, ModelConfig, SQRT_HALF, TabularEncoder, sparsity_loss,
    supervised_loss, task_loss,
)
from tabseq.tensor import Tensor


def _schema(n_features=11):
    cols = [Column(f"X{i}", "numeric") for i in range(1, n_features + 1)]
    return FeatureSchema(cols, "label", "classify", 2)


def _config(**kw):
    base = dict(n_steps=2, decision_dim=4, attention_dim=4, relaxation=1.5,
                sparsity_weight=0.01, n_shared_blocks=1, n_step_blocks=1,
                batch_size=8, virtual_batch_size=8, bn_momentum=0.9,
                task="classify", out_dim=2)
    base.update(kw)
    return ModelConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        _config(n_steps=0)
    with pytest.raises(ConfigError):
        _config(relaxation=0.5)
    with pytest.raises(ConfigError):
        _config(sparsity_weight=-1.0)
    with pytest.raises(ConfigError):
        _config(task="rank")
    with pytest.raises(ConfigError):
        _config(out_dim=1)
    roundtrip = ModelConfig.from_dict(_config().to_dict())
    assert roundtrip == _config()


def _count_params(D, n_steps, n_d, n_a, shared, step, out_dim):
    """Closed-form parameter count for the architecture conventions here."""
    width = n_d + n_a
    glu = lambda fan_in: fan_in * 2 * width + 2 * width + 2 * (2 * width)
    total = 2 * D  # input BN gain/shift
    total += sum(glu(D if i == 0 else width) for i in range(shared))
    per_step_blocks = sum(
        glu(D if shared + i == 0 else width) for i in range(step))
    total += per_step_blocks * (n_steps + 1)  # bootstrap plus each step
    attentive = (n_a * D + D) + 2 * D  # FC plus its BN
    total += attentive * n_steps
    total += n_d * out_dim + out_dim  # head
    return total


def test_parameter_count_matches_closed_form():
    for cfg in (_config(), _config(n_steps=4, decision_dim=16, attention_dim=16,
                                   n_shared_blocks=2, n_step_blocks=2)):
        model = TabularEncoder(_schema(), cfg, seed=0)
        want = _count_params(11, cfg.n_steps, cfg.decision_dim, cfg.attention_dim,
                             cfg.n_shared_blocks, cfg.n_step_blocks, cfg.out_dim)
        assert model.n_parameters() == want


def test_parameter_count_matches_published_scale():
    # the 11-feature synthetic presets are reported at roughly 26k parameters
    # (4 steps) and 31k (5 steps); exact counts pin the layer conventions
    cfg4 = _config(n_steps=4, decision_dim=16, attention_dim=16,
                   n_shared_blocks=2, n_step_blocks=2)
    cfg5 = _config(n_steps=5, decision_dim=16, attention_dim=16,
                   n_shared_blocks=2, n_step_blocks=2, relaxation=1.5)
    assert TabularEncoder(_schema(), cfg4, seed=0).n_parameters() == 26428
    assert TabularEncoder(_schema(), cfg5, seed=0).n_parameters() == 31117
    assert abs(26428 - 26000) / 26000 < 0.15
    assert abs(31117 - 31000) / 31000 < 0.15


def test_same_seed_same_init():
    a = TabularEncoder(_schema(), _config(), seed=7)
    b = TabularEncoder(_schema(), _config(), seed=7)
    for (na, ta), (nb, tb) in zip(a.parameters(), b.parameters()):
        assert na == nb
        assert np.array_equal(ta.value, tb.value)


def test_mask_rows_sum_to_one():
    model = TabularEncoder(_schema(), _config(), seed=1)
    X = np.random.default_rng(2).standard_normal((8, 11))
    out = model.forward(X, "train")
    for mask in out.trace.masks:
        assert np.max(np.abs(mask.value.sum(axis=1) - 1.0)) < 1e-6
        assert mask.value.min() >= 0.0


def test_prior_update_rule():
    cfg = _config()
    model = TabularEncoder(_schema(), cfg, seed=1)
    X = np.random.default_rng(3).standard_normal((8, 11))
    out = model.forward(X, "train")
    prior = np.ones((8, 11))
    for mask, recorded in zip(out.trace.masks, out.trace.priors):
        prior = prior * (cfg.relaxation - mask.value)
        assert np.allclose(prior, recorded, atol=1e-12)


def test_relaxation_one_forces_single_use():
    # gamma = 1: once a feature is fully selected its prior hits zero and no
    # later mask may touch it
    cfg = _config(n_steps=3, relaxation=1.0)
    model = TabularEncoder(_schema(), cfg, seed=4)
    X = np.random.default_rng(4).standard_normal((16, 11))
    out = model.forward(X, "train")
    spent = np.zeros((16, 11), dtype=bool)
    for mask in out.trace.masks:
        assert np.all(mask.value[spent] == 0.0)
        spent |= mask.value >= 1.0 - 1e-12


def test_zero_prior_columns_give_zero_masks_and_zero_input_grad():
    cfg = _config()
    model = TabularEncoder(_schema(), cfg, seed=5)
    rng = np.random.default_rng(5)
    X = rng.standard_normal((8, 11))
    prior0 = np.ones((8, 11))
    prior0[:, [2, 7]] = 0.0
    visible = prior0.copy()
    out = model.forward(X, "train", prior0=prior0, input_mask=visible)
    for mask in out.trace.masks:
        assert np.all(mask.value[:, [2, 7]] == 0.0)
    # gradient with respect to the excluded input columns is exactly zero
    features = Tensor(X, requires_grad=True)
    masked = tensor.mul(features, tensor.constant(visible))
    x = model.input_bn(masked, "train")
    boot = model.bootstrap_transformer(x, "train")
    carried = tensor.slice_cols(boot, cfg.decision_dim,
                                cfg.decision_dim + cfg.attention_dim)
    prior = tensor.constant(prior0)
    total = None
    for at, ft in zip(model.attentives, model.step_transformers):
        mask = at(carried, prior, "train")
        prior = tensor.mul(prior, tensor.add_scalar(tensor.scale(mask, -1.0),
                                                    cfg.relaxation))
        outt = ft(tensor.mul(mask, x), "train")
        d = tensor.relu(tensor.slice_cols(outt, 0, cfg.decision_dim))
        carried = tensor.slice_cols(outt, cfg.decision_dim,
                                    cfg.decision_dim + cfg.attention_dim)
        total = d if total is None else tensor.add(total, d)
    tensor.tsum(model.head(total)).backward()
    assert np.all(features.grad[:, [2, 7]] == 0.0)


def test_prior0_validation():
    model = TabularEncoder(_schema(), _config(), seed=0)
    X = np.zeros((4, 11))
    with pytest.raises(tensor.ShapeError):
        model.forward(X, "train", prior0=np.ones((4, 5)))
    with pytest.raises(ValueError):
        model.forward(X, "train", prior0=np.full((4, 11), 2.0))


def test_single_step_model_runs():
    model = TabularEncoder(_schema(), _config(n_steps=1), seed=0)
    out = model.forward(np.random.default_rng(0).standard_normal((8, 11)), "train")
    assert len(out.trace.masks) == 1
    assert out.predictions.shape == (8, 2)


def test_residual_scaling_closed_form():
    # with all GLU weights zeroed and unit BN the residual chain reduces to
    # out = x * sqrt(0.5)^(n_blocks - 1) applied to a zero first-block output,
    # so instead check directly on a two-block transformer with identity data
    from tabseq.encoder import FeatureTransformer
    from tabseq.layers import GluBlock
    rng = np.random.default_rng(6)
    b1 = GluBlock(3, 3, rng, "b1")
    b2 = GluBlock(3, 3, rng, "b2")
    for blk in (b2,):
        blk.fc.weight.value[:] = 0.0
        blk.fc.bias.value[:] = 0.0
    ft = FeatureTransformer([], [b1, b2])
    x = Tensor(rng.standard_normal((6, 3)))
    # zero weights make block2's BN input constant zero, so its linear half
    # is zero and the block contributes nothing: out = (0 + b1(x)) * sqrt(0.5)
    got = ft(x, "train").value
    b1_alone = GluBlock(3, 3, np.random.default_rng(6), "b1")
    want = b1_alone(x, "train").value * SQRT_HALF
    assert np.allclose(got, want, atol=1e-12)


def test_sparsity_loss_uniform_and_one_hot():
    # uniform mask rows over 4 features: entropy = log 4 per row per step
    uniform = Tensor(np.full((5, 4), 0.25))
    loss = sparsity_loss([uniform, uniform], entropy_eps=1e-15)
    assert loss.value[0, 0] == pytest.approx(np.log(4.0), rel=1e-9)
    # exact one-hot rows: entropy 0 up to the epsilon guard
    onehot = Tensor(np.eye(4)[[0, 1, 2, 3, 0]])
    assert sparsity_loss([onehot], 1e-15).value[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_sparsity_loss_matches_independent_entropy():
    rng = np.random.default_rng(7)
    rows = rng.random((6, 5))
    rows /= rows.sum(axis=1, keepdims=True)
    masks = [Tensor(rows), Tensor(rows[::-1].copy())]
    eps = 1e-15
    want = np.mean([
        -np.sum(m.value * np.log(m.value + eps), axis=1).mean() for m in masks
    ])
    got = sparsity_loss(masks, eps).value[0, 0]
    assert got == pytest.approx(want, rel=1e-12)


def test_supervised_loss_lambda_zero_is_pure_task_loss():
    rng = np.random.default_rng(8)
    preds = Tensor(rng.standard_normal((6, 2)), requires_grad=True)
    y = rng.integers(0, 2, size=6)
    sparse = Tensor([[123.0]])
    with_zero = supervised_loss(preds, y, "classify", 0.0, sparse)
    base = task_loss(preds, y, "classify")
    assert with_zero.value[0, 0] == base.value[0, 0]


def test_regression_task_loss_shape_check():
    preds = Tensor(np.zeros((4, 1)))
    assert task_loss(preds, np.zeros(4), "regress").value[0, 0] == 0.0
    with pytest.raises(tensor.ShapeError):
        task_loss(preds, np.zeros((4, 2)), "regress")


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = TabularEncoder(_schema(), _config(), seed=9)
    model.forward(np.random.default_rng(9).standard_normal((8, 11)), "train")
    path = tmp_path / "m.npz"
    ckpt.save_encoder(model, path)
    again = ckpt.load_encoder(path)
    for (na, ta), (nb, tb) in zip(model.parameters(), again.parameters()):
        assert na == nb
        assert np.array_equal(ta.value, tb.value)
    for (na, ba), (nb, bb) in zip(model.bn_layers(), again.bn_layers()):
        assert np.array_equal(ba.running_mean, bb.running_mean)
        assert np.array_equal(ba.running_var, bb.running_var)
    X = np.random.default_rng(10).standard_normal((8, 11))
    assert np.array_equal(model.forward(X, "infer").predictions.value,
                          again.forward(X, "infer").predictions.value)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "bad.npz"
    np.savez(path, meta=np.frombuffer(b'{"format_version": 99}', dtype=np.uint8))
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_encoder(path)


def test_categorical_embedding_path():
    cols = [Column("n", "numeric"), Column("c", "categorical", 4, ["a", "b", "c", "d"])]
    schema = FeatureSchema(cols, "y", "classify", 2)
    model = TabularEncoder(schema, _config(), seed=11)
    X = np.column_stack([np.random.default_rng(11).standard_normal(8),
                         np.array([0, 1, 2, 3, 0, 1, 2, 3])])
    out = model.forward(X, "train")
    assert out.predictions.shape == (8, 2)
    table = model.embeddings[1].table.value
    embedded = model.embed(X).value
    assert np.array_equal(embedded[:, 1], table[X[:, 1].astype(int), 0])
