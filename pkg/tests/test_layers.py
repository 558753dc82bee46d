"""Linear, (ghost) batch norm, GLU blocks and embeddings."""
import numpy as np
import pytest

from tabseq import tensor
from tabseq.layers import (
    BatchNorm, EmbeddingTable, GluBlock, Linear, virtual_batch_slices,
)
from tabseq.tensor import Tensor


def test_linear_matches_manual_affine():
    rng = np.random.default_rng(0)
    fc = Linear(4, 3, rng, "fc")
    x = rng.standard_normal((5, 4))
    got = fc(Tensor(x)).value
    want = x @ fc.weight.value + fc.bias.value
    assert np.array_equal(got, want)


def test_linear_shape_error_names_layer():
    fc = Linear(4, 3, np.random.default_rng(0), "enc.fc")
    with pytest.raises(tensor.ShapeError, match="enc.fc"):
        fc(Tensor(np.zeros((2, 5))))


def test_virtual_batch_slices_cases():
    assert virtual_batch_slices(10, None) == [(0, 10)]
    assert virtual_batch_slices(10, 5) == [(0, 5), (5, 10)]
    # remainder of >= 2 rows stands alone
    assert virtual_batch_slices(11, 4) == [(0, 4), (4, 8), (8, 11)]
    # singleton remainder merges into the previous group
    assert virtual_batch_slices(9, 4) == [(0, 4), (4, 9)]
    with pytest.raises(tensor.ShapeError):
        virtual_batch_slices(1, 4)
    with pytest.warns(UserWarning):
        assert virtual_batch_slices(3, 8) == [(0, 3)]


def _plain_bn_oracle(x, eps=1e-5):
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    return (x - mean) / np.sqrt(var + eps)


def test_plain_bn_matches_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((8, 3)) * 2.0 + 1.0
    bn = BatchNorm(3, "bn")
    out = bn(Tensor(x), "train").value
    assert np.allclose(out, _plain_bn_oracle(x), atol=1e-12)


def test_ghost_bn_matches_independent_halves():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((8, 3))
    ghost = BatchNorm(3, "ghost", virtual_batch=4)
    out = ghost(Tensor(x), "train").value
    want = np.vstack([_plain_bn_oracle(x[:4]), _plain_bn_oracle(x[4:])])
    assert np.allclose(out, want, atol=1e-12)


def test_ghost_bn_with_full_virtual_batch_equals_plain():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 4))
    plain = BatchNorm(4, "plain")(Tensor(x), "train").value
    ghost = BatchNorm(4, "ghost", virtual_batch=6)(Tensor(x), "train").value
    assert np.array_equal(plain, ghost)


def test_bn_constant_column_maps_to_shift():
    bn = BatchNorm(2, "bn")
    bn.shift.value = np.array([[0.5, -0.5]])
    x = np.column_stack([np.full(5, 3.0), np.arange(5.0)])
    out = bn(Tensor(x), "train").value
    assert np.allclose(out[:, 0], 0.5, atol=1e-9)


def test_bn_running_stats_update():
    bn = BatchNorm(1, "bn", momentum=0.9)
    x = np.arange(10.0).reshape(-1, 1)
    bn(Tensor(x), "train")
    want_mean = 0.9 * 0.0 + 0.1 * x.mean()
    want_var = 0.9 * 1.0 + 0.1 * x.var()
    assert bn.running_mean[0, 0] == pytest.approx(want_mean)
    assert bn.running_var[0, 0] == pytest.approx(want_var)


def test_bn_infer_before_train_raises():
    bn = BatchNorm(2, "bn")
    with pytest.raises(RuntimeError, match="inference before"):
        bn(Tensor(np.zeros((3, 2))), "infer")


def test_bn_infer_uses_running_stats():
    bn = BatchNorm(2, "bn", momentum=0.5)
    rng = np.random.default_rng(4)
    bn(Tensor(rng.standard_normal((16, 2))), "train")
    x = rng.standard_normal((5, 2))
    out = bn(Tensor(x), "infer").value
    want = (x - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
    assert np.allclose(out, want, atol=1e-12)


def test_bn_state_round_trip():
    bn = BatchNorm(2, "bn")
    bn(Tensor(np.random.default_rng(5).standard_normal((8, 2))), "train")
    state = bn.state()
    other = BatchNorm(2, "bn")
    other.load_state(state)
    assert np.array_equal(other.running_mean, bn.running_mean)
    assert np.array_equal(other.running_var, bn.running_var)
    assert other.initialized


def test_glu_block_output_bounds():
    # |out| <= |BN output linear half| since the gate lies in (0, 1)
    rng = np.random.default_rng(6)
    glu = GluBlock(5, 4, rng, "glu")
    x = Tensor(rng.standard_normal((10, 5)))
    pre = glu.bn(glu.fc(x), "train").value
    glu2 = GluBlock(5, 4, np.random.default_rng(6), "glu")
    out = glu2(x, "train").value
    assert np.all(np.abs(out) <= np.abs(pre[:, :4]) + 1e-12)


def test_embedding_matches_one_hot_matmul():
    rng = np.random.default_rng(7)
    table = EmbeddingTable(5, rng, "embed")
    codes = np.array([0, 3, 3, 1, 4])
    got = table(codes).value
    onehot = np.eye(5)[codes]
    assert np.array_equal(got, onehot @ table.table.value)


def test_embedding_init_range():
    table = EmbeddingTable(1000, np.random.default_rng(8), "embed")
    assert table.table.value.min() >= -0.1
    assert table.table.value.max() <= 0.1
