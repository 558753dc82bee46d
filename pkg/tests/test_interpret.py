"""Mask aggregation, importance reports and their export formats."""
import json

import numpy as np
import pytest

from tabseq.data import synth_generate, split
from tabseq.encoder import MaskTrace, ModelConfig, TabularEncoder
from tabseq.interpret import (
    aggregate_mask, compute_importance, export_importance, read_matrix,
    step_contribution,
)
from tabseq.tensor import Tensor


def _trace(masks, outputs):
    return MaskTrace([Tensor(m) for m in masks], [], [Tensor(d) for d in outputs])


def test_step_contribution_relu_sum():
    d = np.array([[1.0, -2.0, 3.0], [-1.0, -1.0, -1.0]])
    assert np.array_equal(step_contribution(d), [4.0, 0.0])
    # permutation invariance of the sum
    assert np.array_equal(step_contribution(d[:, ::-1]), [4.0, 0.0])


def test_single_step_aggregate_is_the_mask():
    mask = np.array([[0.25, 0.75], [1.0, 0.0]])
    agg, _, flags = aggregate_mask(_trace([mask], [np.ones((2, 3))]))
    assert np.allclose(agg, mask, atol=1e-12)
    assert not flags.any()


def test_zero_weight_step_is_ignored():
    m1 = np.array([[1.0, 0.0]])
    m2 = np.array([[0.0, 1.0]])
    d1 = np.array([[2.0, 0.0]])  # eta = 2
    d2 = np.array([[-5.0, -1.0]])  # eta = 0
    agg, _, flags = aggregate_mask(_trace([m1, m2], [d1, d2]))
    assert np.allclose(agg, m1, atol=1e-12)
    assert not flags[0]


def test_equal_weights_average_disjoint_masks():
    m1 = np.array([[1.0, 0.0]])
    m2 = np.array([[0.0, 1.0]])
    ones = np.array([[1.0]])
    agg, _, _ = aggregate_mask(_trace([m1, m2], [ones, ones]))
    assert np.allclose(agg, [[0.5, 0.5]], atol=1e-12)


def test_all_zero_weights_flagged_uniform():
    m = np.array([[0.7, 0.3]])
    dead = np.array([[-1.0, -2.0]])
    agg, _, flags = aggregate_mask(_trace([m], [dead]))
    assert flags[0]
    assert np.allclose(agg, [[0.5, 0.5]], atol=1e-12)


def test_aggregate_invariant_to_common_output_scaling():
    rng = np.random.default_rng(0)
    masks = [rng.dirichlet(np.ones(4), size=6) for _ in range(3)]
    outs = [np.abs(rng.standard_normal((6, 5))) for _ in range(3)]
    base, _, _ = aggregate_mask(_trace(masks, outs))
    scaled, _, _ = aggregate_mask(_trace(masks, [o * 13.0 for o in outs]))
    assert np.allclose(base, scaled, atol=1e-12)


def test_zero_mask_gives_zero_attribution():
    rng = np.random.default_rng(1)
    masks = [rng.dirichlet(np.ones(3), size=4) for _ in range(2)]
    for m in masks:
        m[:, 2] = 0.0
        m /= m.sum(axis=1, keepdims=True)
    outs = [np.abs(rng.standard_normal((4, 5))) for _ in range(2)]
    agg, _, _ = aggregate_mask(_trace(masks, outs))
    assert np.all(agg[:, 2] == 0.0)


def _tiny_model_report(seed=2):
    cfg = ModelConfig(n_steps=2, decision_dim=4, attention_dim=4,
                      n_shared_blocks=1, n_step_blocks=1,
                      batch_size=32, virtual_batch_size=32)
    ds = synth_generate("syn1", 64, seed=seed)
    model = TabularEncoder(ds.schema, cfg, seed=seed)
    model.forward(ds.features[:32], "train")  # initialize BN statistics
    return compute_importance(model, ds), ds


def test_report_rows_on_simplex_and_global_sums_to_one():
    report, ds = _tiny_model_report()
    ok = ~report.uniform_flag
    assert np.max(np.abs(report.aggregate[ok].sum(axis=1) - 1.0)) < 1e-6
    assert report.aggregate.min() >= 0.0
    assert report.global_importance.sum() == pytest.approx(1.0, abs=1e-6)
    assert report.aggregate.shape == (ds.n_rows, 11)
    assert len(report.step_masks) == 2


def test_export_delimited_round_trip(tmp_path):
    report, _ = _tiny_model_report()
    path = tmp_path / "agg.csv"
    export_importance(report, path, "delimited")
    names, matrix = read_matrix(path)
    assert names == report.feature_names
    assert np.max(np.abs(matrix - report.aggregate)) < 1e-9


def test_export_structured_json(tmp_path):
    report, _ = _tiny_model_report()
    path = tmp_path / "agg.json"
    export_importance(report, path, "structured")
    doc = json.loads(path.read_text())
    assert doc["feature_names"] == report.feature_names
    assert len(doc["instances"]) == report.aggregate.shape[0]
    row0 = doc["instances"][0]["attribution"]
    assert row0["X1"] == pytest.approx(report.aggregate[0, 0], abs=1e-12)
    got_global = np.array(doc["global_importance"])
    assert np.allclose(got_global, report.global_importance, atol=1e-12)


def test_export_rejects_bad_format_and_nonfinite(tmp_path):
    report, _ = _tiny_model_report()
    with pytest.raises(ValueError):
        export_importance(report, tmp_path / "x", "parquet")
    report.aggregate[0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        export_importance(report, tmp_path / "x", "delimited")


def test_compute_importance_empty_dataset():
    _, ds = _tiny_model_report()
    empty = ds.take(np.array([], dtype=int))
    cfg = ModelConfig(n_steps=2, decision_dim=4, attention_dim=4,
                      n_shared_blocks=1, n_step_blocks=1)
    model = TabularEncoder(ds.schema, cfg, seed=0)
    with pytest.raises(ValueError):
        compute_importance(model, empty)
