import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brainrefine.bold_dataset import split_trs
from brainrefine.neuro_eval import (
    DEFAULT_ALPHAS, context_label, context_sweep, encode_features, encoding_scores_from_features,
    energy_probe_task, fit_ridge, layer_weight_change_rate, layerwise_encoding_scores, paired_t_test_one_tailed,
    pcc, pcc_columns, probe_layer_weights, probe_weights_from_activations, ridge_path,
)
from brainrefine.trainer import RefineConfig, StageConfig

from conftest import make_tiny_model
from oracles import pearson, ridge_gradient_descent, student_t_upper_tail

# -- ridge ------------------------------------------------------------------------------


def test_ridge_hand_example():
    assert fit_ridge([[1.0], [2.0]], [1.0, 2.0], 1.0)[0] == pytest.approx(5 / 6)


def test_ridge_interpolation_and_shrinkage():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(6, 6))
    y = rng.normal(size=6)
    assert np.abs(X @ fit_ridge(X, y, 0.0) - y).max() < 1e-10
    assert np.linalg.norm(fit_ridge(rng.normal(size=(30, 4)), rng.normal(size=30), 1e12)) < 1e-6


def test_ridge_singular_alpha_zero():
    with pytest.raises(np.linalg.LinAlgError):
        fit_ridge(np.ones((4, 2)), np.ones(4), 0.0)
    with pytest.raises(ValueError):
        fit_ridge(np.ones((4, 2)), np.ones(4), -1.0)


def test_ridge_matches_gradient_descent():
    rng = np.random.default_rng(1)
    for _ in range(10):
        X, y, a = rng.normal(size=(20, 5)), rng.normal(size=20), rng.uniform(0.1, 5)
        w = fit_ridge(X, y, a)
        assert np.linalg.norm(w - ridge_gradient_descent(X, y, a)) <= 1e-6 * np.linalg.norm(w)


def test_ridge_path_matches_closed_form():
    rng = np.random.default_rng(2)
    X, Y = rng.normal(size=(25, 4)), rng.normal(size=(25, 3))
    W = ridge_path(X, Y, [0.1, 10.0])
    np.testing.assert_allclose(W[1], fit_ridge(X, Y, 10.0), rtol=1e-10, atol=1e-12)


# -- pcc -----------------------------------------------------------------------------------


def test_pcc_examples():
    x = np.array([1.0, 2.0, 3.0])
    assert pcc(x, x) == pytest.approx(1.0)
    assert pcc(x, -x) == pytest.approx(-1.0)
    assert pcc([1, 2, 3], [1, 2, 4]) == pytest.approx(0.9820, abs=1e-4)
    assert pcc([1, 2, 3], [1, 2, 4]) == pytest.approx(pearson([1, 2, 3], [1, 2, 4]), abs=1e-12)
    with pytest.raises(ValueError):
        pcc([1, 1, 1], [1, 2, 3])


@settings(max_examples=50)
@given(st.floats(0.01, 100), st.floats(-100, 100), st.integers(0, 10**6))
def test_pcc_affine_invariance(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=20), rng.normal(size=20)
    assert abs(pcc(a * x + b, y) - pcc(x, y)) < 1e-10
    assert abs(pcc(x, a * y + b) - pcc(x, y)) < 1e-10


def test_pcc_columns_constant_gives_zero():
    a = np.column_stack([np.arange(5.0), np.ones(5)])
    np.testing.assert_allclose(pcc_columns(a, a), [1.0, 0.0])


# -- encoding --------------------------------------------------------------------------------

SPLIT = split_trs(120, seed=0)


def test_encode_noise_has_no_signal():
    rng = np.random.default_rng(3)
    r, a = encode_features(rng.normal(size=(120, 8)), rng.normal(size=(120, 60)), SPLIT)
    assert abs(r.mean()) < 0.1 and set(a) <= set(DEFAULT_ALPHAS)


def test_duplicated_targets_score_one():
    Y = np.random.default_rng(4).normal(size=(120, 5))
    rep = encoding_scores_from_features([Y], Y, SPLIT)
    assert rep.layer_mean[0] == pytest.approx(1.0, abs=1e-3)


def test_encoding_voxel_permutation_and_independence():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(120, 6))
    Y = X @ rng.normal(size=(6, 10)) + rng.normal(size=(120, 10))
    r, a = encode_features(X, Y, SPLIT)
    perm = rng.permutation(10)
    rp, ap = encode_features(X, Y[:, perm], SPLIT)
    np.testing.assert_array_equal(rp, r[perm])
    np.testing.assert_array_equal(ap, a[perm])
    # voxels fitted one at a time give the same answers
    single = np.array([encode_features(X, Y[:, [v]], SPLIT)[0][0] for v in range(10)])
    np.testing.assert_allclose(single, r, rtol=1e-12, atol=1e-12)


def test_encode_degenerate_split():
    from brainrefine.bold_dataset import DatasetSplit
    with pytest.raises(ValueError):
        encode_features(np.ones((4, 2)), np.ones((4, 1)), DatasetSplit([0, 1], [2], [3], 0))


def test_layerwise_scores_shape(tiny_windows, tiny_split):
    bb = make_tiny_model().backbone
    bold = np.random.default_rng(0).normal(size=(24, 4))
    rep = layerwise_encoding_scores(bb, tiny_windows, bold, tiny_split, voxel_ids=[3, 4, 5, 6])
    assert len(rep.voxel_pcc) == bb.n_layers + 1
    assert all(p.shape == (4,) and np.all(np.abs(p) <= 1) for p in rep.voxel_pcc)
    assert [r["layer"] for r in rep.rows("m")] == list(range(bb.n_layers + 1))
    again = layerwise_encoding_scores(bb, tiny_windows, bold, tiny_split)
    assert all(np.array_equal(a, b) for a, b in zip(rep.voxel_pcc, again.voxel_pcc))


# -- sweep ------------------------------------------------------------------------------------

CHEAP = RefineConfig(StageConfig(1, epochs=1, base_lr=0.5), StageConfig(2, epochs=1, base_lr=1e-3))


def test_context_sweep_two_entries(tiny_audio, tiny_split):
    bold = np.random.default_rng(0).normal(size=(24, 4)).astype(np.float32)
    bb = make_tiny_model().backbone
    rep = context_sweep([2, 1], tiny_audio, bold, tiny_split, bb, CHEAP)
    assert sorted(rep.entries) == [1, 2]
    assert rep.entries[1].label == "1(-context)" and rep.entries[2].label == "2"
    assert all(e.frame_lengths[-4:] == [75, 15, 3, 1] for e in rep.entries.values())
    again = context_sweep([1, 2], tiny_audio, bold, tiny_split, bb, CHEAP)
    assert rep.rows() == again.rows()
    with pytest.raises(ValueError):
        context_sweep([9], tiny_audio, bold, tiny_split, bb, CHEAP)


def test_context_label():
    assert context_label(1) == "1(-context)" and context_label(5) == "5"


# -- probe ------------------------------------------------------------------------------------


def test_probe_single_layer():
    assert probe_weights_from_activations([np.zeros((2, 3, 4))], np.zeros((2, 3), int)).tolist() == [1.0]


def test_probe_identical_layers_near_uniform():
    rng = np.random.default_rng(0)
    distinct = rng.normal(size=(16, 10, 8))
    shared = rng.normal(size=(16, 10, 8))
    labels = (shared[..., 0] > 0).astype(int)
    w = probe_weights_from_activations([distinct] + [shared] * 4, labels, steps=200)
    assert w.sum() == pytest.approx(1.0, abs=1e-6) and np.all(w >= 0)
    assert w[1:].max() - w[1:].min() < 0.1


def test_probe_on_backbone(tiny_audio):
    clips, labels = energy_probe_task(tiny_audio, 0.64, 3, 8)
    assert clips.shape == (8, 10240) and labels.shape == (8, 32) and set(np.unique(labels)) <= {0, 1, 2}
    w = probe_layer_weights(make_tiny_model().backbone, clips, labels, steps=30)
    assert len(w) == 3 and w.sum() == pytest.approx(1.0, abs=1e-6)


def test_change_rates():
    np.testing.assert_array_equal(layer_weight_change_rate([0.2, 0.8], [0.2, 0.8]), [0, 0])
    np.testing.assert_allclose(layer_weight_change_rate([0.2, 0.5], [0.3, 0.25]), [0.5, -0.5])
    r = layer_weight_change_rate([0.0, 0.5], [0.1, 0.5])
    assert math.isnan(r[0]) and r[1] == 0


# -- t-test ---------------------------------------------------------------------------------------


def test_t_test_example():
    r = paired_t_test_one_tailed([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
    assert r.t == pytest.approx(3.4641, abs=1e-4) and r.df == 2 and r.n == 3
    assert r.p == pytest.approx(0.0371, abs=1e-3)
    assert r.p == pytest.approx(student_t_upper_tail(r.t, 2), abs=1e-8)


def test_t_test_constant_shift_and_antisymmetry():
    b = np.array([0.1, 0.7, 0.3, 0.9])
    with pytest.raises(ValueError, match="zero variance"):
        paired_t_test_one_tailed(b + 0.25, b)
    a = np.array([0.3, 0.2, 0.8, 1.4])
    assert paired_t_test_one_tailed(a, b).t == pytest.approx(-paired_t_test_one_tailed(b, a).t)
    with pytest.raises(ValueError):
        paired_t_test_one_tailed([1.0], [0.0])
