import math

import numpy as np
import pytest
import torch

from brainrefine.backbone import ToyBackbone, ToyBackboneConfig
from brainrefine.bold_dataset import stack_windows
from brainrefine.encoding_head import EncodingHead, EncodingModel
from brainrefine.synth_data import (
    HrfParams, SynthSpec, double_gamma_hrf, gen_stimulus, hrf_envelope_features, hrf_times,
    layer_teacher_bold, linear_teacher_bold, synth_bold_hrf, voxel_noise, voxel_readout,
)


def gamma_pdf(t, shape, scale):
    # closed form, independent of scipy
    if t <= 0:
        return 0.0
    return t ** (shape - 1) * math.exp(-t / scale) / (math.gamma(shape) * scale ** shape)


def test_hrf_matches_closed_form():
    p = HrfParams()
    h = double_gamma_hrf(p)
    raw = np.array([gamma_pdf(t, 6.5, 1.0) - gamma_pdf(t, 13.0, 1.0) / 6 for t in hrf_times(p)])
    np.testing.assert_allclose(h, raw / raw.max(), rtol=1e-10, atol=1e-12)


def test_hrf_shape_properties():
    p = HrfParams()
    h = double_gamma_hrf(p)
    t = hrf_times(p)
    assert len(h) == round(p.duration_seconds / p.dt) + 1 == 321
    assert h[0] == 0.0
    assert h.max() == 1.0 and np.isfinite(h).all()
    peak = t[np.argmax(h)]
    assert 5.0 <= peak <= 6.0
    assert p.peak_seconds - p.dt <= peak <= p.peak_seconds + p.dt
    assert np.sum(h == h.max()) == 1
    assert h.min() < 0  # undershoot present


@pytest.mark.parametrize("kw", [dict(peak_seconds=13.0), dict(dt=0.0), dict(undershoot_seconds=40.0)])
def test_hrf_invalid(kw):
    with pytest.raises(ValueError):
        double_gamma_hrf(HrfParams(**kw))


def test_stimulus_properties():
    a = gen_stimulus(15.0, seed=4)
    assert a.shape == (240000,)
    np.testing.assert_array_equal(a, gen_stimulus(15.0, seed=4))
    assert not np.array_equal(a, gen_stimulus(15.0, seed=5))
    assert np.abs(a).max() <= 1.0
    rms = float(np.sqrt(np.mean(a.astype(np.float64) ** 2)))
    assert 0 < rms < 1
    with pytest.raises(ValueError):
        gen_stimulus(0, seed=0)
    with pytest.raises(ValueError):
        gen_stimulus(2.0, seed=0)


@pytest.fixture(scope="module")
def audio60():
    return gen_stimulus(60 * 1.5, seed=11)


def _heldout_pcc(X, Y, train, test):
    w, *_ = np.linalg.lstsq(X[train], Y[train], rcond=None)
    P = X[test] @ w
    return np.array([np.corrcoef(P[:, v], Y[test, v])[0, 1] for v in range(Y.shape[1])])


def test_noiseless_hrf_bold_is_linearly_recoverable(audio60):
    spec = SynthSpec(60, 12, 0.0, 3)
    hrf = double_gamma_hrf()
    sess, readout = synth_bold_hrf(audio60, spec, hrf)
    X = hrf_envelope_features(audio60, hrf)
    assert sess.bold.shape == (60, 12) and readout.shape == (8, 12)
    # exact linear function of the features
    w, *_ = np.linalg.lstsq(X, sess.bold.astype(np.float64), rcond=None)
    assert np.abs(X @ w - sess.bold).max() < 1e-5  # float32 storage
    np.testing.assert_allclose(X @ readout, sess.bold, atol=1e-5)
    r = _heldout_pcc(X, sess.bold, np.arange(48), np.arange(48, 60))
    assert r.min() >= 0.999


def test_zero_readout_gives_no_signal(audio60):
    spec = SynthSpec(60, 64, 1.0, 7)
    X = hrf_envelope_features(audio60, double_gamma_hrf())
    sess, _ = synth_bold_hrf(audio60, spec, double_gamma_hrf(), readout=np.zeros((8, 64)))
    r = _heldout_pcc(X, sess.bold, np.arange(40), np.arange(40, 60))
    assert abs(r.mean()) < 0.1


def test_hrf_bold_shape_error(audio60):
    with pytest.raises(ValueError):
        synth_bold_hrf(audio60[:-1], SynthSpec(60, 4, 0.0, 0), double_gamma_hrf())


def test_hrf_bold_deterministic(audio60):
    s = SynthSpec(60, 5, 0.3, 1)
    a, _ = synth_bold_hrf(audio60, s, double_gamma_hrf())
    b, _ = synth_bold_hrf(audio60, s, double_gamma_hrf())
    assert a == b


def test_per_voxel_streams_independent_of_voxel_set():
    full = voxel_readout(8, [0, 1, 2, 3], seed=2)
    sub = voxel_readout(8, [2, 3], seed=2)
    np.testing.assert_array_equal(full[:, 2:], sub)
    np.testing.assert_array_equal(voxel_noise(20, [0, 5], 1, 0.5)[:, 1], voxel_noise(20, [5], 1, 0.5)[:, 0])


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(7, 3, 0.0, 0)
    with pytest.raises(ValueError):
        SynthSpec(10, 0, 0.0, 0)
    with pytest.raises(ValueError):
        SynthSpec(10, 3, -1.0, 0)


@pytest.fixture(scope="module")
def small_model():
    torch.manual_seed(0)
    bb = ToyBackbone(ToyBackboneConfig(dim=16, n_layers=2, seed=1))
    model = EncodingModel(bb, EncodingHead(1, 16, 6, seed=0))
    windows = stack_windows(gen_stimulus(12 * 1.5, seed=2), 1)
    model.calibrate(windows)
    return model, windows


def test_linear_teacher_zero_weights(small_model):
    model, windows = small_model
    s = linear_teacher_bold(model, windows, np.zeros((16, 6)))
    assert not s.bold.any()


def test_linear_teacher_deterministic_and_checked(small_model):
    model, windows = small_model
    w = np.random.default_rng(0).normal(size=(16, 6))
    assert linear_teacher_bold(model, windows, w, 0.2, seed=3) == linear_teacher_bold(model, windows, w, 0.2, seed=3)
    with pytest.raises(ValueError):
        linear_teacher_bold(model, windows, np.zeros((15, 6)))


def test_layer_teacher_shape(small_model):
    model, windows = small_model
    s = layer_teacher_bold(model.backbone, windows, 1, np.ones((16, 3)))
    assert s.bold.shape == (12, 3)
    with pytest.raises(ValueError):
        layer_teacher_bold(model.backbone, windows, 1, np.ones((4, 3)))
