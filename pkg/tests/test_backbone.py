import struct
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from brainrefine.backbone import (
    MAGIC, ParamSnapshot, SpeechBackbone, ToyBackbone, ToyBackboneConfig, backbone_from_config,
    check_backbone_conformance, extract_layer_activations, group_attention_changes, load_container,
    load_module_state, param_change_pct, save_container, save_module, snapshot_params,
)


class FramingBackbone(SpeechBackbone):
    """Minimal third-party-style adapter: reshape into 320-sample frames and project."""

    n_layers, dim = 2, 8

    def __init__(self):
        super().__init__()
        g = torch.Generator().manual_seed(0)
        self.proj = nn.Linear(320, 8)
        self.mix = nn.ModuleList([nn.Linear(8, 8) for _ in range(2)])
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.randn(p.shape, generator=g) * 0.1)

    def layer_outputs(self, waveforms):
        if waveforms.shape[-1] < 320:
            raise ValueError("too short")
        f = waveforms.shape[-1] // 320
        x = self.proj(waveforms[:, : f * 320].reshape(waveforms.shape[0], f, 320))
        outs = [x]
        for m in self.mix:
            x = torch.tanh(m(x))
            outs.append(x)
        return outs


BACKBONES = {
    "toy": lambda: ToyBackbone(ToyBackboneConfig(dim=32, seed=0)),
    "toy-default": lambda: ToyBackbone(),
    "framing-adapter": FramingBackbone,
}


@pytest.mark.parametrize("name", sorted(BACKBONES))
def test_conformance_suite(name):
    check_backbone_conformance(BACKBONES[name]())


def test_conformance_rejects_broken_backbone():
    class Broken(FramingBackbone):
        def layer_outputs(self, waveforms):
            return super().layer_outputs(waveforms)[:2]

    with pytest.raises(AssertionError):
        check_backbone_conformance(Broken())


@pytest.fixture(scope="module")
def toy():
    return ToyBackbone(ToyBackboneConfig(dim=32, seed=0))


@pytest.mark.parametrize("samples,frames", [(144000, 450), (24000, 75)])
def test_frame_counts(toy, samples, frames):
    acts = extract_layer_activations(toy, np.zeros(samples, np.float32) + 0.01)
    assert len(acts) == toy.n_layers + 1
    assert all(a.shape == (frames, 32) for a in acts)


def test_too_short_and_wrong_rate(toy):
    with pytest.raises(ValueError):
        extract_layer_activations(toy, np.zeros(100, np.float32))
    with pytest.raises(ValueError):
        extract_layer_activations(toy, np.zeros(8000, np.float32), sample_rate=8000)


@settings(max_examples=25, deadline=None)
@given(st.integers(320, 6000))
def test_frame_count_law(s):
    bb = BACKBONES["toy"]()
    acts = extract_layer_activations(bb, np.random.default_rng(s).uniform(-1, 1, s).astype(np.float32))
    assert {a.shape for a in acts} == {(s // 320, 32)}


def test_config_validation():
    with pytest.raises(ValueError):
        ToyBackboneConfig(strides=(5, 4, 4, 2))
    with pytest.raises(ValueError):
        ToyBackboneConfig(dim=30, n_heads=4)


def test_qkv_individually_addressable(toy):
    names = dict(toy.named_parameters())
    for i in range(toy.n_layers):
        for p in "qkv":
            for kind in ("weight", "bias"):
                assert f"layers.{i}.attention.{p}_proj.{kind}" in names


def test_seeded_construction_deterministic():
    a, b = BACKBONES["toy"](), BACKBONES["toy"]()
    assert snapshot_params(a) == snapshot_params(b)


# -- snapshots ----------------------------------------------------------------------

def test_snapshot_isolation_and_restore(toy):
    bb = BACKBONES["toy"]()
    snap = snapshot_params(bb)
    frozen = {k: v.copy() for k, v in snap.arrays.items()}
    opt = torch.optim.SGD(bb.parameters(), lr=0.1)
    bb.layer_outputs(torch.randn(2, 3200))[-1].pow(2).mean().backward()
    opt.step()
    assert all(np.array_equal(frozen[k], snap.arrays[k]) for k in frozen)
    assert snapshot_params(bb) != snap
    snap.restore(bb)
    assert snapshot_params(bb) == snap
    assert set(snap.names()) == {n for n, p in bb.named_parameters() if p.requires_grad}


def test_snapshot_save_load(tmp_path, toy):
    snap = snapshot_params(toy)
    snap.save(tmp_path / "s.ckpt")
    assert ParamSnapshot.load(tmp_path / "s.ckpt") == snap


def snap(**arrays):
    return ParamSnapshot({k: np.asarray(v, dtype=np.float32) for k, v in arrays.items()})


def test_param_change_examples():
    b = snap(w=[1.0, -1.0])
    assert param_change_pct(b, b) == {"w": 0.0}
    assert param_change_pct(b, snap(w=[2.0, -2.0]))["w"] == pytest.approx(100.0)
    assert param_change_pct(b, snap(w=[1.5, -0.5]))["w"] == pytest.approx(50.0)
    assert np.isnan(param_change_pct(snap(w=[0.0]), snap(w=[1.0]))["w"])


def test_param_change_mean_relative_flag():
    b, a = snap(w=[1.0, 4.0]), snap(w=[2.0, 4.0])
    assert param_change_pct(b, a, "mean_relative")["w"] == pytest.approx(50.0)
    assert param_change_pct(b, a)["w"] == pytest.approx(20.0)


def test_param_change_mismatch():
    with pytest.raises(KeyError):
        param_change_pct(snap(w=[1.0]), snap(v=[1.0]))
    with pytest.raises(ValueError):
        param_change_pct(snap(w=[1.0]), snap(w=[1.0, 2.0]))


def test_grouping_report(toy):
    pct = param_change_pct(snapshot_params(toy), snapshot_params(toy))
    rows = group_attention_changes(pct)
    assert len(rows) == toy.n_layers * 3 * 2
    assert {(r["layer"], r["param_type"], r["kind"]) for r in rows} == {
        (l, p, k) for l in range(1, toy.n_layers + 1) for p in "QKV" for k in ("weight", "bias")}


# -- container ------------------------------------------------------------------------

def test_container_layout(tmp_path):
    arrays = {"a": np.arange(6, dtype="<f4").reshape(2, 3), "b": np.array([7], dtype="<i8")}
    save_container(tmp_path / "c.ckpt", arrays, {"k": 1})
    raw = (tmp_path / "c.ckpt").read_bytes()
    assert raw[:8] == MAGIC
    version, hlen = struct.unpack("<IQ", raw[8:20])
    header = json.loads(raw[20:20 + hlen])
    assert version == 1 and header["config"] == {"k": 1}
    entry = header["arrays"][0]
    payload = raw[20 + hlen:]
    np.testing.assert_array_equal(
        np.frombuffer(payload[entry["offset"]:entry["offset"] + entry["nbytes"]], entry["dtype"]).reshape(entry["shape"]),
        arrays["a"])
    cfg, back = load_container(tmp_path / "c.ckpt")
    assert cfg == {"k": 1} and all(np.array_equal(back[k], arrays[k]) for k in arrays)


def test_container_errors(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"nope" * 10)
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_container(tmp_path / "x.ckpt")
    save_container(tmp_path / "t.ckpt", {"a": np.ones(10, "<f4")}, {})
    (tmp_path / "t.ckpt").write_bytes((tmp_path / "t.ckpt").read_bytes()[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_container(tmp_path / "t.ckpt")


def test_module_roundtrip(tmp_path, toy):
    save_module(tmp_path / "m.ckpt", toy, toy.config_dict())
    other = backbone_from_config({**toy.config_dict(), "seed": 99})
    assert snapshot_params(other) != snapshot_params(toy)
    cfg = load_module_state(other, tmp_path / "m.ckpt")
    assert snapshot_params(other) == snapshot_params(toy)
    assert backbone_from_config(cfg).config_dict() == toy.config_dict()
