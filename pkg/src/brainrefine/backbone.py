"""Speech backbone interface, a small transformer realization, parameter snapshots.

Any backbone maps 16 kHz waveforms to ``L + 1`` activation matrices at 50 Hz:
index 0 holds the feature-extractor latents, indices ``1..L`` the transformer
layer outputs.  :func:`check_backbone_conformance` asserts the interface
contract for third-party adapters.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

SAMPLE_RATE = 16000
FRAME_RATE = 50
HOP = SAMPLE_RATE // FRAME_RATE  # 320 samples per frame


class SpeechBackbone(nn.Module):
    """Base class for waveform -> per-layer activation encoders.

    Subclasses set ``n_layers`` and ``dim`` and implement :meth:`layer_outputs`.
    The trainable parameter registry is ``named_parameters()``.
    """

    sample_rate = SAMPLE_RATE
    frame_rate = FRAME_RATE
    n_layers: int
    dim: int

    def layer_outputs(self, waveforms: torch.Tensor) -> list[torch.Tensor]:
        """``(B, S)`` waveforms -> list of ``L + 1`` tensors shaped ``(B, S // 320, D)``."""
        raise NotImplementedError

    def forward(self, waveforms):
        return self.layer_outputs(waveforms)

    def n_frames(self, n_samples: int) -> int:
        return n_samples // HOP

    def config_dict(self) -> dict:
        return {}


@dataclass
class ToyBackboneConfig:
    strides: tuple = (5, 4, 4, 4)
    channels: tuple = (16, 32, 32, 32)
    n_layers: int = 4
    dim: int = 64
    n_heads: int = 4
    ffn_mult: int = 2
    pos_kernel: int = 15
    seed: int = 0

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.channels = tuple(int(c) for c in self.channels)
        if int(np.prod(self.strides)) != HOP:
            raise ValueError(f"feature-extractor strides must multiply to {HOP}, got {self.strides}")
        if len(self.channels) != len(self.strides):
            raise ValueError("need one channel width per feature-extractor stage")
        if self.dim % self.n_heads:
            raise ValueError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        if self.pos_kernel % 2 == 0:
            raise ValueError("pos_kernel must be odd")


class SelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, t, d = x.shape
        h = self.n_heads

        def heads(z):
            return z.view(b, t, h, d // h).transpose(1, 2)

        q, k, v = heads(self.q_proj(x)), heads(self.k_proj(x)), heads(self.v_proj(x))
        out = nn.functional.scaled_dot_product_attention(q, k, v)
        return self.out_proj(out.transpose(1, 2).reshape(b, t, d))


class TransformerLayer(nn.Module):
    """Post-norm encoder layer."""

    def __init__(self, dim: int, n_heads: int, ffn_mult: int):
        super().__init__()
        self.attention = SelfAttention(dim, n_heads)
        self.attn_norm = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_mult * dim), nn.GELU(), nn.Linear(ffn_mult * dim, dim))
        self.ffn_norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = self.attn_norm(x + self.attention(x))
        return self.ffn_norm(x + self.ffn(x))


class ToyBackbone(SpeechBackbone):
    """Conv feature extractor (total stride 320) followed by a post-norm transformer."""

    def __init__(self, config: ToyBackboneConfig | None = None):
        super().__init__()
        self.config = config or ToyBackboneConfig()
        cfg = self.config
        self.n_layers = cfg.n_layers
        self.dim = cfg.dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            stages = []
            in_ch = 1
            for stride, ch in zip(cfg.strides, cfg.channels):
                # kernel == stride keeps frames = floor(S / 320) exactly.
                stages += [nn.Conv1d(in_ch, ch, kernel_size=stride, stride=stride), nn.GELU()]
                in_ch = ch
            self.feature_extractor = nn.Sequential(*stages)
            self.feature_norm = nn.LayerNorm(in_ch)
            self.feature_proj = nn.Linear(in_ch, cfg.dim)
            self.pos_conv = nn.Conv1d(cfg.dim, cfg.dim, cfg.pos_kernel, padding=cfg.pos_kernel // 2,
                                      groups=cfg.n_heads)
            self.layers = nn.ModuleList(
                TransformerLayer(cfg.dim, cfg.n_heads, cfg.ffn_mult) for _ in range(cfg.n_layers)
            )

    def config_dict(self) -> dict:
        return {"kind": "toy", **asdict(self.config)}

    def layer_outputs(self, waveforms):
        if waveforms.dim() == 1:
            waveforms = waveforms[None]
        if waveforms.shape[-1] < HOP:
            raise ValueError(f"waveform of {waveforms.shape[-1]} samples is shorter than one {HOP}-sample frame")
        n_frames = waveforms.shape[-1] // HOP
        feats = self.feature_extractor(waveforms[:, None, : n_frames * HOP])
        latents = self.feature_proj(self.feature_norm(feats.transpose(1, 2)))
        outputs = [latents]
        x = latents + nn.functional.gelu(self.pos_conv(latents.transpose(1, 2))).transpose(1, 2)
        for layer in self.layers:
            x = layer(x)
            outputs.append(x)
        return outputs


def backbone_from_config(cfg: Mapping) -> SpeechBackbone:
    cfg = dict(cfg)
    kind = cfg.pop("kind", "toy")
    if kind != "toy":
        raise ValueError(f"unknown backbone kind {kind!r}")
    return ToyBackbone(ToyBackboneConfig(**cfg))


def _as_batch(waveform, dtype) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(waveform), dtype=dtype)
    return x[None] if x.dim() == 1 else x


def extract_layer_activations(backbone: SpeechBackbone, waveform, sample_rate: int | None = None) -> list[np.ndarray]:
    """Per-layer ``frames x D`` activations for a single waveform (inference mode)."""
    if sample_rate is not None and sample_rate != backbone.sample_rate:
        raise ValueError(f"backbone expects {backbone.sample_rate} Hz audio, got {sample_rate} Hz")
    waveform = np.asarray(waveform)
    if waveform.ndim != 1:
        raise ValueError("expected a single mono waveform")
    if waveform.shape[0] < HOP:
        raise ValueError(f"waveform of {waveform.shape[0]} samples is shorter than one {HOP}-sample frame")
    dtype = next(backbone.parameters()).dtype
    was_training = backbone.training
    backbone.eval()
    try:
        with torch.no_grad():
            outs = backbone.layer_outputs(_as_batch(waveform, dtype))
    finally:
        backbone.train(was_training)
    return [o[0].cpu().numpy() for o in outs]


def check_backbone_conformance(backbone: SpeechBackbone, lengths=(320, 1000, 24000)) -> None:
    """Raise AssertionError if ``backbone`` breaks the interface contract."""
    assert backbone.sample_rate == SAMPLE_RATE and backbone.frame_rate == FRAME_RATE
    names = [n for n, _ in backbone.named_parameters()]
    assert names and len(names) == len(set(names)), "parameter registry must be non-empty and unique"
    rng = np.random.default_rng(0)
    for s in lengths:
        wav = rng.uniform(-0.5, 0.5, s).astype(np.float32)
        acts = extract_layer_activations(backbone, wav)
        assert len(acts) == backbone.n_layers + 1, f"expected {backbone.n_layers + 1} layers, got {len(acts)}"
        for a in acts:
            assert a.shape == (s // HOP, backbone.dim), f"{s} samples -> {a.shape}"
            assert np.all(np.isfinite(a))
        again = extract_layer_activations(backbone, wav)
        assert all(np.array_equal(a, b) for a, b in zip(acts, again)), "forward pass is not deterministic"
    try:
        extract_layer_activations(backbone, np.zeros(HOP - 1, np.float32))
    except ValueError:
        pass
    else:
        raise AssertionError("inputs shorter than one frame must be rejected")


# -- snapshots ---------------------------------------------------------------


@dataclass
class ParamSnapshot:
    """Immutable copy of named parameter arrays."""

    arrays: dict = field(default_factory=dict)

    @classmethod
    def of(cls, module: nn.Module, prefix: str = "", include_buffers: bool = False) -> "ParamSnapshot":
        items = module.state_dict().items() if include_buffers else module.named_parameters()
        arrays = {}
        for name, t in items:
            a = t.detach().cpu().numpy().copy()
            a.setflags(write=False)
            arrays[prefix + name] = a
        return cls(arrays)

    def restore(self, module: nn.Module, prefix: str = "") -> None:
        state = module.state_dict()
        with torch.no_grad():
            for name, a in self.arrays.items():
                if not name.startswith(prefix):
                    continue
                key = name[len(prefix):]
                if key not in state:
                    raise KeyError(f"snapshot entry {name!r} has no counterpart in module")
                state[key].copy_(torch.from_numpy(np.array(a)))

    def names(self) -> list[str]:
        return list(self.arrays)

    def subset(self, prefix: str) -> "ParamSnapshot":
        return ParamSnapshot({k: v for k, v in self.arrays.items() if k.startswith(prefix)})

    def __eq__(self, other):
        if not isinstance(other, ParamSnapshot):
            return NotImplemented
        if self.arrays.keys() != other.arrays.keys():
            return False
        return all(
            a.shape == other.arrays[k].shape and a.dtype == other.arrays[k].dtype
            and a.tobytes() == other.arrays[k].tobytes()
            for k, a in self.arrays.items()
        )

    def save(self, path, config: dict | None = None) -> None:
        save_container(path, self.arrays, config or {})

    @classmethod
    def load(cls, path) -> "ParamSnapshot":
        _, arrays = load_container(path)
        return cls(arrays)


def snapshot_params(backbone: nn.Module) -> ParamSnapshot:
    return ParamSnapshot.of(backbone)


def param_change_pct(before: ParamSnapshot, after: ParamSnapshot, metric: str = "relative_l1") -> dict:
    """Percentage change per tensor; ``nan`` where the baseline makes it undefined.

    ``relative_l1``: ``100 * sum|after - before| / sum|before|``.
    ``mean_relative``: ``100 * mean(|after - before| / |before|)`` over nonzero baseline elements.
    """
    if before.arrays.keys() != after.arrays.keys():
        diff = set(before.arrays) ^ set(after.arrays)
        raise KeyError(f"snapshots have different parameter names: {sorted(diff)[:10]}")
    out = {}
    for name, b in before.arrays.items():
        a = after.arrays[name]
        if a.shape != b.shape:
            raise ValueError(f"{name}: shape {a.shape} vs {b.shape}")
        b = b.astype(np.float64)
        delta = np.abs(a.astype(np.float64) - b)
        if metric == "relative_l1":
            denom = np.abs(b).sum()
            out[name] = float("nan") if denom == 0 else float(100.0 * delta.sum() / denom)
        elif metric == "mean_relative":
            nz = b != 0
            out[name] = float("nan") if not nz.any() else float(100.0 * np.mean(delta[nz] / np.abs(b[nz])))
        else:
            raise ValueError(f"unknown change metric {metric!r}")
    return out


_ATTN_RE = re.compile(r"(?:^|\.)layers\.(\d+)\.attention\.([qkv])_proj\.(weight|bias)$")


def group_attention_changes(pct: Mapping[str, float]) -> list[dict]:
    """Rows ``{layer, param_type, kind, pct}`` for the per-layer Q/K/V weights and biases.

    Layers are numbered from 1 to match the activation index convention.
    """
    rows = []
    for name, value in pct.items():
        m = _ATTN_RE.search(name)
        if m:
            rows.append({"layer": int(m.group(1)) + 1, "param_type": m.group(2).upper(),
                         "kind": m.group(3), "pct": value})
    rows.sort(key=lambda r: (r["layer"], r["param_type"], r["kind"]))
    return rows


# -- checkpoint container ------------------------------------------------------
#
# Byte layout (all integers little-endian):
#   8 bytes   magic b"BRCKPT\x00\x01"
#   4 bytes   uint32 format version (currently 1)
#   8 bytes   uint64 header length H
#   H bytes   UTF-8 JSON header: {"config": {...}, "arrays": [{"name", "dtype",
#             "shape", "offset", "nbytes"}, ...]} with offsets relative to the payload
#   payload   raw C-order array bytes, concatenated in header order
# Supported dtypes: "<f4", "<f8", "<i8".

MAGIC = b"BRCKPT\x00\x01"
CONTAINER_VERSION = 1
_DTYPES = {"<f4", "<f8", "<i8"}


def save_container(path, arrays: Mapping[str, np.ndarray], config: Mapping) -> None:
    entries, chunks, offset = [], [], 0
    for name, a in arrays.items():
        a = np.asarray(a)
        dt = a.dtype.newbyteorder("<").str
        if dt not in _DTYPES:
            raise TypeError(f"{name}: unsupported dtype {a.dtype}")
        raw = np.ascontiguousarray(a, dtype=dt).tobytes()
        entries.append({"name": name, "dtype": dt, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config, "arrays": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", CONTAINER_VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_container(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint container")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CONTAINER_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    header = json.loads(data[20:20 + hlen].decode("utf-8"))
    payload = memoryview(data)[20 + hlen:]
    arrays = {}
    for e in header["arrays"]:
        if e["offset"] + e["nbytes"] > len(payload):
            raise ValueError(f"{path}: truncated payload for {e['name']}")
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return header["config"], arrays


def save_module(path, module: nn.Module, config: Mapping) -> None:
    save_container(path, {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}, config)


def load_module_state(module: nn.Module, path) -> dict:
    config, arrays = load_container(path)
    state = {k: torch.from_numpy(v) for k, v in arrays.items()}
    module.load_state_dict(state)
    return config
