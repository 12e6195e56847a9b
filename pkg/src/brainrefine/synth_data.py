"""Deterministic synthetic stimuli and BOLD targets.

Two target generators are provided:

* :func:`synth_bold_hrf` convolves short-time band envelopes of the audio with
  a double-gamma HRF and reads them out linearly per voxel.
* :func:`linear_teacher_bold` / :func:`layer_teacher_bold` make targets that an
  encoding model can represent exactly, for recovery checks.

Per-voxel randomness comes from ``numpy`` streams seeded with
``(seed, voxel_id, purpose)`` so results do not depend on generation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .bold_dataset import SAMPLE_RATE, BoldSession, samples_per_tr

_READOUT, _NOISE = 0, 1


@dataclass(frozen=True)
class HrfParams:
    peak_seconds: float = 5.5
    undershoot_seconds: float = 12.0
    undershoot_ratio: float = 1.0 / 6.0
    duration_seconds: float = 32.0
    dt: float = 0.1
    dispersion: float = 1.0

    def validate(self):
        if not 0 < self.peak_seconds < self.undershoot_seconds < self.duration_seconds:
            raise ValueError("need 0 < peak_seconds < undershoot_seconds < duration_seconds")
        if self.dt <= 0 or self.dispersion <= 0:
            raise ValueError("dt and dispersion must be positive")
        if self.undershoot_ratio < 0:
            raise ValueError("undershoot_ratio must be non-negative")
        n = self.duration_seconds / self.dt
        if abs(n - round(n)) > 1e-9:
            raise ValueError("duration_seconds must be a multiple of dt")


def hrf_times(params: HrfParams) -> np.ndarray:
    """Sample times ``0, dt, ..., duration`` (``duration / dt + 1`` points)."""
    n = int(round(params.duration_seconds / params.dt))
    return np.arange(n + 1) * params.dt


def double_gamma_hrf(params: HrfParams = HrfParams()) -> np.ndarray:
    """Peak-normalized difference of two gamma densities.

    Each gamma has its mode at the requested peak/undershoot time
    (shape ``1 + t_mode / dispersion``, scale ``dispersion``).
    """
    params.validate()
    t = hrf_times(params)
    b = params.dispersion
    peak = stats.gamma.pdf(t, 1 + params.peak_seconds / b, scale=b)
    under = stats.gamma.pdf(t, 1 + params.undershoot_seconds / b, scale=b)
    h = peak - params.undershoot_ratio * under
    return h / h.max()


def gen_stimulus(duration_seconds: float, seed: int, tr_seconds: float = 1.5,
                 sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Amplitude-modulated tones mixed with band-limited noise bursts, peak 0.9."""
    if duration_seconds <= 0:
        raise ValueError("duration must be positive")
    n_trs = duration_seconds / tr_seconds
    if abs(n_trs - round(n_trs)) > 1e-9:
        raise ValueError(f"duration {duration_seconds} s is not a multiple of the {tr_seconds} s TR")
    n = int(round(duration_seconds * sample_rate))
    rng = np.random.default_rng(seed)
    t = np.arange(n) / sample_rate
    out = np.zeros(n)

    for _ in range(6):
        freq = np.exp(rng.uniform(np.log(120), np.log(3500)))
        mod = rng.uniform(0.2, 3.0)
        # Slow random gain keeps envelopes varying from TR to TR.
        knots = rng.uniform(0, 1, int(duration_seconds / 2) + 2) ** 2
        gain = np.interp(t, np.linspace(0, duration_seconds, len(knots)), knots)
        am = 0.5 * (1 + np.sin(2 * np.pi * mod * t + rng.uniform(0, 2 * np.pi)))
        out += gain * am * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))

    n_bursts = int(rng.poisson(duration_seconds * 1.5))
    for _ in range(n_bursts):
        length = int(rng.uniform(0.05, 0.4) * sample_rate)
        start = int(rng.integers(0, max(1, n - length)))
        lo = np.exp(rng.uniform(np.log(200), np.log(4000)))
        burst = _bandpass(rng.standard_normal(length), lo, lo * rng.uniform(1.5, 3.0), sample_rate)
        burst *= np.hanning(length) * rng.uniform(0.5, 2.0) / (np.abs(burst).max() + 1e-12)
        out[start:start + length] += burst[: n - start]

    return (0.9 * out / np.abs(out).max()).astype(np.float32)


def _bandpass(x: np.ndarray, lo: float, hi: float, sample_rate: int) -> np.ndarray:
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(len(x), 1 / sample_rate)
    spec[(freqs < lo) | (freqs >= hi)] = 0
    return np.fft.irfft(spec, n=len(x))


def band_envelopes(waveform, n_bands: int = 8, frame_seconds: float = 0.1,
                   sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Mean absolute amplitude per frame in log-spaced bands, ``(n_frames, n_bands)``."""
    x = np.asarray(waveform, dtype=np.float64)
    frame = int(round(frame_seconds * sample_rate))
    n_frames = len(x) // frame
    edges = np.geomspace(80, sample_rate / 2, n_bands + 1)
    env = np.empty((n_frames, n_bands))
    for b in range(n_bands):
        y = _bandpass(x, edges[b], edges[b + 1], sample_rate)[: n_frames * frame]
        env[:, b] = np.abs(y).reshape(n_frames, frame).mean(axis=1)
    return env


def hrf_envelope_features(waveform, hrf: np.ndarray, hrf_dt: float = 0.1, tr_seconds: float = 1.5,
                          n_bands: int = 8, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Band envelopes convolved with ``hrf`` sampled at the last frame of every TR.

    Columns are z-scored over TRs.  Shape ``(n_trs, n_bands)``.
    """
    spt = samples_per_tr(tr_seconds, sample_rate)
    n_trs = len(waveform) // spt
    per_tr = tr_seconds / hrf_dt
    if abs(per_tr - round(per_tr)) > 1e-9:
        raise ValueError("tr_seconds must be a multiple of the HRF sampling step")
    per_tr = int(round(per_tr))
    env = band_envelopes(waveform, n_bands, hrf_dt, sample_rate)
    conv = np.stack([np.convolve(env[:, b], hrf)[: len(env)] for b in range(n_bands)], axis=1)
    feats = conv[np.arange(1, n_trs + 1) * per_tr - 1]
    feats = feats - feats.mean(axis=0)
    std = feats.std(axis=0)
    return feats / np.where(std > 0, std, 1.0)


@dataclass(frozen=True)
class SynthSpec:
    n_trs: int
    n_voxels: int
    noise_std: float = 0.0
    seed: int = 0
    teacher: str = "hrf_envelope"
    tr_seconds: float = 1.5
    n_bands: int = 8

    def __post_init__(self):
        if self.n_trs < 8:
            raise ValueError("n_trs must be >= 8")
        if self.n_voxels < 1:
            raise ValueError("n_voxels must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.teacher not in ("hrf_envelope", "linear_backbone"):
            raise ValueError(f"unknown teacher {self.teacher!r}")


def voxel_rng(seed: int, voxel_id: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, voxel_id, purpose])


def voxel_readout(n_features: int, voxel_ids, seed: int) -> np.ndarray:
    """Random ``(n_features, V)`` readout; column ``v`` depends only on ``(seed, voxel_ids[v])``."""
    cols = [voxel_rng(seed, int(v), _READOUT).standard_normal(n_features) for v in voxel_ids]
    return np.stack(cols, axis=1) / np.sqrt(n_features)


def voxel_noise(n_trs: int, voxel_ids, seed: int, noise_std: float) -> np.ndarray:
    if noise_std == 0:
        return np.zeros((n_trs, len(voxel_ids)))
    cols = [voxel_rng(seed, int(v), _NOISE).standard_normal(n_trs) for v in voxel_ids]
    return noise_std * np.stack(cols, axis=1)


def _session(bold: np.ndarray, voxel_ids, tr_seconds: float, subject: str) -> BoldSession:
    return BoldSession(bold.astype(np.float32), list(voxel_ids), tr_seconds, [subject])


def synth_bold_hrf(waveform, spec: SynthSpec, hrf: np.ndarray, hrf_dt: float = 0.1,
                   readout: np.ndarray | None = None, voxel_ids=None,
                   subject: str = "synth-00") -> tuple[BoldSession, np.ndarray]:
    """HRF-convolved envelope features times a per-voxel readout, plus Gaussian noise.

    Returns the session and the ground-truth ``(n_bands, V)`` readout.
    """
    spt = samples_per_tr(spec.tr_seconds)
    if len(waveform) != spec.n_trs * spt:
        raise ValueError(f"waveform has {len(waveform)} samples, expected {spec.n_trs * spt}")
    voxel_ids = list(range(spec.n_voxels)) if voxel_ids is None else list(voxel_ids)
    feats = hrf_envelope_features(waveform, hrf, hrf_dt, spec.tr_seconds, spec.n_bands)
    if readout is None:
        readout = voxel_readout(spec.n_bands, voxel_ids, spec.seed)
    readout = np.asarray(readout, dtype=np.float64)
    if readout.shape != (spec.n_bands, len(voxel_ids)):
        raise ValueError(f"readout shape {readout.shape} != ({spec.n_bands}, {len(voxel_ids)})")
    bold = feats @ readout + voxel_noise(spec.n_trs, voxel_ids, spec.seed, spec.noise_std)
    return _session(bold, voxel_ids, spec.tr_seconds, subject), readout


def linear_teacher_bold(model, windows, true_head_weights, noise_std: float = 0.0, seed: int = 0,
                        bias=None, voxel_ids=None, tr_seconds: float = 1.5,
                        subject: str = "teacher-00") -> BoldSession:
    """BOLD equal to a linear map of the model's head features for each window.

    ``model`` is a calibrated :class:`~brainrefine.encoding_head.EncodingModel`;
    ``true_head_weights`` has shape ``(head_dim, V)``.
    """
    from .encoding_head import compute_head_features

    w = np.asarray(true_head_weights, dtype=np.float64)
    dim = model.head.linear.in_features
    if w.ndim != 2 or w.shape[0] != dim:
        raise ValueError(f"true_head_weights must be shaped ({dim}, V), got {w.shape}")
    voxel_ids = list(range(w.shape[1])) if voxel_ids is None else list(voxel_ids)
    if len(voxel_ids) != w.shape[1]:
        raise ValueError("voxel_ids length does not match the weight matrix")
    feats = compute_head_features(model, windows).astype(np.float64)
    bold = feats @ w
    if bias is not None:
        bold = bold + np.asarray(bias, dtype=np.float64)
    bold = bold + voxel_noise(len(feats), voxel_ids, seed, noise_std)
    return _session(bold, voxel_ids, tr_seconds, subject)


def layer_teacher_bold(backbone, windows, layer: int, weights, noise_std: float = 0.0, seed: int = 0,
                       voxel_ids=None, tr_seconds: float = 1.5,
                       subject: str = "teacher-00") -> BoldSession:
    """BOLD equal to a linear map of time-averaged activations of one backbone layer."""
    from .neuro_eval import window_layer_features

    feats = window_layer_features(backbone, windows)[layer].astype(np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape[0] != feats.shape[1]:
        raise ValueError(f"weights must have {feats.shape[1]} rows, got {w.shape}")
    voxel_ids = list(range(w.shape[1])) if voxel_ids is None else list(voxel_ids)
    feats = (feats - feats.mean(axis=0)) / np.maximum(feats.std(axis=0), 1e-12)
    bold = feats @ w + voxel_noise(len(feats), voxel_ids, seed, noise_std)
    return _session(bold, voxel_ids, tr_seconds, subject)
