"""Neural-encoding head: conv downsampler, z-score stage, linear voxel readout.

Four conv layers (kernel 3, strides ``n, 5, 5, 3``, paddings ``1, 0, 0, 0``),
each followed by batch normalization and ReLU, collapse the ``75 n`` frames
of one window to a single position.  The resulting feature vector is
z-scored and projected linearly onto the voxels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .backbone import SpeechBackbone

FRAMES_PER_TR = 75  # 1.5 s at 50 Hz


def conv_output_length(L_in: int, kernel: int, stride: int, padding: int) -> int:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if L_in + 2 * padding < kernel:
        raise ValueError(f"input length {L_in} with padding {padding} is shorter than kernel {kernel}")
    return (L_in + 2 * padding - kernel) // stride + 1


@dataclass(frozen=True)
class ConvDownsamplerConfig:
    n: int
    dim: int
    kernel: int = 3
    paddings: tuple = (1, 0, 0, 0)

    def __post_init__(self):
        if not 1 <= self.n <= 8:
            raise ValueError(f"context length n must be in 1..8, got {self.n}")

    @property
    def strides(self) -> tuple:
        return (self.n, 5, 5, 3)

    @property
    def input_frames(self) -> int:
        return FRAMES_PER_TR * self.n

    def frame_lengths(self) -> list[int]:
        """Temporal length before the first layer and after each layer."""
        lengths = [self.input_frames]
        for s, p in zip(self.strides, self.paddings):
            lengths.append(conv_output_length(lengths[-1], self.kernel, s, p))
        return lengths


class Standardizer(nn.Module):
    """Per-channel z-score.

    Training mode standardizes with batch statistics and tracks running
    estimates; evaluation mode uses the stored (fitted or tracked) statistics.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-8):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("mean", torch.zeros(dim))
        self.register_buffer("var", torch.ones(dim))
        self.register_buffer("fitted", torch.zeros((), dtype=torch.int64))

    def fit(self, features: torch.Tensor) -> None:
        if features.shape[0] < 2:
            raise ValueError("standardizer fit needs at least 2 samples")
        with torch.no_grad():
            var = features.var(dim=0, unbiased=False)
            bad = torch.nonzero(var <= 0).flatten()
            if len(bad):
                raise ValueError(f"channel {int(bad[0])} has zero variance; cannot standardize")
            self.mean.copy_(features.mean(dim=0))
            self.var.copy_(var)
            self.fitted.fill_(1)

    def forward(self, x):
        if self.training:
            mean = x.mean(dim=0)
            var = x.var(dim=0, unbiased=False)
            with torch.no_grad():
                self.mean.lerp_(mean.detach(), self.momentum)
                self.var.lerp_(var.detach(), self.momentum)
            return (x - mean) / torch.sqrt(var + self.eps)
        if not int(self.fitted):
            raise RuntimeError("standardizer used in evaluation mode before its statistics were fitted")
        return (x - self.mean) / torch.sqrt(self.var + self.eps)


def standardize(features, mode: str, standardizer: Standardizer) -> np.ndarray:
    """``mode="fit"`` stores per-channel mean/variance, then applies them; ``"apply"`` only applies."""
    x = torch.as_tensor(np.asarray(features), dtype=standardizer.mean.dtype)
    if mode == "fit":
        standardizer.fit(x)
    elif mode != "apply":
        raise ValueError(f"mode must be 'fit' or 'apply', got {mode!r}")
    was = standardizer.training
    standardizer.eval()
    try:
        with torch.no_grad():
            return standardizer(x).numpy()
    finally:
        standardizer.train(was)


class EncodingHead(nn.Module):
    def __init__(self, n: int, dim: int, n_voxels: int, seed: int = 0, init_scale: float = 0.01):
        super().__init__()
        self.config = ConvDownsamplerConfig(n, dim)
        self.n = n
        self.n_voxels = n_voxels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.convs = nn.ModuleList(
                nn.Conv1d(dim, dim, self.config.kernel, stride=s, padding=p)
                for s, p in zip(self.config.strides, self.config.paddings)
            )
            self.norms = nn.ModuleList(nn.BatchNorm1d(dim) for _ in self.convs)
            self.standardizer = Standardizer(dim)
            self.linear = nn.Linear(dim, n_voxels)
            with torch.no_grad():
                self.linear.weight.uniform_(-init_scale, init_scale)
                self.linear.bias.zero_()

    def _check_frames(self, acts):
        expected = self.config.input_frames
        if acts.shape[1] != expected:
            raise ValueError(f"head with n={self.n} expects exactly 75n = {expected} frames, got {acts.shape[1]}")

    def downsample(self, acts: torch.Tensor) -> torch.Tensor:
        """``(B, 75n, D)`` -> ``(B, D)`` conv features before standardization."""
        self._check_frames(acts)
        x = acts.transpose(1, 2)
        for conv, norm in zip(self.convs, self.norms):
            x = torch.relu(norm(conv(x)))
        return x[:, :, 0]

    def features(self, acts: torch.Tensor) -> torch.Tensor:
        """Standardized features entering the linear layer."""
        return self.standardizer(self.downsample(acts))

    def forward(self, acts):
        return self.linear(self.features(acts))

    def linear_parameters(self) -> list[nn.Parameter]:
        return list(self.linear.parameters())

    def non_linear_parameters(self) -> list[nn.Parameter]:
        keep = {id(p) for p in self.linear.parameters()}
        return [p for p in self.parameters() if id(p) not in keep]

    @torch.no_grad()
    def calibrate(self, acts: torch.Tensor) -> None:
        """Set every normalization statistic from the population ``acts``.

        Each batch-norm layer receives the exact mean and (population) variance
        of its inputs over all samples and positions, then the standardizer is
        fitted on the resulting features.
        """
        self._check_frames(acts)
        x = acts.transpose(1, 2)
        for conv, norm in zip(self.convs, self.norms):
            z = conv(x)
            norm.running_mean.copy_(z.mean(dim=(0, 2)))
            norm.running_var.copy_(z.var(dim=(0, 2), unbiased=False))
            x = torch.relu((z - norm.running_mean[None, :, None])
                           / torch.sqrt(norm.running_var[None, :, None] + norm.eps)
                           * norm.weight[None, :, None] + norm.bias[None, :, None])
        self.standardizer.fit(x[:, :, 0])


def head_forward(head: EncodingHead, activations) -> np.ndarray:
    """Predicted BOLD vector (length V) for one ``75n x D`` activation matrix, inference mode."""
    acts = torch.as_tensor(np.asarray(activations), dtype=head.linear.weight.dtype)
    if acts.dim() != 2:
        raise ValueError("expected a single frames x D activation matrix")
    was = head.training
    head.eval()
    try:
        with torch.no_grad():
            return head(acts[None])[0].numpy()
    finally:
        head.train(was)


class EncodingModel(nn.Module):
    """Backbone plus encoding head reading one backbone layer (default: last)."""

    def __init__(self, backbone: SpeechBackbone, head: EncodingHead, layer: int = -1):
        super().__init__()
        if not 1 <= head.n <= 8:
            raise ValueError("head context length out of range")
        self.backbone = backbone
        self.head = head
        self.layer = layer

    @property
    def n(self) -> int:
        return self.head.n

    def activations(self, waveforms: torch.Tensor) -> torch.Tensor:
        return self.backbone.layer_outputs(waveforms)[self.layer]

    def forward(self, waveforms):
        return self.head(self.activations(waveforms))

    def head_features(self, waveforms):
        return self.head.features(self.activations(waveforms))

    @torch.no_grad()
    def calibrate(self, windows, batch_size: int = 16) -> None:
        """Fit the head's normalization statistics on ``windows`` (backbone in eval mode)."""
        was = self.training
        self.eval()
        try:
            acts = batched_activations(self, windows, batch_size)
        finally:
            self.train(was)
        self.head.calibrate(acts)

    def is_calibrated(self) -> bool:
        return bool(int(self.head.standardizer.fitted))


@torch.no_grad()
def batched_activations(model: EncodingModel, windows, batch_size: int = 16) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    windows = torch.as_tensor(np.asarray(windows), dtype=dtype)
    return torch.cat([model.activations(windows[i:i + batch_size]) for i in range(0, len(windows), batch_size)])


@torch.no_grad()
def compute_head_features(model: EncodingModel, windows, batch_size: int = 16) -> np.ndarray:
    """Standardized head features for every window, inference mode."""
    was = model.training
    model.eval()
    try:
        acts = batched_activations(model, windows, batch_size)
        return model.head.features(acts).numpy()
    finally:
        model.train(was)
