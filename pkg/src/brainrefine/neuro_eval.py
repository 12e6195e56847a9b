"""Encoding analyses of a (refined) backbone.

Voxelwise ridge regression from time-averaged layer activations with
per-voxel alpha selection, the context-length sweep, a weighted-layer-sum
probe, layer-weight change rates and a one-tailed paired t-test.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy import stats

from .backbone import SpeechBackbone
from .bold_dataset import DatasetSplit

DEFAULT_ALPHAS = tuple(float(a) for a in np.logspace(-2, 3, 11))


# -- ridge / correlation ---------------------------------------------------------


def fit_ridge(X, y, alpha: float) -> np.ndarray:
    """Closed-form ``(X'X + alpha I)^-1 X'y`` without intercept.  ``y`` may be 1-D or 2-D."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("X must be a non-empty samples x features matrix")
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"X has {X.shape[0]} samples but y has {y.shape[0]}")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    gram = X.T @ X + alpha * np.eye(X.shape[1])
    if alpha == 0 and np.linalg.matrix_rank(gram) < X.shape[1]:
        raise np.linalg.LinAlgError("X is rank deficient; ridge with alpha=0 is singular")
    return np.linalg.solve(gram, X.T @ y)


def pcc(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pcc needs two vectors of equal length")
    if len(x) < 2:
        raise ValueError("pcc needs at least 2 samples")
    xc, yc = x - x.mean(), y - y.mean()
    nx, ny = np.sqrt(xc @ xc), np.sqrt(yc @ yc)
    if nx == 0 or ny == 0:
        raise ValueError("pcc is undefined for a constant input")
    return float(np.clip(xc @ yc / (nx * ny), -1.0, 1.0))


def pcc_columns(a, b) -> np.ndarray:
    """Column-wise Pearson r; a constant column gives 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ac, bc = a - a.mean(axis=0), b - b.mean(axis=0)
    denom = np.sqrt((ac ** 2).sum(axis=0) * (bc ** 2).sum(axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (ac * bc).sum(axis=0) / denom
    return np.clip(np.where(denom > 0, r, 0.0), -1.0, 1.0)


def ridge_path(X, Y, alphas) -> np.ndarray:
    """Ridge weights for every alpha via one SVD: ``(n_alphas, features, targets)``."""
    U, s, Vt = np.linalg.svd(np.asarray(X, dtype=np.float64), full_matrices=False)
    UtY = U.T @ np.asarray(Y, dtype=np.float64)
    return np.stack([Vt.T @ ((s / (s ** 2 + a))[:, None] * UtY) for a in alphas])


# -- layerwise encoding -------------------------------------------------------


@dataclass
class EncodingScoreReport:
    voxel_pcc: list          # per layer: (V,) test PCC
    alphas: list             # per layer: (V,) chosen alpha
    voxel_ids: list = field(default_factory=list)

    @property
    def layer_mean(self) -> list[float]:
        return [float(np.mean(p)) for p in self.voxel_pcc]

    @property
    def best_layer(self) -> int:
        return int(np.argmax(self.layer_mean))

    def rows(self, model: str = "") -> list[dict]:
        return [{"model": model, "layer": i, "mean_pcc": m, "median_alpha": float(np.median(a))}
                for i, (m, a) in enumerate(zip(self.layer_mean, self.alphas))]


def window_layer_features(backbone: SpeechBackbone, windows, batch_size: int = 16) -> list[np.ndarray]:
    """Time-averaged activations per window for every layer: list of ``(n_windows, D)``."""
    dtype = next(backbone.parameters()).dtype
    w = torch.as_tensor(np.asarray(windows), dtype=dtype)
    was = backbone.training
    backbone.eval()
    chunks = []
    try:
        with torch.no_grad():
            for i in range(0, len(w), batch_size):
                chunks.append([o.mean(dim=1).numpy().astype(np.float64)
                               for o in backbone.layer_outputs(w[i:i + batch_size])])
    finally:
        backbone.train(was)
    return [np.concatenate([c[l] for c in chunks]) for l in range(len(chunks[0]))]


def encode_features(X, Y, split: DatasetSplit, alphas=DEFAULT_ALPHAS) -> tuple[np.ndarray, np.ndarray]:
    """Fit on train, choose alpha per voxel by validation PCC, score test PCC.

    Features are z-scored and targets centered on training statistics, so the
    alpha grid means the same thing whatever the activation scale.  Returns
    ``(test_pcc, chosen_alpha)`` per voxel.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    tr, va, te = list(split.train), list(split.val), list(split.test)
    if len(tr) < 2 or len(va) < 2 or len(te) < 2:
        raise ValueError("encoding needs at least 2 TRs in each of train/val/test")
    xm, ym = X[tr].mean(axis=0), Y[tr].mean(axis=0)
    xs = X[tr].std(axis=0)
    Xc = (X - xm) / np.where(xs > 0, xs, 1.0)  # constant columns stay zero
    Yc = Y - ym
    alphas = np.asarray(alphas, dtype=np.float64)
    W = ridge_path(Xc[tr], Yc[tr], alphas)
    val = np.stack([pcc_columns(Xc[va] @ w, Yc[va]) for w in W])
    choice = np.argmax(val, axis=0)
    W_best = W[choice, :, np.arange(Y.shape[1])].T
    return pcc_columns(Xc[te] @ W_best, Yc[te]), alphas[choice]


def encoding_scores_from_features(layer_features: Sequence, bold, split: DatasetSplit,
                                  alphas=DEFAULT_ALPHAS, voxel_ids=None) -> EncodingScoreReport:
    pccs, chosen = [], []
    for X in layer_features:
        r, a = encode_features(X, bold, split, alphas)
        pccs.append(r)
        chosen.append(a)
    return EncodingScoreReport(pccs, chosen, list(voxel_ids) if voxel_ids is not None else [])


def layerwise_encoding_scores(backbone: SpeechBackbone, windows, bold, split: DatasetSplit,
                              alphas=DEFAULT_ALPHAS, voxel_ids=None) -> EncodingScoreReport:
    """Voxelwise ridge encoding score for each backbone layer (0 = latents)."""
    return encoding_scores_from_features(window_layer_features(backbone, windows), bold, split,
                                         alphas, voxel_ids)


def refined_vs_vanilla_pcc(vanilla: EncodingScoreReport, refined: EncodingScoreReport) -> float:
    """Mean over transformer layers ``1..L`` of ``refined - vanilla`` layer-mean PCC."""
    return float(np.mean(np.subtract(refined.layer_mean[1:], vanilla.layer_mean[1:])))


# -- context sweep ----------------------------------------------------------------


@dataclass
class SweepEntry:
    n: int
    label: str
    frame_lengths: list
    val_mse: float
    head_test_pcc: float
    encoding_pcc: float
    best_layer: int
    records: list


@dataclass
class SweepReport:
    entries: dict

    def rows(self) -> list[dict]:
        return [{"n": e.n, "label": e.label, "val_mse": e.val_mse, "head_test_pcc": e.head_test_pcc,
                 "encoding_pcc": e.encoding_pcc, "best_layer": e.best_layer}
                for e in sorted(self.entries.values(), key=lambda e: e.n)]


def context_label(n: int) -> str:
    return "1(-context)" if n == 1 else str(n)


def context_sweep(n_values, audio, bold, split: DatasetSplit, backbone: SpeechBackbone,
                  refine_cfg=None, head_seed: int = 0, alphas=DEFAULT_ALPHAS,
                  tr_seconds: float = 1.5) -> SweepReport:
    """Refine a fresh copy of ``backbone`` for every context length and score it.

    Per ``n`` the report holds the stage-2 best validation MSE, the test PCC of
    the encoding model's own predictions (mean over voxels), and the mean test
    PCC of the best ridge-encoded layer of the refined backbone.
    """
    from .bold_dataset import stack_windows
    from .encoding_head import ConvDownsamplerConfig, EncodingHead, EncodingModel
    from .trainer import EncodingData, predict, refine

    n_values = sorted(set(int(n) for n in n_values))
    bad = [n for n in n_values if not 1 <= n <= 8]
    if bad:
        raise ValueError(f"context lengths must be within 1..8, got {bad}")
    bold = np.asarray(bold, dtype=np.float32)
    entries = {}
    for n in n_values:
        lengths = ConvDownsamplerConfig(n, backbone.dim).frame_lengths()
        if lengths[1:] != [75, 15, 3, 1]:
            raise AssertionError(f"conv stack for n={n} does not collapse to one frame: {lengths}")
        windows = stack_windows(audio, n, tr_seconds, n_trs=len(bold))
        model = EncodingModel(copy.deepcopy(backbone), EncodingHead(n, backbone.dim, bold.shape[1], seed=head_seed))
        result = refine(model, EncodingData(windows, bold, split), refine_cfg)
        te = list(split.test)
        head_pcc = float(np.mean(pcc_columns(predict(result.model, windows[te]), bold[te])))
        report = layerwise_encoding_scores(result.model.backbone, windows, bold, split, alphas)
        entries[n] = SweepEntry(n, context_label(n), lengths, result.records[1].best_val, head_pcc,
                                float(max(report.layer_mean)), report.best_layer,
                                [r.summary() for r in result.records])
    return SweepReport(entries)


# -- layer-weight probe -------------------------------------------------------------


@dataclass
class ProbeReport:
    vanilla: dict               # task -> weights
    refined: dict
    change_rates: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.change_rates:
            self.change_rates = {t: layer_weight_change_rate(self.vanilla[t], self.refined[t]) for t in self.vanilla}


def energy_probe_task(audio, clip_seconds: float = 1.0, n_classes: int = 3, n_clips: int = 48,
                      seed: int = 0, sample_rate: int = 16000) -> tuple[np.ndarray, np.ndarray]:
    """Random clips of ``audio`` labelled per 20 ms frame by log-energy tercile.

    Returns ``(clips (n_clips, S), labels (n_clips, S // 320))``.
    """
    audio = np.asarray(audio, dtype=np.float32)
    S = int(round(clip_seconds * sample_rate))
    S -= S % 320
    if len(audio) < S:
        raise ValueError("audio shorter than one probe clip")
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, len(audio) - S + 1, n_clips)
    clips = np.stack([audio[s:s + S] for s in starts])
    energy = np.log(np.mean(clips.reshape(n_clips, -1, 320) ** 2, axis=2) + 1e-8)
    edges = np.quantile(energy, np.linspace(0, 1, n_classes + 1)[1:-1])
    return clips, np.digitize(energy, edges).astype(np.int64)


def probe_weights_from_activations(layer_acts: Sequence, labels, n_classes: int | None = None,
                                   steps: int = 300, lr: float = 0.05, seed: int = 0) -> np.ndarray:
    """Train softmax-normalized layer weights plus a linear classifier on frozen activations.

    ``layer_acts`` is a list of ``(clips, frames, D)`` arrays.  Returns the
    normalized layer weights (non-negative, summing to 1).
    """
    if len(layer_acts) == 1:
        return np.ones(1)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.int64)
    n_classes = n_classes or int(labels.max()) + 1
    acts = torch.stack([torch.as_tensor(np.asarray(a), dtype=torch.float32) for a in layer_acts])
    # Per-layer feature normalization, as in weighted-sum probes on layer norms.
    acts = torch.nn.functional.layer_norm(acts, acts.shape[-1:])
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        logits = torch.zeros(len(layer_acts), requires_grad=True)
        clf = torch.nn.Linear(acts.shape[-1], n_classes)
    opt = torch.optim.Adam([logits, *clf.parameters()], lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        w = torch.softmax(logits, dim=0)
        mixed = torch.einsum("l,lbtd->btd", w, acts)
        loss = torch.nn.functional.cross_entropy(clf(mixed).reshape(-1, n_classes), labels.reshape(-1))
        if not torch.isfinite(loss):
            raise FloatingPointError("probe training diverged")
        loss.backward()
        opt.step()
    w = torch.softmax(logits.detach().double(), dim=0).numpy()
    return w / w.sum()


def probe_layer_weights(backbone: SpeechBackbone, clips, labels, **kwargs) -> np.ndarray:
    """Normalized weighted-sum layer weights of a frozen backbone on a frame-labelling task."""
    dtype = next(backbone.parameters()).dtype
    was = backbone.training
    backbone.eval()
    try:
        with torch.no_grad():
            outs = backbone.layer_outputs(torch.as_tensor(np.asarray(clips), dtype=dtype))
    finally:
        backbone.train(was)
    return probe_weights_from_activations([o.numpy() for o in outs], labels, **kwargs)


def layer_weight_change_rate(w_vanilla, w_refined) -> np.ndarray:
    """``(refined - vanilla) / vanilla`` per layer; ``nan`` where the vanilla weight is 0."""
    v = np.asarray(w_vanilla, dtype=np.float64)
    r = np.asarray(w_refined, dtype=np.float64)
    if v.shape != r.shape:
        raise ValueError(f"weight vectors differ in length: {v.shape} vs {r.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(v != 0, (r - v) / np.where(v != 0, v, 1.0), np.nan)


# -- significance -------------------------------------------------------------------


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float
    n: int


def paired_t_test_one_tailed(a, b) -> TTestResult:
    """H1: mean(a - b) > 0.  Sample standard deviation, ``df = n - 1``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired t-test needs two vectors of equal length")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    sd = d.std(ddof=1)
    # a = b + c leaves only rounding noise in d; treat that as zero variance.
    scale = max(np.abs(a).max(), np.abs(b).max())
    if not math.isfinite(sd) or sd <= 1e-12 * scale:
        raise ValueError("differences have zero variance; t statistic undefined")
    t = d.mean() / (sd / math.sqrt(n))
    return TTestResult(float(t), n - 1, float(stats.t.sf(t, n - 1)), n)
