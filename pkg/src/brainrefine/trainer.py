"""Two-stage refinement: linear readout first, then everything except the readout.

Optimization is plain mini-batch gradient descent with a step-granular
linear-warmup / linear-decay learning rate.  The objective is the mean
squared error plus ``lambda`` times the squared norm of the parameters being
trained in the current stage.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .backbone import ParamSnapshot
from .bold_dataset import DatasetSplit
from .encoding_head import EncodingModel, batched_activations

log = logging.getLogger(__name__)

DEFAULT_LAMBDA_GRID = (1e-3, 3e-3, 1e-2, 3e-2, 1e-1)
LAMBDA_BOUNDS = (1e-3, 1e-1)


@dataclass
class StageConfig:
    stage: int
    epochs: int = 60
    base_lr: float | None = None
    warmup_frac: float = 0.1
    lam: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "sgd"
    regularize: str = "trainable"
    recalibrate: bool = False

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.base_lr is None:
            self.base_lr = 3e-3 if self.stage == 1 else 3e-4
        if not 0 < self.warmup_frac < 1:
            raise ValueError("warmup_frac must be in (0, 1)")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.regularize not in ("trainable", "head"):
            raise ValueError(f"regularize must be 'trainable' or 'head', got {self.regularize!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


@dataclass
class TrainRecord:
    stage: int
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    best_epoch: int = -1
    steps_per_epoch: int = 0

    @property
    def best_val(self) -> float:
        return self.val_loss[self.best_epoch] if self.val_loss else float("nan")

    def write_csv(self, path) -> None:
        """Per-epoch losses; wall time is deliberately left out to keep files reproducible."""
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "lr_end", "best"])
            for e, (tr, va) in enumerate(zip(self.train_loss, self.val_loss)):
                lr_end = self.lr_trace[(e + 1) * self.steps_per_epoch - 1]
                w.writerow([e, repr(tr), repr(va), repr(lr_end), int(e == self.best_epoch)])

    def summary(self) -> dict:
        return {"stage": self.stage, "epochs": len(self.train_loss), "best_epoch": self.best_epoch,
                "best_val_loss": self.best_val, "final_train_loss": self.train_loss[-1] if self.train_loss else None}


def l2_mse_loss(pred, target, params: Sequence, lam: float):
    """``mean((pred - target)^2) + lam * sum(theta^2)`` over ``params``."""
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    loss = torch.mean((pred - target) ** 2)
    if lam:
        loss = loss + lam * sum(torch.sum(torch.as_tensor(p) ** 2) for p in params)
    return loss


def lr_at_step(step, total_steps: int, base_lr: float, warmup_frac: float = 0.1) -> float:
    """Linear ramp 0 -> base_lr over ``warmup_frac * total_steps`` steps, then linear decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_frac * total_steps
    if step <= warm:
        return base_lr * step / warm if warm > 0 else base_lr
    return base_lr * (total_steps - step) / (total_steps - warm)


@dataclass
class EncodingData:
    """Windows aligned with BOLD rows (one window per TR) and a split."""

    windows: np.ndarray
    bold: np.ndarray
    split: DatasetSplit

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float32)
        self.bold = np.asarray(self.bold, dtype=np.float32)
        if len(self.windows) != len(self.bold):
            raise ValueError(f"{len(self.windows)} windows but {len(self.bold)} BOLD rows")
        if not self.split.train or not self.split.val:
            raise ValueError("training and validation partitions must be non-empty")


def epoch_batches(indices: Sequence[int], batch_size: int, seed: int, stage: int, epoch: int) -> list[np.ndarray]:
    """Shuffled mini-batches keyed by ``(seed, stage, epoch)``.

    A trailing batch of one sample is folded into the previous batch because
    batch normalization needs at least two samples.
    """
    order = np.random.default_rng([seed, stage, epoch]).permutation(np.asarray(indices))
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    batches = [b.astype(np.int64) for b in batches]
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def _freeze(model: EncodingModel, stage: int) -> list[torch.nn.Parameter]:
    linear = {id(p) for p in model.head.linear_parameters()}
    trainable = []
    for p in model.parameters():
        on = (id(p) in linear) == (stage == 1)
        p.requires_grad_(on)
        if on:
            trainable.append(p)
    return trainable


def _unfreeze(model):
    for p in model.parameters():
        p.requires_grad_(True)


class _Optimizer:
    def __init__(self, params, kind):
        self.params = params
        self.adam = torch.optim.Adam(params, lr=0.0) if kind == "adam" else None

    @torch.no_grad()
    def step(self, lr):
        if self.adam is not None:
            for g in self.adam.param_groups:
                g["lr"] = lr
            self.adam.step()
            return
        for p in self.params:
            if p.grad is not None:
                p.add_(p.grad, alpha=-lr)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def _penalty_params(model, trainable, cfg):
    if cfg.regularize == "head":
        head_ids = {id(p) for p in model.head.parameters()}
        return [p for p in trainable if id(p) in head_ids]
    return trainable


def evaluate_mse(model: EncodingModel, data: EncodingData, indices, batch_size: int = 16) -> float:
    """Mean squared error on ``indices`` in inference mode."""
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            idx = list(indices)
            pred = torch.cat([model(torch.from_numpy(data.windows[idx[i:i + batch_size]]))
                              for i in range(0, len(idx), batch_size)])
            return float(torch.mean((pred - torch.from_numpy(data.bold[idx])) ** 2))
    finally:
        model.train(was)


def predict(model: EncodingModel, windows, batch_size: int = 16) -> np.ndarray:
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            w = torch.as_tensor(np.asarray(windows, dtype=np.float32))
            return torch.cat([model(w[i:i + batch_size]) for i in range(0, len(w), batch_size)]).numpy()
    finally:
        model.train(was)


def run_stage(model: EncodingModel, data: EncodingData, cfg: StageConfig) -> tuple[EncodingModel, TrainRecord]:
    """Train one stage in place and restore the best-validation state at the end.

    Stage 1 updates only the linear readout; all other modules run in
    inference mode so their parameters and statistics are untouched, which
    also lets the head features be computed once up front.  Stage 2 updates
    everything except the readout.
    """
    if not model.is_calibrated():
        raise RuntimeError("model statistics are not calibrated; call model.calibrate(train windows) first")
    train_idx, val_idx = list(data.split.train), list(data.split.val)
    if not train_idx or not val_idx:
        raise ValueError("empty train or validation partition")

    trainable = _freeze(model, cfg.stage)
    penalized = _penalty_params(model, trainable, cfg)
    opt = _Optimizer(trainable, cfg.optimizer)
    batches_per_epoch = len(epoch_batches(train_idx, cfg.batch_size, cfg.seed, cfg.stage, 0))
    total = cfg.epochs * batches_per_epoch
    record = TrainRecord(stage=cfg.stage, steps_per_epoch=batches_per_epoch)
    bold = torch.from_numpy(data.bold)

    if cfg.stage == 1:
        model.eval()
        with torch.no_grad():
            feats = model.head.features(batched_activations(model, data.windows))
        forward = lambda idx: model.head.linear(feats[torch.as_tensor(idx)])  # noqa: E731
    else:
        model.train()
        forward = lambda idx: model(torch.from_numpy(data.windows[idx]))  # noqa: E731

    def val_loss():
        if cfg.stage == 1:
            with torch.no_grad():
                return float(torch.mean((forward(val_idx) - bold[torch.as_tensor(val_idx)]) ** 2))
        return evaluate_mse(model, data, val_idx)

    best_state, best_val, step = None, math.inf, 0
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            if cfg.stage == 2:
                model.train()
            losses = []
            for batch in epoch_batches(train_idx, cfg.batch_size, cfg.seed, cfg.stage, epoch):
                step += 1
                lr = lr_at_step(step, total, cfg.base_lr, cfg.warmup_frac)
                opt.zero_grad()
                loss = l2_mse_loss(forward(batch), bold[torch.as_tensor(batch)], penalized, cfg.lam)
                loss.backward()
                opt.step(lr)
                record.lr_trace.append(lr)
                losses.append(float(loss.detach()))
            if cfg.stage == 2 and cfg.recalibrate:
                model.calibrate(data.windows[train_idx])
            v = val_loss()
            if not math.isfinite(losses[-1]):
                raise FloatingPointError(f"stage {cfg.stage} diverged at epoch {epoch} (loss {losses[-1]})")
            record.train_loss.append(float(np.mean(losses)))
            record.val_loss.append(v)
            record.wall_time.append(time.perf_counter() - t0)
            if v < best_val:
                best_val, record.best_epoch = v, epoch
                best_state = copy.deepcopy(model.state_dict())
            log.debug("stage %d epoch %d train %.6g val %.6g", cfg.stage, epoch, record.train_loss[-1], v)
    finally:
        _unfreeze(model)
        model.eval()
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, record


def tune_lambda(grid: Sequence[float], train_fn: Callable[[float], float],
                bounds: tuple[float, float] | None = LAMBDA_BOUNDS) -> tuple[float, list[dict]]:
    """Pick the lambda with the lowest validation MSE; ties go to the larger lambda.

    ``train_fn(lam)`` trains a fresh model and returns its validation MSE.
    """
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("lambda grid must not be empty")
    if bounds is not None:
        lo, hi = bounds
        out = [g for g in grid if not lo <= g <= hi]
        if out:
            raise ValueError(f"lambda values {out} outside [{lo}, {hi}]")
    report = [{"lambda": lam, "val_mse": float(train_fn(lam))} for lam in grid]
    finite = [r for r in report if math.isfinite(r["val_mse"])]
    if not finite:
        raise FloatingPointError("validation loss is NaN/inf for every lambda")
    best = min(finite, key=lambda r: (r["val_mse"], -r["lambda"]))
    return best["lambda"], report


@dataclass
class RefineConfig:
    stage1: StageConfig = field(default_factory=lambda: StageConfig(stage=1))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(stage=2))
    lambda_grid: list | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RefineConfig":
        return cls(StageConfig.from_dict({"stage": 1, **d.get("stage1", {})}),
                   StageConfig.from_dict({"stage": 2, **d.get("stage2", {})}),
                   d.get("lambda_grid"))

    def to_dict(self) -> dict:
        return {"stage1": self.stage1.to_dict(), "stage2": self.stage2.to_dict(), "lambda_grid": self.lambda_grid}


@dataclass
class RefineResult:
    model: EncodingModel
    before: ParamSnapshot
    after_stage1: ParamSnapshot
    after: ParamSnapshot
    records: tuple
    lambda_report: list | None = None
    chosen_lambda: float | None = None


def full_snapshot(model: EncodingModel) -> ParamSnapshot:
    return ParamSnapshot.of(model, include_buffers=True)


def refine(model: EncodingModel, data: EncodingData, cfg: RefineConfig | None = None) -> RefineResult:
    """Calibrate statistics, optionally tune lambda on stage 1, then run stage 1 and stage 2."""
    cfg = cfg or RefineConfig()
    if model.n * 75 * 320 != data.windows.shape[1]:
        raise ValueError(f"windows of {data.windows.shape[1]} samples do not match n={model.n}")
    if not model.is_calibrated():
        model.calibrate(data.windows[data.split.train])
    before = full_snapshot(model)

    s1, s2 = cfg.stage1, cfg.stage2
    lam_report = chosen = None
    if cfg.lambda_grid:
        def trial(lam):
            trial_model = copy.deepcopy(model)
            _, rec = run_stage(trial_model, data, StageConfig(**{**asdict(s1), "lam": lam}))
            return rec.best_val

        chosen, lam_report = tune_lambda(cfg.lambda_grid, trial)
        s1 = StageConfig(**{**asdict(s1), "lam": chosen})
        s2 = StageConfig(**{**asdict(s2), "lam": chosen})

    _, rec1 = run_stage(model, data, s1)
    mid = full_snapshot(model)
    _, rec2 = run_stage(model, data, s2)
    return RefineResult(model, before, mid, full_snapshot(model), (rec1, rec2), lam_report, chosen)


def freeze_report(result: RefineResult) -> dict:
    """Which parameter groups changed in each stage (bit-exact comparison)."""
    def split(snap):
        lin = snap.subset("head.linear.")
        rest = ParamSnapshot({k: v for k, v in snap.arrays.items() if not k.startswith("head.linear.")})
        return lin, rest

    b_lin, b_rest = split(result.before)
    m_lin, m_rest = split(result.after_stage1)
    a_lin, a_rest = split(result.after)
    return {
        "stage1_non_linear_unchanged": b_rest == m_rest,
        "stage1_linear_changed": not (b_lin == m_lin),
        "stage2_linear_unchanged": m_lin == a_lin,
        "stage2_non_linear_changed": not (m_rest == a_rest),
    }


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
