"""BOLD time series containers, ROI selection, TR-aligned audio windows and splits.

A :class:`BoldSession` holds one BOLD vector per TR.  Bundles on disk are a
raw little-endian float32 matrix (``<name>.bold``) next to a JSON sidecar
(``<name>.json``).
"""

from __future__ import annotations

import csv
import json
import math
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SAMPLE_RATE = 16000
HEMISPHERES = ("L", "R")
SIDECAR_KEYS = ("n_trs", "n_voxels", "tr_seconds", "voxel_ids", "subject_ids", "standardized")


class BoldFormatError(ValueError):
    """Raised for malformed bundles, atlases or audio files."""


@dataclass
class BoldSession:
    bold: np.ndarray
    voxel_ids: list[int]
    tr_seconds: float = 1.5
    subject_ids: list[str] = field(default_factory=list)
    standardized: bool = False

    def __post_init__(self):
        self.bold = np.ascontiguousarray(self.bold, dtype=np.float32)
        if self.bold.ndim != 2:
            raise ValueError(f"bold must be a 2-D matrix (n_trs x V), got shape {self.bold.shape}")
        if self.bold.shape[0] < 1:
            raise ValueError("a session needs at least one TR")
        if self.bold.shape[1] != len(self.voxel_ids):
            raise ValueError(
                f"bold has {self.bold.shape[1]} columns but {len(self.voxel_ids)} voxel ids were given"
            )
        if not self.tr_seconds > 0:
            raise ValueError(f"tr_seconds must be positive, got {self.tr_seconds}")
        self.voxel_ids = [int(v) for v in self.voxel_ids]
        self.subject_ids = [str(s) for s in self.subject_ids]

    @property
    def n_trs(self) -> int:
        return self.bold.shape[0]

    @property
    def n_voxels(self) -> int:
        return self.bold.shape[1]

    def select_voxels(self, voxel_ids: Sequence[int]) -> "BoldSession":
        """Return a session restricted to ``voxel_ids`` in the given order."""
        index = {v: i for i, v in enumerate(self.voxel_ids)}
        missing = [v for v in voxel_ids if v not in index]
        if missing:
            raise KeyError(f"voxels not present in session: {missing[:10]}")
        cols = [index[v] for v in voxel_ids]
        return replace(self, bold=self.bold[:, cols], voxel_ids=list(voxel_ids))

    def __eq__(self, other):
        if not isinstance(other, BoldSession):
            return NotImplemented
        return (
            self.voxel_ids == other.voxel_ids
            and self.tr_seconds == other.tr_seconds
            and self.subject_ids == other.subject_ids
            and self.standardized == other.standardized
            and self.bold.shape == other.bold.shape
            and self.bold.tobytes() == other.bold.tobytes()
        )


@dataclass(frozen=True)
class RoiAtlas:
    """Mapping voxel id -> (hemisphere, ROI label)."""

    entries: dict
    source_name: str = "atlas"

    def __post_init__(self):
        for vid, (hemi, _label) in self.entries.items():
            if hemi not in HEMISPHERES:
                raise BoldFormatError(f"voxel {vid}: hemisphere must be L or R, got {hemi!r}")

    @property
    def labels(self) -> set[str]:
        return {label for _, label in self.entries.values()}

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[int, str, str]], source_name: str = "atlas") -> "RoiAtlas":
        entries = {}
        for vid, hemi, label in rows:
            vid = int(vid)
            if vid in entries:
                raise BoldFormatError(f"duplicate voxel id {vid} in atlas {source_name}")
            entries[vid] = (hemi, label)
        return cls(entries, source_name)


def load_atlas_csv(path) -> RoiAtlas:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["voxel_id", "hemisphere", "roi_label"]
        if reader.fieldnames != expected:
            raise BoldFormatError(f"{path}: atlas header must be {','.join(expected)}, got {reader.fieldnames}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append((int(row["voxel_id"]), row["hemisphere"], row["roi_label"]))
            except ValueError:
                raise BoldFormatError(f"{path}:{lineno}: voxel_id is not an integer: {row['voxel_id']!r}")
    return RoiAtlas.from_rows(rows, source_name=path.name)


def save_atlas_csv(atlas: RoiAtlas, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["voxel_id", "hemisphere", "roi_label"])
        for vid in sorted(atlas.entries):
            hemi, label = atlas.entries[vid]
            writer.writerow([vid, hemi, label])


# Vertices per hemisphere on fsaverage6 and the per-hemisphere auditory/language
# ROI sizes of the reference preprocessing (left 2617, right 2468).
FSAVERAGE6_VERTICES = 40962
REFERENCE_ROI_COUNTS = {
    "L": {"EAC": 512, "AAC": 1183, "IFG": 922},
    "R": {"EAC": 487, "AAC": 1109, "IFG": 872},
}


def reference_layout_atlas(seed: int = 0) -> RoiAtlas:
    """A stand-in atlas with the fsaverage6 vertex count and the reference ROI sizes.

    Real Glasser labels are not shipped; ROI membership is drawn at random
    with the per-hemisphere counts of the reference pipeline, all remaining
    vertices are labelled ``OTHER``.  Left-hemisphere vertices get ids
    ``0..40961`` and right-hemisphere vertices ``40962..81923``.
    """
    rng = np.random.default_rng(seed)
    entries = {}
    for h, hemi in enumerate(HEMISPHERES):
        offset = h * FSAVERAGE6_VERTICES
        perm = rng.permutation(FSAVERAGE6_VERTICES)
        labels = np.full(FSAVERAGE6_VERTICES, "OTHER", dtype=object)
        start = 0
        for roi, count in REFERENCE_ROI_COUNTS[hemi].items():
            labels[perm[start:start + count]] = roi
            start += count
        for i in range(FSAVERAGE6_VERTICES):
            entries[offset + i] = (hemi, labels[i])
    return RoiAtlas(entries, source_name="fsaverage6-reference-layout")


def select_roi_voxels(atlas: RoiAtlas, roi_labels) -> list[int]:
    """Voxel ids belonging to any of ``roi_labels``, ordered L before R then by id."""
    roi_labels = set(roi_labels)
    if not roi_labels:
        raise ValueError("roi_labels must not be empty")
    unknown = roi_labels - atlas.labels
    if unknown:
        raise KeyError(f"unknown ROI label(s) for atlas {atlas.source_name}: {sorted(unknown)}")
    chosen = [(HEMISPHERES.index(hemi), vid) for vid, (hemi, label) in atlas.entries.items() if label in roi_labels]
    if not chosen:
        raise ValueError(f"no voxels selected for ROI labels {sorted(roi_labels)}")
    return [vid for _, vid in sorted(chosen)]


@dataclass(frozen=True)
class StimulusWindow:
    tr_index: int
    n: int
    samples: np.ndarray
    n_padding_samples: int
    sample_rate: int = SAMPLE_RATE


def samples_per_tr(tr_seconds: float, sample_rate: int = SAMPLE_RATE) -> int:
    spt = tr_seconds * sample_rate
    if abs(spt - round(spt)) > 1e-9:
        raise ValueError(f"tr_seconds * sample_rate must be an integer, got {spt}")
    return int(round(spt))


def assemble_window(audio, tr_index: int, n: int, tr_seconds: float = 1.5,
                    sample_rate: int = SAMPLE_RATE, n_trs: int | None = None) -> StimulusWindow:
    """Waveform covering the current TR and the ``n - 1`` before it.

    Seconds before the start of the recording are zero-filled on the left.
    ``n_trs`` defaults to the number of whole TRs in ``audio``.
    """
    audio = np.asarray(audio, dtype=np.float32)
    spt = samples_per_tr(tr_seconds, sample_rate)
    if n < 1:
        raise ValueError(f"context length n must be >= 1, got {n}")
    if n_trs is None:
        n_trs = len(audio) // spt
    elif len(audio) < n_trs * spt:
        raise ValueError(f"audio has {len(audio)} samples, session of {n_trs} TRs needs {n_trs * spt}")
    if not 0 <= tr_index < n_trs:
        raise IndexError(f"tr_index {tr_index} outside session of {n_trs} TRs")

    start = (tr_index - n + 1) * spt
    stop = (tr_index + 1) * spt
    n_pad = max(0, -start)
    samples = np.zeros(n * spt, dtype=np.float32)
    samples[n_pad:] = audio[max(start, 0):stop]
    return StimulusWindow(tr_index, n, samples, n_pad, sample_rate)


def stack_windows(audio, n: int, tr_seconds: float = 1.5, n_trs: int | None = None,
                  sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """All windows of a session as an ``(n_trs, n * samples_per_tr)`` array."""
    spt = samples_per_tr(tr_seconds, sample_rate)
    if n_trs is None:
        n_trs = len(audio) // spt
    return np.stack([
        assemble_window(audio, t, n, tr_seconds, sample_rate, n_trs=n_trs).samples for t in range(n_trs)
    ])


@dataclass(frozen=True)
class DatasetSplit:
    train: list[int]
    val: list[int]
    test: list[int]
    seed: int
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    mode: str = "shuffled"

    def to_dict(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test, "seed": self.seed,
                "ratios": list(self.ratios), "mode": self.mode}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(list(d["train"]), list(d["val"]), list(d["test"]), int(d["seed"]),
                   tuple(d["ratios"]), d.get("mode", "shuffled"))


def split_trs(n_trs: int, ratios=(0.8, 0.1, 0.1), seed: int = 0, mode: str = "shuffled") -> DatasetSplit:
    """Partition TR indices into train/val/test.

    Validation and test sizes are ``floor(ratio * n_trs)``; the remainder goes
    to training.  ``mode="contiguous"`` keeps temporal blocks (train first,
    then val, then test) so neighbouring windows do not straddle splits.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)!r}")
    n_val = math.floor(ratios[1] * n_trs + 1e-9)
    n_test = math.floor(ratios[2] * n_trs + 1e-9)
    n_train = n_trs - n_val - n_test

    if mode == "shuffled":
        order = np.random.Generator(np.random.PCG64(seed & 0xFFFFFFFFFFFFFFFF)).permutation(n_trs)
    elif mode == "contiguous":
        order = np.arange(n_trs)
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    order = [int(i) for i in order]
    train = sorted(order[:n_train])
    val = sorted(order[n_train:n_train + n_val])
    test = sorted(order[n_train + n_val:])
    return DatasetSplit(train, val, test, seed, ratios, mode)


def zscore_per_voxel(session: BoldSession, fit_indices) -> BoldSession:
    """Standardize each voxel with mean/std (population) taken over ``fit_indices`` only."""
    fit_indices = list(fit_indices)
    if not fit_indices:
        raise ValueError("fit_indices must not be empty")
    data = session.bold.astype(np.float64)
    fit = data[fit_indices]
    mean = fit.mean(axis=0)
    std = fit.std(axis=0)
    bad = np.flatnonzero(std == 0)
    if bad.size:
        raise ValueError(f"voxel {session.voxel_ids[bad[0]]} has zero variance over the fit TRs")
    return replace(session, bold=((data - mean) / std).astype(np.float32), standardized=True)


def average_subjects(sessions: Sequence[BoldSession]) -> BoldSession:
    """TR-wise mean across subjects sharing a TR grid and voxel ordering."""
    if not sessions:
        raise ValueError("need at least one session")
    first = sessions[0]
    for s in sessions[1:]:
        if s.bold.shape != first.bold.shape:
            raise ValueError(f"shape mismatch: {s.bold.shape} vs {first.bold.shape}")
        if s.voxel_ids != first.voxel_ids:
            raise ValueError("voxel ordering differs between sessions")
        if s.tr_seconds != first.tr_seconds:
            raise ValueError("TR duration differs between sessions")
    if len(sessions) == 1:
        return replace(first, bold=first.bold.copy())
    mean = np.mean([s.bold.astype(np.float64) for s in sessions], axis=0)
    subjects = [sid for s in sessions for sid in s.subject_ids]
    return replace(first, bold=mean.astype(np.float32), subject_ids=subjects,
                   standardized=False)


def _bundle_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".bold", ".json") else path
    return stem.with_suffix(".bold"), stem.with_suffix(".json")


def save_bold_bundle(session: BoldSession, path) -> tuple[Path, Path]:
    """Write ``<name>.bold`` and ``<name>.json``; returns both paths."""
    bold_path, meta_path = _bundle_paths(path)
    bold_path.parent.mkdir(parents=True, exist_ok=True)
    bold_path.write_bytes(session.bold.astype("<f4").tobytes(order="C"))
    meta = {
        "n_trs": session.n_trs,
        "n_voxels": session.n_voxels,
        "tr_seconds": session.tr_seconds,
        "voxel_ids": session.voxel_ids,
        "subject_ids": session.subject_ids,
        "standardized": session.standardized,
    }
    meta_path.write_text(json.dumps(meta, indent=1) + "\n")
    return bold_path, meta_path


def load_bold_bundle(path) -> BoldSession:
    bold_path, meta_path = _bundle_paths(path)
    if not meta_path.exists():
        raise FileNotFoundError(f"missing sidecar {meta_path}")
    if not bold_path.exists():
        raise FileNotFoundError(f"missing payload {bold_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise BoldFormatError(f"{meta_path}: invalid JSON ({exc})")
    for key in SIDECAR_KEYS:
        if key not in meta:
            raise BoldFormatError(f"{meta_path}: missing metadata field {key!r}")
    n_trs, n_vox = int(meta["n_trs"]), int(meta["n_voxels"])
    if len(meta["voxel_ids"]) != n_vox:
        raise BoldFormatError(f"{meta_path}: n_voxels={n_vox} but {len(meta['voxel_ids'])} voxel_ids listed")
    payload = bold_path.read_bytes()
    expected = 4 * n_trs * n_vox
    if len(payload) != expected:
        raise BoldFormatError(
            f"{bold_path}: payload is {len(payload)} bytes, expected {expected} (4 * {n_trs} * {n_vox})"
        )
    bold = np.frombuffer(payload, dtype="<f4").reshape(n_trs, n_vox).astype(np.float32)
    return BoldSession(bold, meta["voxel_ids"], float(meta["tr_seconds"]), meta["subject_ids"],
                       bool(meta["standardized"]))


def write_wav(path, waveform, sample_rate: int = SAMPLE_RATE) -> None:
    """Mono 16-bit PCM; samples are clipped to [-1, 1]."""
    pcm = np.round(np.clip(np.asarray(waveform, dtype=np.float64), -1.0, 1.0) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path, expected_rate: int = SAMPLE_RATE) -> np.ndarray:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise BoldFormatError(f"{path}: expected mono 16-bit PCM")
        if fh.getframerate() != expected_rate:
            raise BoldFormatError(f"{path}: sample rate {fh.getframerate()} Hz, expected {expected_rate} Hz")
        frames = fh.readframes(fh.getnframes())
    return (np.frombuffer(frames, dtype="<i2").astype(np.float32) / 32767.0)
