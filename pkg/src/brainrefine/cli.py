"""Command line entry point: ``brainrefine <subcommand> [--config FILE] [flags]``.

Every subcommand takes a JSON config; flags override individual keys.
Relative output directories resolve under ``$BRAINREFINE_OUTPUT_ROOT`` when
it is set.  Each run writes ``run.json`` (the resolved config), and the
subdirectories ``checkpoints/``, ``reports/`` and ``figures/`` as needed, plus
``manifest.json`` with SHA-256 hashes of every output.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("brainrefine")

OUTPUT_ROOT_ENV = "BRAINREFINE_OUTPUT_ROOT"
LAYOUT_VERSION = 1


class ConfigError(Exception):
    pass


# -- config helpers ----------------------------------------------------------------


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")


def require(cfg: dict, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"missing config field(s): {', '.join(missing)}")


def resolve_output(path) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p.resolve()


def resolve_input(path, base: Path | None = None) -> Path:
    p = Path(path)
    if not p.is_absolute() and base is not None and not p.exists():
        p = base / p
    return p.resolve()


def parse_n_values(spec) -> list[int]:
    """``"1..8"``, ``"1,2,6"`` or a list of ints."""
    if isinstance(spec, (list, tuple)):
        return [int(v) for v in spec]
    spec = str(spec)
    if ".." in spec:
        lo, hi = spec.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in spec.split(",") if v.strip()]


def prepare_output_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {path} is not writable: {exc}")
    return path


def write_run_json(out: Path, subcommand: str, cfg: dict) -> None:
    doc = {"layout_version": LAYOUT_VERSION, "subcommand": subcommand, "config": cfg}
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, exclude=("manifest.json", "timing.json")) -> dict:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name not in exclude)
    manifest = {str(p.relative_to(out)): sha256(p) for p in files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def write_csv(path: Path, rows: list[dict], fields: list[str] | None = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = fields or (list(rows[0]) if rows else [])
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(type(o))


# -- synth ----------------------------------------------------------------------------

SYNTH_DEFAULTS = {
    "noise_std": 0.1, "seed": 0, "teacher": "hrf_envelope", "tr_seconds": 1.5, "n_subjects": 1,
    "n_bands": 8, "backbone": {"dim": 32}, "teacher_layer": 4, "teacher_perturbation": 0.3, "n": 2,
}


def perturbed_copy(backbone, scale: float, seed: int):
    """Copy of ``backbone`` with Gaussian noise of ``scale`` x (per-tensor std) added to every parameter."""
    import torch

    teacher = copy.deepcopy(backbone)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, p in sorted(teacher.named_parameters()):
            std = float(p.std()) if p.numel() > 1 else 0.0
            std = std if std > 0 else 0.1
            p.add_(scale * std * torch.randn(p.shape, generator=gen))
    return teacher


def cmd_synth(cfg: dict) -> dict:
    from .backbone import backbone_from_config
    from .bold_dataset import (RoiAtlas, read_wav, save_atlas_csv, save_bold_bundle, stack_windows,
                               write_wav)
    from .synth_data import (HrfParams, SynthSpec, double_gamma_hrf, gen_stimulus, layer_teacher_bold,
                             synth_bold_hrf, voxel_readout)

    require(cfg, "output_dir", "n_trs", "n_voxels")
    cfg = {**SYNTH_DEFAULTS, **cfg}
    out = prepare_output_dir(resolve_output(cfg["output_dir"]))
    spec = SynthSpec(int(cfg["n_trs"]), int(cfg["n_voxels"]), float(cfg["noise_std"]), int(cfg["seed"]),
                     cfg["teacher"], float(cfg["tr_seconds"]), int(cfg["n_bands"]))
    write_run_json(out, "synth", cfg)

    wav_path = out / "stimulus.wav"
    write_wav(wav_path, gen_stimulus(spec.n_trs * spec.tr_seconds, spec.seed, spec.tr_seconds))
    audio = read_wav(wav_path)  # targets are built from the quantized audio actually shipped
    voxel_ids = list(range(spec.n_voxels))

    teacher_doc = {"kind": spec.teacher, "seed": spec.seed, "voxel_ids": voxel_ids}
    if spec.teacher == "hrf_envelope":
        hrf_params = HrfParams()
        hrf = double_gamma_hrf(hrf_params)
        readout = voxel_readout(spec.n_bands, voxel_ids, spec.seed)
        teacher_doc.update(hrf=hrf_params.__dict__, n_bands=spec.n_bands, readout=readout.tolist())
    else:
        base = backbone_from_config(cfg["backbone"])
        teacher = perturbed_copy(base, float(cfg["teacher_perturbation"]), spec.seed + 1)
        windows = stack_windows(audio, int(cfg["n"]), spec.tr_seconds, n_trs=spec.n_trs)
        readout = voxel_readout(base.dim, voxel_ids, spec.seed)
        teacher_doc.update(backbone=base.config_dict(), layer=int(cfg["teacher_layer"]),
                           perturbation=float(cfg["teacher_perturbation"]), n=int(cfg["n"]),
                           readout=readout.tolist())

    for s in range(int(cfg["n_subjects"])):
        subject = f"sub-{s + 1:02d}"
        sub_spec = SynthSpec(spec.n_trs, spec.n_voxels, spec.noise_std, spec.seed + 1000 * (s + 1),
                             spec.teacher, spec.tr_seconds, spec.n_bands)
        if spec.teacher == "hrf_envelope":
            session, _ = synth_bold_hrf(audio, sub_spec, hrf, readout=readout, voxel_ids=voxel_ids,
                                        subject=subject)
        else:
            session = layer_teacher_bold(teacher, windows, int(cfg["teacher_layer"]), readout, spec.noise_std,
                                         sub_spec.seed, voxel_ids, spec.tr_seconds, subject)
        save_bold_bundle(session, out / subject)

    rois = ("EAC", "AAC", "IFG")
    half = (spec.n_voxels + 1) // 2
    atlas = RoiAtlas({v: ("L" if i < half else "R", rois[i % 3]) for i, v in enumerate(voxel_ids)}, "synthetic")
    save_atlas_csv(atlas, out / "atlas.csv")
    dump_json(out / "teacher.json", teacher_doc)
    return {"output_dir": str(out), "manifest": write_manifest(out)}


# -- prepare --------------------------------------------------------------------------

PREPARE_DEFAULTS = {"roi_labels": ["EAC", "AAC", "IFG"], "ratios": [0.8, 0.1, 0.1], "split_seed": 0,
                    "split_mode": "shuffled", "subject_mode": "average", "bundles": None, "atlas": "atlas.csv",
                    "audio": "stimulus.wav"}


def cmd_prepare(cfg: dict) -> dict:
    from .bold_dataset import (average_subjects, load_atlas_csv, load_bold_bundle, read_wav, save_bold_bundle,
                               select_roi_voxels, split_trs, zscore_per_voxel)

    require(cfg, "input_dir", "output_dir")
    cfg = {**PREPARE_DEFAULTS, **cfg}
    src = resolve_input(cfg["input_dir"])
    out = prepare_output_dir(resolve_output(cfg["output_dir"]))
    write_run_json(out, "prepare", cfg)

    bundles = cfg["bundles"] or sorted(p.stem for p in src.glob("*.bold"))
    if not bundles:
        raise ConfigError(f"no .bold bundles found in {src}")
    sessions = [load_bold_bundle(resolve_input(b, src)) for b in bundles]
    atlas = load_atlas_csv(resolve_input(cfg["atlas"], src))
    voxels = select_roi_voxels(atlas, cfg["roi_labels"])
    sessions = [s.select_voxels(voxels) for s in sessions]
    split = split_trs(sessions[0].n_trs, cfg["ratios"], int(cfg["split_seed"]), cfg["split_mode"])

    if cfg["subject_mode"] == "average":
        prepared = {"bold": zscore_per_voxel(average_subjects(sessions), split.train)}
    elif cfg["subject_mode"] == "per_subject":
        prepared = {s.subject_ids[0]: zscore_per_voxel(s, split.train) for s in sessions}
    else:
        raise ConfigError(f"subject_mode must be 'average' or 'per_subject', got {cfg['subject_mode']!r}")
    for name, session in prepared.items():
        save_bold_bundle(session, out / name)

    audio = read_wav(resolve_input(cfg["audio"], src))
    shutil.copyfile(resolve_input(cfg["audio"], src), out / "stimulus.wav")
    if len(audio) < sessions[0].n_trs * round(sessions[0].tr_seconds * 16000):
        raise ConfigError("stimulus audio is shorter than the BOLD session")
    dump_json(out / "split.json", split.to_dict())
    return {"output_dir": str(out), "bundles": list(prepared), "n_voxels": len(voxels),
            "manifest": write_manifest(out)}


# -- shared data loading --------------------------------------------------------------


def load_prepared(cfg: dict, n: int):
    from .bold_dataset import DatasetSplit, load_bold_bundle, read_wav, stack_windows
    from .trainer import EncodingData

    data_dir = resolve_input(cfg["data_dir"])
    session = load_bold_bundle(data_dir / cfg.get("bundle", "bold"))
    split = DatasetSplit.from_dict(json.loads((data_dir / "split.json").read_text()))
    audio = read_wav(data_dir / "stimulus.wav")
    windows = stack_windows(audio, n, session.tr_seconds, n_trs=session.n_trs)
    return session, audio, EncodingData(windows, session.bold, split)


# -- refine ---------------------------------------------------------------------------

REFINE_DEFAULTS = {"bundle": "bold", "n": 2, "backbone": {"dim": 32}, "head_seed": 0, "stage1": {}, "stage2": {},
                   "lambda_grid": None, "change_metric": "relative_l1"}


def _record_to_json(rec) -> dict:
    return {"stage": rec.stage, "train_loss": rec.train_loss, "val_loss": rec.val_loss, "lr_trace": rec.lr_trace,
            "best_epoch": rec.best_epoch, "steps_per_epoch": rec.steps_per_epoch}


def _record_from_json(d):
    from .trainer import TrainRecord

    return TrainRecord(d["stage"], d["train_loss"], d["val_loss"], d["lr_trace"], [], d["best_epoch"],
                       d["steps_per_epoch"])


def build_model(cfg: dict, n_voxels: int):
    from .backbone import backbone_from_config
    from .encoding_head import EncodingHead, EncodingModel

    backbone = backbone_from_config(cfg["backbone"])
    return EncodingModel(backbone, EncodingHead(int(cfg["n"]), backbone.dim, n_voxels, seed=int(cfg["head_seed"])))


def cmd_refine(cfg: dict, force: bool = False) -> dict:
    import time

    from .backbone import ParamSnapshot, group_attention_changes, load_module_state, param_change_pct, save_module
    from .plotting import plot_param_changes
    from .trainer import RefineConfig, StageConfig, full_snapshot, run_stage, tune_lambda

    require(cfg, "data_dir", "output_dir")
    cfg = {**REFINE_DEFAULTS, **cfg}
    out = prepare_output_dir(resolve_output(cfg["output_dir"]))
    ck, rp, fg = out / "checkpoints", out / "reports", out / "figures"

    run_json = out / "run.json"
    if run_json.exists():
        previous = json.loads(run_json.read_text()).get("config")
        if previous != json.loads(json.dumps(cfg)):
            if not force:
                raise ConfigError(f"{out} holds a run with a different config; pass --force to overwrite")
            for d in (ck, rp, fg):
                shutil.rmtree(d, ignore_errors=True)
    for d in (ck, rp, fg):
        d.mkdir(exist_ok=True)
    write_run_json(out, "refine", cfg)

    session, _, data = load_prepared(cfg, int(cfg["n"]))
    rcfg = RefineConfig.from_dict(cfg)
    model = build_model(cfg, session.n_voxels)
    model_cfg = {"backbone": model.backbone.config_dict(), "n": model.n, "n_voxels": session.n_voxels,
                 "head_seed": int(cfg["head_seed"]), "voxel_ids": session.voxel_ids}
    timing, resumed = {}, []

    save_module(ck / "vanilla_backbone.ckpt", model.backbone, model.backbone.config_dict())
    if not (ck / "stage1.ckpt").exists():
        model.calibrate(data.windows[data.split.train])
    before = full_snapshot(model) if not (ck / "before.ckpt").exists() else ParamSnapshot.load(ck / "before.ckpt")
    before.save(ck / "before.ckpt", model_cfg)

    s1, s2 = rcfg.stage1, rcfg.stage2
    if (ck / "stage1.ckpt").exists() and (ck / "stage1_record.json").exists():
        load_module_state(model, ck / "stage1.ckpt")
        meta = json.loads((ck / "stage1_record.json").read_text())
        rec1 = _record_from_json(meta["record"])
        s1 = StageConfig.from_dict(meta["stage_config"])
        resumed.append("stage1")
    else:
        t0 = time.perf_counter()
        if rcfg.lambda_grid:
            def trial(lam):
                m = copy.deepcopy(model)
                _, r = run_stage(m, data, StageConfig(**{**s1.__dict__, "lam": lam}))
                return r.best_val

            chosen, report = tune_lambda(rcfg.lambda_grid, trial)
            write_csv(rp / "lambda_report.csv", report)
            s1 = StageConfig(**{**s1.__dict__, "lam": chosen})
        _, rec1 = run_stage(model, data, s1)
        timing["stage1_seconds"] = time.perf_counter() - t0
        save_module(ck / "stage1.ckpt", model, model_cfg)
        dump_json(ck / "stage1_record.json", {"record": _record_to_json(rec1), "stage_config": s1.to_dict()})
    mid = full_snapshot(model)

    if rcfg.lambda_grid:
        s2 = StageConfig(**{**s2.__dict__, "lam": s1.lam})
    if (ck / "refined.ckpt").exists() and (ck / "stage2_record.json").exists():
        load_module_state(model, ck / "refined.ckpt")
        rec2 = _record_from_json(json.loads((ck / "stage2_record.json").read_text())["record"])
        resumed.append("stage2")
    else:
        t0 = time.perf_counter()
        _, rec2 = run_stage(model, data, s2)
        timing["stage2_seconds"] = time.perf_counter() - t0
        save_module(ck / "refined.ckpt", model, model_cfg)
        dump_json(ck / "stage2_record.json", {"record": _record_to_json(rec2), "stage_config": s2.to_dict()})
    after = full_snapshot(model)
    save_module(ck / "refined_backbone.ckpt", model.backbone, model.backbone.config_dict())
    mid.save(ck / "after_stage1.ckpt", model_cfg)
    after.save(ck / "after.ckpt", model_cfg)

    rec1.write_csv(rp / "train_stage1.csv")
    rec2.write_csv(rp / "train_stage2.csv")
    freeze = _freeze_checks(before, mid, after)
    dump_json(rp / "freeze_report.json", freeze)

    params_before = ParamSnapshot({k: v for k, v in before.arrays.items() if k in dict(model.named_parameters())})
    params_after = ParamSnapshot({k: after.arrays[k] for k in params_before.arrays})
    pct = param_change_pct(params_before.subset("backbone."), params_after.subset("backbone."),
                           cfg["change_metric"])
    rows = group_attention_changes(pct)
    write_csv(rp / "param_change.csv", rows, ["layer", "param_type", "kind", "pct"])
    write_csv(rp / "param_change_all.csv", [{"name": k, "pct": v} for k, v in pct.items()], ["name", "pct"])
    for kind in ("weight", "bias"):
        plot_param_changes(rows, fg / f"param_change_{kind}.svg", kind)
    summary = {"stage1": rec1.summary(), "stage2": rec2.summary(), "lambda_stage1": s1.lam, "lambda_stage2": s2.lam,
               "freeze": freeze}
    dump_json(rp / "summary.json", summary)

    if timing:
        dump_json(out / "timing.json", timing)
    return {"output_dir": str(out), "resumed": resumed, "freeze": freeze, "manifest": write_manifest(out)}


def _freeze_checks(before, mid, after) -> dict:
    from .backbone import param_change_pct
    from .trainer import RefineResult, freeze_report

    report = freeze_report(RefineResult(None, before, mid, after, ()))
    bb = param_change_pct(before.subset("backbone."), mid.subset("backbone."))
    report["stage1_backbone_max_change_pct"] = max((v for v in bb.values() if v == v), default=0.0)
    return report


# -- eval -----------------------------------------------------------------------------

EVAL_DEFAULTS = {"bundle": "bold", "alphas": None, "probe": {}}


def _load_refine_run(refine_dir: Path):
    from .backbone import backbone_from_config, load_module_state

    run = json.loads((refine_dir / "run.json").read_text())["config"]
    vanilla = backbone_from_config(run["backbone"])
    load_module_state(vanilla, refine_dir / "checkpoints" / "vanilla_backbone.ckpt")
    refined = backbone_from_config(run["backbone"])
    load_module_state(refined, refine_dir / "checkpoints" / "refined_backbone.ckpt")
    return run, vanilla, refined


def cmd_eval(cfg: dict) -> dict:
    from .neuro_eval import (DEFAULT_ALPHAS, energy_probe_task, layer_weight_change_rate,
                             layerwise_encoding_scores, paired_t_test_one_tailed, probe_layer_weights)
    from .plotting import plot_change_rates, plot_layer_pcc

    require(cfg, "refine_dir", "output_dir")
    cfg = {**EVAL_DEFAULTS, **cfg}
    refine_dir = resolve_input(cfg["refine_dir"])
    run, vanilla, refined = _load_refine_run(refine_dir)
    if cfg.get("data_dir") is None:
        cfg["data_dir"] = run["data_dir"]
    out = prepare_output_dir(resolve_output(cfg["output_dir"]))
    write_run_json(out, "eval", cfg)
    rp, fg = out / "reports", out / "figures"

    session, audio, data = load_prepared({**run, **cfg}, int(run["n"]))
    alphas = cfg["alphas"] or DEFAULT_ALPHAS
    scores = {name: layerwise_encoding_scores(bb, data.windows, data.bold, data.split, alphas, session.voxel_ids)
              for name, bb in (("vanilla", vanilla), ("refined", refined))}
    rows = scores["vanilla"].rows("vanilla") + scores["refined"].rows("refined")
    write_csv(rp / "encoding_scores.csv", rows, ["model", "layer", "mean_pcc", "median_alpha"])
    dump_json(rp / "voxel_pcc.json", {m: {"voxel_ids": session.voxel_ids, "pcc": s.voxel_pcc, "alpha": s.alphas}
                                      for m, s in scores.items()})

    tests = []
    for layer in range(len(scores["vanilla"].voxel_pcc)):
        a, b = scores["refined"].voxel_pcc[layer], scores["vanilla"].voxel_pcc[layer]
        try:
            r = paired_t_test_one_tailed(a, b)
            tests.append({"metric": f"pcc_layer_{layer}", "t": r.t, "df": r.df, "p": r.p, "n": r.n, "note": ""})
        except ValueError as exc:
            # e.g. a frozen layer gives identical scores; keep the row, leave the statistic undefined
            tests.append({"metric": f"pcc_layer_{layer}", "t": float("nan"), "df": len(a) - 1,
                          "p": float("nan"), "n": len(a), "note": str(exc)})
    write_csv(rp / "ttests.csv", tests, ["metric", "t", "df", "p", "n", "note"])

    probe_cfg = {"clip_seconds": 1.0, "n_classes": 3, "n_clips": 48, "seed": 0, "steps": 300, **cfg["probe"]}
    clips, labels = energy_probe_task(audio, probe_cfg["clip_seconds"], probe_cfg["n_classes"],
                                      probe_cfg["n_clips"], probe_cfg["seed"])
    w_v = probe_layer_weights(vanilla, clips, labels, steps=probe_cfg["steps"], seed=probe_cfg["seed"])
    w_r = probe_layer_weights(refined, clips, labels, steps=probe_cfg["steps"], seed=probe_cfg["seed"])
    rates = layer_weight_change_rate(w_v, w_r)
    write_csv(rp / "probe_layer_weights.csv",
              [{"task": "energy", "layer": l, "vanilla": float(w_v[l]), "refined": float(w_r[l]),
                "change_rate": float(rates[l])} for l in range(len(w_v))],
              ["task", "layer", "vanilla", "refined", "change_rate"])

    plot_layer_pcc(scores["vanilla"].layer_mean, scores["refined"].layer_mean, fg / "layer_pcc.svg")
    plot_change_rates({"energy": rates}, fg / "layer_weight_change_rates.svg")
    summary = {m: {"layer_mean_pcc": s.layer_mean, "best_layer": s.best_layer} for m, s in scores.items()}
    summary["mean_pcc_delta_layers_1_to_L"] = float(np.mean(np.subtract(summary["refined"]["layer_mean_pcc"][1:],
                                                                        summary["vanilla"]["layer_mean_pcc"][1:])))
    dump_json(rp / "summary.json", summary)
    return {"output_dir": str(out), "summary": summary, "manifest": write_manifest(out)}


# -- sweep ----------------------------------------------------------------------------

SWEEP_DEFAULTS = {"bundle": "bold", "n_values": "1..8", "backbone": {"dim": 32}, "head_seed": 0,
                  "stage1": {}, "stage2": {}, "alphas": None}


def cmd_sweep(cfg: dict) -> dict:
    from .backbone import backbone_from_config
    from .neuro_eval import DEFAULT_ALPHAS, context_sweep
    from .plotting import plot_sweep
    from .trainer import RefineConfig

    require(cfg, "data_dir", "output_dir")
    cfg = {**SWEEP_DEFAULTS, **cfg}
    n_values = parse_n_values(cfg["n_values"])
    out = prepare_output_dir(resolve_output(cfg["output_dir"]))
    write_run_json(out, "sweep", cfg)
    session, audio, data = load_prepared(cfg, 1)
    report = context_sweep(n_values, audio, session.bold, data.split, backbone_from_config(cfg["backbone"]),
                           RefineConfig.from_dict(cfg), int(cfg["head_seed"]), cfg["alphas"] or DEFAULT_ALPHAS,
                           session.tr_seconds)
    rows = report.rows()
    write_csv(out / "reports" / "sweep.csv", rows)
    dump_json(out / "reports" / "sweep.json", {str(n): e.__dict__ for n, e in report.entries.items()})
    plot_sweep(rows, out / "figures" / "sweep.svg")
    return {"output_dir": str(out), "rows": rows, "manifest": write_manifest(out)}


# -- score ----------------------------------------------------------------------------


def cmd_score(paths, exclude=("SF",), json_out=None) -> list[dict]:
    from .superb_score import fixture_path, load_results_csv, per_task_scores, superb_s

    results = []
    for p in paths:
        path = Path(p)
        if not path.exists() and not path.suffix:
            path = fixture_path(str(p))
        elif not path.exists():
            bundled = fixture_path(path.name)
            path = bundled if bundled.exists() else path
        table = load_results_csv(path, exclude)
        results.append({"path": str(path), "tasks": per_task_scores(table), "superb_s": superb_s(table)})
    for res in results:
        print(f"# {res['path']}")
        for t in res["tasks"]:
            flag = "" if t["included"] else "  (excluded)"
            print(f"{t['task']:>4} {t['metric']:>4} {t['score']:10.2f}{flag}")
        print(f"superb_s: {res['superb_s']:.2f}")
    if json_out:
        dump_json(resolve_output(json_out), results if len(results) > 1 else results[0])
    return results


# -- analyze-params -------------------------------------------------------------------


def cmd_analyze_params(cfg: dict) -> dict:
    from .backbone import ParamSnapshot, group_attention_changes, param_change_pct
    from .plotting import plot_param_changes

    require(cfg, "before", "after", "output_dir")
    out = prepare_output_dir(resolve_output(cfg["output_dir"]))
    write_run_json(out, "analyze-params", cfg)
    before = ParamSnapshot.load(resolve_input(cfg["before"]))
    after = ParamSnapshot.load(resolve_input(cfg["after"]))
    prefix = cfg.get("prefix", "")
    keep = [k for k in before.arrays if k.startswith(prefix) and not k.endswith(("running_mean", "running_var",
                                                                                  "num_batches_tracked", "fitted",
                                                                                  "standardizer.mean",
                                                                                  "standardizer.var"))]
    pct = param_change_pct(ParamSnapshot({k: before.arrays[k] for k in keep}),
                           ParamSnapshot({k: after.arrays[k] for k in keep}), cfg.get("metric", "relative_l1"))
    rows = group_attention_changes(pct)
    write_csv(out / "reports" / "param_change.csv", rows, ["layer", "param_type", "kind", "pct"])
    for kind in ("weight", "bias"):
        plot_param_changes(rows, out / "figures" / f"param_change_{kind}.svg", kind)
    return {"output_dir": str(out), "rows": rows, "manifest": write_manifest(out)}


# -- argument parsing -----------------------------------------------------------------


def _overrides(args, names) -> dict:
    return {k: v for k in names if (v := getattr(args, k, None)) is not None}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="brainrefine", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--output-dir", dest="output_dir")
        return sp

    sp = add("synth", "generate a synthetic stimulus, BOLD bundles and an atlas")
    sp.add_argument("--n-trs", dest="n_trs", type=int)
    sp.add_argument("--n-voxels", dest="n_voxels", type=int)
    sp.add_argument("--noise-std", dest="noise_std", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--teacher", choices=["hrf_envelope", "linear_backbone"])
    sp.add_argument("--n-subjects", dest="n_subjects", type=int)

    sp = add("prepare", "select ROI voxels, aggregate subjects, split and z-score")
    sp.add_argument("--input-dir", dest="input_dir")
    sp.add_argument("--split-seed", dest="split_seed", type=int)
    sp.add_argument("--split-mode", dest="split_mode", choices=["shuffled", "contiguous"])
    sp.add_argument("--subject-mode", dest="subject_mode", choices=["average", "per_subject"])

    sp = add("refine", "two-stage refinement of the backbone")
    sp.add_argument("--data-dir", dest="data_dir")
    sp.add_argument("--n", type=int)
    sp.add_argument("--force", action="store_true", help="overwrite a run with a different config")

    sp = add("eval", "layerwise encoding scores, t-tests and layer-weight probe")
    sp.add_argument("--refine-dir", dest="refine_dir")
    sp.add_argument("--data-dir", dest="data_dir")

    sp = add("sweep", "refine and score for several context lengths")
    sp.add_argument("--data-dir", dest="data_dir")
    sp.add_argument("--n", dest="n_values", help='context lengths, e.g. "1..8" or "1,2,6"')

    sp = sub.add_parser("score", help="aggregate benchmark score of results tables")
    sp.add_argument("paths", nargs="+", help="results CSV files or bundled fixture names")
    sp.add_argument("--exclude", nargs="*", default=["SF"], help="tasks left out of the aggregate")
    sp.add_argument("--json", dest="json_out", help="write a JSON report here")
    sp.add_argument("--config", help="ignored; accepted for uniformity")

    sp = add("analyze-params", "parameter change percentages between two snapshots")
    sp.add_argument("--before")
    sp.add_argument("--after")
    sp.add_argument("--metric", choices=["relative_l1", "mean_relative"])
    sp.add_argument("--prefix")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command == "score":
            cmd_score(args.paths, args.exclude, args.json_out)
            return 0
        cfg = load_config(args.config)
        if args.command == "synth":
            cfg.update(_overrides(args, ["output_dir", "n_trs", "n_voxels", "noise_std", "seed", "teacher",
                                         "n_subjects"]))
            result = cmd_synth(cfg)
        elif args.command == "prepare":
            cfg.update(_overrides(args, ["output_dir", "input_dir", "split_seed", "split_mode", "subject_mode"]))
            result = cmd_prepare(cfg)
        elif args.command == "refine":
            cfg.update(_overrides(args, ["output_dir", "data_dir", "n"]))
            result = cmd_refine(cfg, force=args.force)
        elif args.command == "eval":
            cfg.update(_overrides(args, ["output_dir", "refine_dir", "data_dir"]))
            result = cmd_eval(cfg)
        elif args.command == "sweep":
            cfg.update(_overrides(args, ["output_dir", "data_dir", "n_values"]))
            result = cmd_sweep(cfg)
        else:
            cfg.update(_overrides(args, ["output_dir", "before", "after", "metric", "prefix"]))
            result = cmd_analyze_params(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({k: v for k, v in result.items() if k != "manifest"}, indent=2, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
