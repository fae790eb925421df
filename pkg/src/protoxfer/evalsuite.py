"""Experiment orchestration: data preparation, train + evaluate runs, threshold sweeps, reports."""

from __future__ import annotations

import csv
import json
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from protoxfer import data as D
from protoxfer.config import RunConfig
from protoxfer.errors import ConfigError, DataError, ProtoxferError
from protoxfer.metrics import MetricsReport, compute_metrics, prediction_distribution, roc_curve
from protoxfer.model import BackboneConfig, DomainTag, DualBranchNet, InputKind
from protoxfer.transfer import TrainResult, predict_proba, train

log = logging.getLogger(__name__)

SWEEP_AXES = ("sigma_align", "sigma_clf", "target_fraction")


@dataclass
class PreparedData:
    train: D.DatasetManifest
    test: D.DatasetManifest
    aux: Optional[D.DatasetManifest]


@dataclass
class Evaluation:
    report: MetricsReport
    roc: Optional[list[tuple[float, float]]]
    distribution: dict


@dataclass
class ExperimentResult:
    result: TrainResult
    evaluation: Evaluation
    data: PreparedData


def prepare_data(cfg: RunConfig, seed: Optional[int] = None) -> PreparedData:
    """Build target train/test and auxiliary manifests as the data section describes."""
    ds = cfg.data
    if ds.target_manifest:
        target = D.read_manifest(ds.target_manifest)
        aux = D.read_manifest(ds.aux_manifest) if ds.aux_manifest else None
    elif ds.target_folder:
        target = D.ingest_image_folder(ds.target_folder, ds.image_size)
        aux = None
        if ds.aux_folder:
            aux = replace(D.ingest_image_folder(ds.aux_folder, ds.image_size),
                          domain=DomainTag.AUXILIARY)
    else:
        target, aux = D.generate_synthetic_domains(cfg.synthetic_spec(seed))
    if ds.test_manifest:
        train_m, test_m = target, D.read_manifest(ds.test_manifest)
    else:
        train_m, test_m = D.split_manifest(target, ds.split_ratio, ds.split_seed if seed is None else seed)
    if ds.target_fraction < 1.0:
        train_m = D.stratified_fraction(train_m, ds.target_fraction,
                                        ds.split_seed if seed is None else seed)
    if aux is not None and len(aux) == 0:
        aux = None
    if aux is not None and aux.num_classes != train_m.num_classes:
        raise DataError(f"target has {train_m.num_classes} classes, auxiliary {aux.num_classes}")
    return PreparedData(train_m, test_m, aux)


def build_backbone(cfg: RunConfig, manifest: D.DatasetManifest) -> BackboneConfig:
    m = cfg.model
    if manifest.records and manifest.records[0].payload is None:
        kind, in_dim = InputKind.IMAGE, 3
        stages = m.stage_sizes or [16, 32, 64, 128]
    else:
        kind, in_dim = InputKind.VECTOR, len(manifest.records[0].payload)
        stages = m.stage_sizes or [64, 64, 64, 64]
    return BackboneConfig(
        input_kind=kind, input_dim=in_dim, stage_sizes=stages, split_stage=m.split_stage,
        hidden_dim_f=m.hidden_dim_f, proj_dim=m.proj_dim, num_classes=manifest.num_classes,
        disc_hidden=m.disc_hidden, grl_lambda=m.grl_lambda,
        tie_private_init=m.tie_private_init,
    )


def evaluate(model: DualBranchNet, manifest: D.DatasetManifest, positive_class: int = 1,
             seed: Optional[int] = None, image_size: Optional[int] = None) -> Evaluation:
    if len(manifest) == 0:
        raise DataError("evaluation manifest is empty")
    if manifest.num_classes != model.config.num_classes:
        raise ConfigError(
            f"num_classes differs: checkpoint has {model.config.num_classes}, "
            f"dataset has {manifest.num_classes}"
        )
    X, y = D.materialize(manifest, image_size)
    expected = model.config.input_dim
    if X.shape[1] != expected:
        raise ConfigError(f"input_dim differs: checkpoint has {expected}, dataset has {X.shape[1]}")
    probs = predict_proba(model, X)
    report = compute_metrics(probs, y, positive_class, seed)
    roc, dist = None, {}
    if model.config.num_classes == 2:
        pos = probs[:, positive_class].numpy()
        yb = y.numpy() == positive_class
        if report.roc_auc is not None:
            roc = roc_curve(pos, yb)
        fine = [r.fine_label if r.fine_label is not None else r.label for r in manifest.records]
        dist = prediction_distribution(pos, fine)
    return Evaluation(report, roc, dist)


def run_experiment(cfg: RunConfig, seed: Optional[int] = None) -> ExperimentResult:
    """Generate or load data, train, and evaluate on the held-out target split."""
    seed = cfg.train.seed if seed is None else seed
    prepared = prepare_data(cfg, seed)
    tcfg = replace(cfg.train, seed=seed)
    backbone = build_backbone(cfg, prepared.train)
    result = train(prepared.train, prepared.aux, tcfg, backbone=backbone,
                   image_size=cfg.data.image_size)
    ev = evaluate(result.model, prepared.test, cfg.eval.positive_class, seed, cfg.data.image_size)
    return ExperimentResult(result, ev, prepared)


def apply_axis(cfg: RunConfig, axis: str, value: float) -> RunConfig:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    if axis == "target_fraction":
        return replace(cfg, data=replace(cfg.data, target_fraction=float(value)))
    return replace(cfg, train=replace(cfg.train, **{axis: float(value)}))


def _sweep_job(args) -> dict:
    cfg, axis, value, seed = args
    try:
        res = run_experiment(apply_axis(cfg, axis, value), seed)
    except ProtoxferError as exc:
        raise type(exc)(f"[{axis}={value}, seed={seed}] {exc}") from None
    rep = res.evaluation.report
    return {"axis": axis, "value": float(value), "seed": int(seed), "accuracy": rep.accuracy,
            "roc_auc": rep.roc_auc, "f1": rep.f1}


def threshold_sweep(cfg: RunConfig, axis: str, grid: Sequence[float], seeds: Sequence[int],
                    jobs: int = 1) -> tuple[list[dict], list[dict], float]:
    """Train one model per (grid value, seed).

    Returns per-run rows, a per-value summary with mean and sample standard
    deviation of accuracy, and the grid value with the best mean accuracy.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    if not grid or not seeds:
        raise ConfigError("grid and seeds must be non-empty")
    tasks = [(cfg, axis, v, s) for v in grid for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_job, tasks))
    else:
        rows = [_sweep_job(t) for t in tasks]
    summary = []
    for v in grid:
        accs = [r["accuracy"] for r in rows if r["value"] == float(v)]
        summary.append({
            "axis": axis, "value": float(v), "n": len(accs),
            "mean_accuracy": float(np.mean(accs)),
            "sd_accuracy": float(statistics.stdev(accs)) if len(accs) > 1 else 0.0,
        })
    best = max(summary, key=lambda r: r["mean_accuracy"])["value"]
    return rows, summary, best


def _write_csv(path, rows: list[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def write_sweep(out_dir, rows: list[dict], summary: list[dict], best: float) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs_p, summ_p, best_p = out / "sweep_runs.csv", out / "sweep_summary.csv", out / "sweep_best.json"
    _write_csv(runs_p, rows, ("axis", "value", "seed", "accuracy", "roc_auc", "f1"))
    _write_csv(summ_p, summary, ("axis", "value", "n", "mean_accuracy", "sd_accuracy"))
    best_p.write_text(json.dumps({"axis": summary[0]["axis"], "best_value": best}, indent=2) + "\n")
    return [runs_p, summ_p, best_p]


def write_evaluation(out_dir, ev: Evaluation) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    p = out / "metrics.json"
    p.write_text(json.dumps(ev.report.to_dict(), indent=2, sort_keys=True) + "\n")
    written.append(p)
    p = out / "metrics.csv"
    d = ev.report.to_dict()
    _write_csv(p, [d], list(d))
    written.append(p)
    if ev.roc is not None:
        p = out / "roc_points.csv"
        _write_csv(p, [{"fpr": a, "tpr": b} for a, b in ev.roc], ("fpr", "tpr"))
        written.append(p)
    if ev.distribution:
        p = out / "prediction_distribution.json"
        p.write_text(json.dumps(ev.distribution, indent=2, sort_keys=True) + "\n")
        written.append(p)
    return written
