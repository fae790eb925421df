"""Command-line entry point: ``protoxfer gen-data | train | eval | sweep``."""

from __future__ import annotations

import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import click

from protoxfer import data as D
from protoxfer.config import ENV_PREFIX, RunConfig, dump_config, load_config
from protoxfer.errors import ConfigError, DataError, ProtoxferError
from protoxfer.evalsuite import (SWEEP_AXES, build_backbone, evaluate, prepare_data, threshold_sweep,
                                 write_evaluation, write_sweep)
from protoxfer.model import load_checkpoint
from protoxfer.transfer import train, write_history

EPILOG = (f"Environment overrides: {ENV_PREFIX}<SECTION>__<KEY>=value "
          f"(e.g. {ENV_PREFIX}TRAIN__ALPHA=0.2). Precedence: flag > env > config file > default.")


def _fail(exc: ProtoxferError):
    click.echo(f"error: {exc}", err=True)
    sys.exit(exc.exit_code)


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {text!r}") from None


def _overrides(**flags) -> dict:
    """Nested override dict from flags that were actually given."""
    mapping = {
        "seed": ("train", "seed"), "eda": ("train", "eda_variant"), "alpha": ("train", "alpha"),
        "beta": ("train", "beta"), "gamma": ("train", "gamma"),
        "sigma_align": ("train", "sigma_align"), "sigma_clf": ("train", "sigma_clf"),
        "epochs": ("train", "total_epochs"), "warmup": ("train", "warmup_epochs"),
        "lr": ("train", "learning_rate"), "target_fraction": ("data", "target_fraction"),
        "target_manifest": ("data", "target_manifest"), "aux_manifest": ("data", "aux_manifest"),
        "test_manifest": ("data", "test_manifest"), "out": ("output_dir",),
    }
    out: dict = {}
    for key, value in flags.items():
        if value is None or key not in mapping:
            continue
        path = mapping[key]
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    if flags.get("batch_size") is not None:
        out.setdefault("train", {}).update(batch_size_target=flags["batch_size"],
                                           batch_size_aux=flags["batch_size"])
    if flags.get("no_psa"):
        out.setdefault("train", {})["beta"] = 0.0
    if flags.get("seed") is not None:
        out.setdefault("data", {}).setdefault("synthetic", {})["seed"] = flags["seed"]
    return out


def _write_file_manifest(run_dir: Path) -> Path:
    entries = []
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != "files.json":
            entries.append({"path": p.relative_to(run_dir).as_posix(),
                            "sha256": hashlib.sha256(p.read_bytes()).hexdigest()})
    out = run_dir / "files.json"
    out.write_text(json.dumps(entries, indent=2) + "\n")
    return out


def _load(config_path, **flags) -> RunConfig:
    return load_config(config_path, _overrides(**flags))


@click.group(epilog=EPILOG)
@click.option("-v", "--verbose", is_flag=True, help="Log per-epoch progress.")
def main(verbose: bool):
    """Cross-domain knowledge transfer with prototype-based filtering."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("gen-data", epilog=EPILOG)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Run config YAML.")
@click.option("--out", type=click.Path(file_okay=False), help="Output directory.")
@click.option("--seed", type=int, help="Generator and split seed.")
def gen_data(config_path, out, seed):
    """Generate the synthetic two-domain benchmark and its 4:1 target split."""
    try:
        cfg = _load(config_path, out=out, seed=seed)
        target, aux = D.generate_synthetic_domains(cfg.synthetic_spec())
        train_m, test_m = D.split_manifest(target, cfg.data.split_ratio,
                                           cfg.data.split_seed if seed is None else seed)
    except ProtoxferError as exc:
        _fail(exc)
    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    paths = {"target": run_dir / "target.tsv", "aux": run_dir / "aux.tsv",
             "target_train": run_dir / "target_train.tsv", "target_test": run_dir / "target_test.tsv"}
    for key, m in (("target", target), ("aux", aux), ("target_train", train_m), ("target_test", test_m)):
        D.write_manifest(m, paths[key])
        click.echo(f"{key:13s} {paths[key]}  histogram={m.histogram}")
    click.echo(f"aux label flips: {aux.meta.get('n_flipped', 0)}")
    dump_config(cfg, run_dir / "config.yaml")
    _write_file_manifest(run_dir)


def _train_options(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Run config YAML."),
        click.option("--out", type=click.Path(file_okay=False), help="Run directory."),
        click.option("--seed", type=int, help="Seed for data generation, split and training."),
        click.option("--eda", type=click.Choice(["adversarial", "mkmmd", "off"]), help="Early alignment variant."),
        click.option("--no-psa", is_flag=True, default=False, help="Drop the contrastive alignment loss (beta=0)."),
        click.option("--alpha", type=float), click.option("--beta", type=float),
        click.option("--gamma", type=float, help="Weight of the auxiliary classification loss."),
        click.option("--sigma-align", type=float), click.option("--sigma-clf", type=float),
        click.option("--epochs", type=int), click.option("--warmup", type=int),
        click.option("--lr", type=float), click.option("--batch-size", type=int),
        click.option("--target-fraction", type=float),
        click.option("--target-manifest", type=click.Path(dir_okay=False)),
        click.option("--aux-manifest", type=click.Path(dir_okay=False)),
        click.option("--test-manifest", type=click.Path(dir_okay=False)),
        click.option("--no-aux", is_flag=True, default=False, help="Train without auxiliary data."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


@main.command("train", epilog=EPILOG)
@_train_options
def train_cmd(config_path, no_aux, **flags):
    """Train a model; writes checkpoint.pt, history.csv and config.yaml to the run directory."""
    try:
        cfg = _load(config_path, **flags)
        prepared = prepare_data(cfg)
        backbone = build_backbone(cfg, prepared.train)
    except ProtoxferError as exc:
        _fail(exc)
    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    tcfg = replace(cfg.train, checkpoint_path=str(run_dir / "checkpoint.pt"))
    try:
        result = train(prepared.train, None if no_aux else prepared.aux, tcfg, backbone=backbone,
                       val_dataset=prepared.test, image_size=cfg.data.image_size)
    except ProtoxferError as exc:
        _fail(exc)
    write_history(result.history, run_dir / "history.csv")
    D.write_manifest(prepared.test, run_dir / "target_test.tsv")
    D.write_manifest(prepared.train, run_dir / "target_train.tsv")
    dump_config(cfg, run_dir / "config.yaml")
    _write_file_manifest(run_dir)
    last = result.history[-1]
    click.echo(f"trained {len(result.history)} epochs; final total loss {last['total']:.6f}, "
               f"val accuracy {last['val_accuracy']:.4f}")
    click.echo(f"checkpoint: {run_dir / 'checkpoint.pt'}")


@main.command("eval", epilog=EPILOG)
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", type=click.Path(dir_okay=False),
              help="Evaluation manifest (default: target_test.tsv next to the checkpoint).")
@click.option("--out", type=click.Path(file_okay=False), help="Report directory (default: <run>/eval).")
@click.option("--positive-class", type=int, default=1, show_default=True)
def eval_cmd(checkpoint, manifest, out, positive_class):
    """Evaluate a checkpoint: metrics, ROC points and per-group prediction summaries."""
    ckpt = Path(checkpoint)
    manifest = Path(manifest) if manifest else ckpt.parent / "target_test.tsv"
    out_dir = Path(out) if out else ckpt.parent / "eval"
    try:
        model, _ = load_checkpoint(ckpt)
        m = D.read_manifest(manifest)
        ev = evaluate(model, m, positive_class)
    except FileNotFoundError as exc:
        _fail(DataError(str(exc)))
    except ProtoxferError as exc:
        _fail(exc)
    for p in write_evaluation(out_dir, ev):
        click.echo(str(p))
    rep = ev.report
    auc = "undefined" if rep.roc_auc is None else f"{rep.roc_auc:.4f}"
    click.echo(f"accuracy {rep.accuracy:.4f}  precision {rep.precision:.4f}  recall {rep.recall:.4f}  "
               f"f1 {rep.f1:.4f}  roc_auc {auc}")


@main.command("sweep", epilog=EPILOG)
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False))
@click.option("--axis", required=True, help=f"One of {', '.join(SWEEP_AXES)}.")
@click.option("--grid", required=True, help="Comma-separated values, e.g. 0,0.5,0.9.")
@click.option("--seeds", default="0,1,2", show_default=True, help="Comma-separated seeds.")
@click.option("--jobs", default=1, show_default=True, type=int, help="Parallel training processes.")
@click.option("--epochs", type=int)
@click.option("--warmup", type=int)
def sweep_cmd(config_path, out, axis, grid, seeds, jobs, epochs, warmup):
    """Train one model per (grid value, seed) and tabulate mean and sd accuracy."""
    if axis not in SWEEP_AXES:
        raise click.UsageError(f"invalid axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    grid_vals = _parse_floats(grid)
    seed_vals = [int(s) for s in _parse_floats(seeds)]
    try:
        cfg = _load(config_path, out=out, epochs=epochs, warmup=warmup)
        rows, summary, best = threshold_sweep(cfg, axis, grid_vals, seed_vals, jobs)
    except ProtoxferError as exc:
        _fail(exc)
    run_dir = Path(cfg.output_dir)
    for p in write_sweep(run_dir, rows, summary, best):
        click.echo(str(p))
    dump_config(cfg, run_dir / "config.yaml")
    _write_file_manifest(run_dir)
    for r in summary:
        click.echo(f"{axis}={r['value']:g}: {r['mean_accuracy']:.4f} +/- {r['sd_accuracy']:.4f} (n={r['n']})")
    click.echo(f"best {axis}: {best:g}")


if __name__ == "__main__":
    main()
