"""Command-line entry points.

Subcommands: preprocess, synth, train, eval, grid, ablate, sweep, report.
Exit codes: 0 success, 2 validation error, 3 partial failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import dataset as D
from . import imageprep as I
from .experiments import (ConfigError, build_pools, build_test_set,
                          load_run_config, realize_cell, run_ablation,
                          run_cell, run_grid, run_weight_sweep)
from .network import load_checkpoint
from .report import MissingRun, write_comparison_report, write_eval_bundle
from .trainer import predict_probs

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_PARTIAL = 3


@click.group()
def main():
    """Semi-supervised ordinal grading lab."""


def _parse_overrides(method, seed, epochs, labels_per_grade, unlabeled_mult,
                     out) -> dict:
    overrides = {}
    if method:
        overrides["method"] = method
    if seed is not None:
        overrides["seeds"] = [seed]
    if epochs is not None:
        overrides["train.epochs"] = epochs
    if labels_per_grade is not None:
        overrides["data.labels_per_grade"] = labels_per_grade
    if unlabeled_mult is not None:
        overrides["data.unlabeled_multiplier"] = unlabeled_mult
    if out:
        overrides["out_dir"] = out
    return overrides


def _load_config(config, **kwargs):
    try:
        return load_run_config(config, _parse_overrides(**kwargs))
    except (ConfigError, FileNotFoundError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)


config_opts = [
    click.option("--config", required=True, type=click.Path(exists=True)),
    click.option("--method", default=None),
    click.option("--seed", type=int, default=None),
    click.option("--epochs", type=int, default=None),
    click.option("--labels-per-grade", type=int, default=None),
    click.option("--unlabeled-mult", type=int, default=None),
    click.option("--out", default=None),
]


def with_config_opts(fn):
    for opt in reversed(config_opts):
        fn = opt(fn)
    return fn


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True),
              help="CSV: image_id,patient_id,grade,image_path")
@click.option("--landmarks", required=True, type=click.Path(exists=True),
              help="CSV: image_id,role,x,y")
@click.option("--out", required=True, type=click.Path())
def preprocess(manifest, landmarks, out):
    """Run the image pipeline over a manifest; emit pair blobs + manifest."""
    out_dir = Path(out)
    (out_dir / "pairs").mkdir(parents=True, exist_ok=True)
    try:
        marks = I.read_landmarks_csv(landmarks)
    except (KeyError, ValueError) as exc:
        click.echo(f"bad landmarks file: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)

    records = []
    failures = 0
    import csv as _csv
    with open(manifest, newline="") as fh:
        rows = list(_csv.DictReader(fh))
    for row in rows:
        image_id = row["image_id"]
        try:
            raw = I.read_raw_image(row["image_path"])
            pair = I.process_image(raw, marks[image_id])
            blob = out_dir / "pairs" / f"{image_id}.bin"
            I.save_pair(blob, pair)
            grade = int(row["grade"]) if row.get("grade") else None
            records.append(D.Record(id=image_id, patient_id=row["patient_id"],
                                    grade=grade, pair_path=str(blob)))
        except Exception as exc:  # noqa: BLE001 - per-record isolation
            failures += 1
            click.echo(f"[skip] {image_id}: {exc}", err=True)
    D.write_manifest(out_dir / "manifest.csv", records)
    click.echo(f"wrote {len(records)} pairs, {failures} skipped")
    sys.exit(EXIT_PARTIAL if failures else EXIT_OK)


@main.command()
@click.option("--per-grade", type=int, default=100)
@click.option("--size", type=int, default=64)
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True, type=click.Path())
@click.option("--materialize/--uri-only", default=True,
              help="write blobs, or just a manifest of synth: URIs")
def synth(per_grade, size, seed, out, materialize):
    """Generate a synthetic ordinal cohort."""
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = D.make_synthetic_cohort(per_grade, seed, size)
    if materialize:
        (out_dir / "pairs").mkdir(exist_ok=True)
        blobs = []
        for rec in records:
            pair = I.PatchPair.from_array(D.load_record_pair(rec).copy())
            blob = out_dir / "pairs" / f"{rec.id}.bin"
            I.save_pair(blob, pair)
            blobs.append(D.Record(rec.id, rec.patient_id, rec.grade, str(blob)))
        records = blobs
    D.write_manifest(out_dir / "manifest.csv", records)
    click.echo(f"wrote {len(records)} records to {out_dir}")


@main.command()
@with_config_opts
def train(config, **kwargs):
    """Train one model per configured seed."""
    cfg = _load_config(config, **kwargs)
    out = Path(cfg.out_dir)
    failures = 0
    for seed in cfg.seeds:
        run_dir = out / f"{cfg.method}_s{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        try:
            res = run_cell(cfg, cfg.method, seed, run_dir)
            click.echo(f"{run_dir}: test BA {res['test']['ba']:.4f} "
                       f"KC {res['test']['kappa']:.4f}")
        except Exception as exc:  # noqa: BLE001
            failures += 1
            click.echo(f"[fail] {run_dir}: {exc}", err=True)
    sys.exit(EXIT_PARTIAL if failures else EXIT_OK)


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--manifest", type=click.Path(exists=True),
              help="evaluate on these records (defaults to the config test set)")
@click.option("--config", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def eval_cmd(checkpoint, manifest, config, out):
    """Evaluate a checkpoint; emit report.json, curve CSVs, and SVG plots."""
    net, _meta = load_checkpoint(checkpoint)
    if manifest:
        records = D.load_manifest(manifest)
    elif config:
        cfg = _load_config(config, method=None, seed=None, epochs=None,
                           labels_per_grade=None, unlabeled_mult=None, out=None)
        records = build_test_set(cfg.data)
    else:
        click.echo("need --manifest or --config for the eval data", err=True)
        sys.exit(EXIT_VALIDATION)
    graded = [r for r in records if r.grade is not None]
    if not graded:
        click.echo("no graded records to evaluate", err=True)
        sys.exit(EXIT_VALIDATION)
    x = np.stack([D.load_record_pair(r) for r in graded])
    y = np.asarray([r.grade for r in graded])
    report = write_eval_bundle(out, y, predict_probs(net, x))
    click.echo(f"BA {report.ba:.4f} KC {report.kappa:.4f} n={report.n}")


@main.command()
@with_config_opts
def grid(config, **kwargs):
    """Run the methods x labels x multipliers x seeds grid (resumable)."""
    cfg = _load_config(config, **kwargs)
    csv_path, failures = run_grid(cfg)
    click.echo(f"results: {csv_path} ({failures} failed cells)")
    sys.exit(EXIT_PARTIAL if failures else EXIT_OK)


@main.command()
@with_config_opts
def ablate(config, **kwargs):
    """Zero each consistency term in turn and compare validation BA."""
    cfg = _load_config(config, **kwargs)
    csv_path, failures = run_ablation(cfg)
    click.echo(f"ablation table: {csv_path} ({failures} failed cells)")
    sys.exit(EXIT_PARTIAL if failures else EXIT_OK)


@main.command()
@with_config_opts
def sweep(config, **kwargs):
    """Sweep the interpolation-consistency weight (sweep_w_ic in config)."""
    cfg = _load_config(config, **kwargs)
    if not cfg.sweep_w_ic:
        click.echo("config needs sweep_w_ic values", err=True)
        sys.exit(EXIT_VALIDATION)
    csv_path, failures = run_weight_sweep(cfg)
    click.echo(f"sweep results: {csv_path} ({failures} failed cells)")
    sys.exit(EXIT_PARTIAL if failures else EXIT_OK)


@main.command()
@click.argument("run_dirs", nargs=-1, required=True,
                type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def report(run_dirs, out):
    """Render evaluation plots and pairwise comparisons for finished runs."""
    try:
        path = write_comparison_report(list(run_dirs), out)
    except (MissingRun, ValueError) as exc:
        click.echo(f"report error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    click.echo(f"report: {path}")


if __name__ == "__main__":
    main()
