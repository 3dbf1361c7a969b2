"""Declarative experiment configs and the cell runner behind the train /
grid / ablate commands.

A config file (YAML or JSON) fully describes an experiment; unknown keys are
rejected before any work starts. Grid cells are resumable: a finished cell
leaves results.json and is skipped on re-run; a lock file guards against two
processes picking up the same cell.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import dataset as D
from .evaluate import evaluate_predictions
from .losses import LossWeights
from .network import NetworkConfig
from .trainer import METHODS, TrainConfig, predict_probs, train


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synth"                 # synth | manifest
    size: int = 32
    per_grade: int = 500
    cohort_seed: int = 7
    knees_per_patient: int = 2
    labeled_fraction: float = 0.25
    n_folds: int = 5
    split_seed: int = 11
    setting_seed: int = 13
    fold: int = 1
    labels_per_grade: int = 50
    unlabeled_multiplier: int = 6
    test_per_grade: int = 200
    test_seed: int = 991
    manifest: str | None = None
    test_manifest: str | None = None

    def __post_init__(self):
        if self.kind not in ("synth", "manifest"):
            raise ConfigError("data.kind must be synth or manifest")
        if self.kind == "manifest" and not (self.manifest and self.test_manifest):
            raise ConfigError("manifest data needs manifest and test_manifest")


@dataclass(frozen=True)
class GridConfig:
    methods: tuple[str, ...] = ("supervised", "semixup")
    labels_per_grade: tuple[int, ...] = (50,)
    unlabeled_multipliers: tuple[int, ...] = (6,)

    def __post_init__(self):
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown grid method {m!r}")


@dataclass(frozen=True)
class RunConfig:
    out_dir: str
    method: str = "semixup"
    seeds: tuple[int, ...] = (0,)
    net: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    sweep_w_ic: tuple[float, ...] = ()

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _build_section(cls, raw: dict, path: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {path}: {sorted(unknown)}")
    return raw


def load_run_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    """Parse and validate a config file, applying flat CLI overrides
    (e.g. {'method': 'pi', 'train.epochs': 5})."""
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    for key, value in (overrides or {}).items():
        section = raw
        parts = key.split(".")
        for p in parts[:-1]:
            section = section.setdefault(p, {})
        section[parts[-1]] = value

    allowed = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    if "out_dir" not in raw:
        raise ConfigError("out_dir is required")

    try:
        net = NetworkConfig(**_build_section(
            NetworkConfig, dict(raw.get("net", {})), "net"))
        train_raw = dict(raw.get("train", {}))
        _build_section(TrainConfig, train_raw, "train")
        if "weights" in train_raw:
            train_raw["weights"] = LossWeights(*train_raw["weights"])
        train_cfg = TrainConfig(**train_raw)
        data = DataConfig(**_build_section(
            DataConfig, dict(raw.get("data", {})), "data"))
        grid_raw = dict(raw.get("grid", {}))
        _build_section(GridConfig, grid_raw, "grid")
        grid = GridConfig(**{k: tuple(v) for k, v in grid_raw.items()})
        cfg = RunConfig(
            out_dir=str(raw["out_dir"]),
            method=raw.get("method", "semixup"),
            seeds=tuple(raw.get("seeds", (0,))),
            net=net, train=train_cfg, data=data, grid=grid,
            sweep_w_ic=tuple(raw.get("sweep_w_ic", ())),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg.method not in METHODS:
        raise ConfigError(f"unknown method {cfg.method!r}")
    return cfg


# ---------------------------------------------------------------------------
# data assembly

def build_pools(data: DataConfig) -> tuple[list[D.Record], D.SplitPlan]:
    if data.kind == "synth":
        records = D.make_synthetic_cohort(
            data.per_grade, data.cohort_seed, data.size,
            data.knees_per_patient, id_prefix="c")
    else:
        records = D.load_manifest(data.manifest)
    plan = D.stratified_split(records, data.labeled_fraction, data.n_folds,
                              data.split_seed)
    return records, plan


def build_test_set(data: DataConfig) -> list[D.Record]:
    if data.kind == "synth":
        return D.make_synthetic_cohort(
            data.test_per_grade, data.test_seed, data.size,
            data.knees_per_patient, id_prefix="t")
    return D.load_manifest(data.test_manifest)


def realize_cell(records, plan, data: DataConfig, labels_per_grade: int,
                 multiplier: int):
    setting = D.DataSetting(fold=data.fold, labels_per_grade=labels_per_grade,
                            unlabeled_multiplier=multiplier)
    return D.realize_setting(plan, setting, data.setting_seed, records)


# ---------------------------------------------------------------------------
# single cell

def run_cell(cfg: RunConfig, method: str, seed: int, run_dir: Path,
             labels_per_grade: int | None = None,
             multiplier: int | None = None,
             weights: LossWeights | None = None,
             pools=None, test_records=None) -> dict:
    """Train one model and evaluate it on the test set; writes the full run
    directory (config, history, checkpoint, results.json, test_preds.csv)."""
    lpg = labels_per_grade or cfg.data.labels_per_grade
    mult = cfg.data.unlabeled_multiplier if multiplier is None else multiplier
    records, plan = pools if pools is not None else build_pools(cfg.data)
    labeled, unlabeled, val = realize_cell(records, plan, cfg.data, lpg, mult)
    test = test_records if test_records is not None else build_test_set(cfg.data)

    tcfg = replace(cfg.train, method=method, seed=seed,
                   weights=weights or cfg.train.weights)
    net, history = train(tcfg, cfg.net, labeled, unlabeled, val,
                         run_dir=run_dir)

    x_test = np.stack([D.load_record_pair(r) for r in test])
    y_test = np.asarray([r.grade for r in test])
    probs = predict_probs(net, x_test)
    report = evaluate_predictions(y_test, probs)

    best = max(history.rows, key=lambda r: (r.val_ba, r.val_kc, -r.epoch))
    results = {
        "method": method, "seed": seed, "labels_per_grade": lpg,
        "unlabeled_multiplier": mult,
        "weights": asdict(tcfg.weights),
        "val_ba": best.val_ba, "val_kc": best.val_kc, "best_epoch": best.epoch,
        "test": {"ba": report.ba, "kappa": report.kappa, "mse": report.mse,
                 "auc": report.auc, "ap": report.ap, "n": report.n},
    }
    (run_dir / "results.json").write_text(json.dumps(results, indent=2))
    with open(run_dir / "test_preds.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "patient_id", "grade"] +
                        [f"p{c}" for c in range(5)])
        for rec, row in zip(test, probs):
            writer.writerow([rec.id, rec.patient_id, rec.grade] +
                            [f"{v:.8e}" for v in row])
    return results


RESULT_FIELDS = ("method", "labels_per_grade", "unlabeled_multiplier", "seed",
                 "w_in", "w_out", "w_ic", "ba", "kappa", "mse", "auc", "ap",
                 "val_ba", "val_kc", "best_epoch")


def _result_row(res: dict) -> list:
    w = res["weights"]
    t = res["test"]
    return [res["method"], res["labels_per_grade"],
            res["unlabeled_multiplier"], res["seed"],
            w["w_in"], w["w_out"], w["w_ic"],
            t["ba"], t["kappa"], t["mse"], t["auc"], t["ap"],
            res["val_ba"], res["val_kc"], res["best_epoch"]]


def _collect_results(cell_dirs: list[Path], out_csv: Path) -> int:
    rows = []
    missing = 0
    for d in cell_dirs:
        res_file = d / "results.json"
        if res_file.exists():
            rows.append(_result_row(json.loads(res_file.read_text())))
        else:
            missing += 1
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_FIELDS)
        writer.writerows(rows)
    return missing


def _run_one_guarded(cfg, method, seed, cell_dir, **kwargs) -> bool:
    """Run a cell unless done or locked; returns True on success/skip."""
    if (cell_dir / "results.json").exists():
        return True
    cell_dir.mkdir(parents=True, exist_ok=True)
    lock = cell_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        print(f"[skip] {cell_dir} is locked by another process")
        return True
    try:
        os.close(fd)
        run_cell(cfg, method, seed, cell_dir, **kwargs)
        return True
    except Exception as exc:  # noqa: BLE001 - cell isolation is the point
        print(f"[fail] {cell_dir}: {exc}")
        return False
    finally:
        lock.unlink(missing_ok=True)


def run_grid(cfg: RunConfig) -> tuple[Path, int]:
    """Run methods x labels x multipliers x seeds; resumable. Returns the
    long-format results CSV path and the number of failed cells."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pools = build_pools(cfg.data)
    test = build_test_set(cfg.data)

    cells = []
    failures = 0
    for method in cfg.grid.methods:
        for lpg in cfg.grid.labels_per_grade:
            for mult in cfg.grid.unlabeled_multipliers:
                for seed in cfg.seeds:
                    cell_dir = out / f"{method}_N{lpg}_M{mult}_s{seed}"
                    cells.append(cell_dir)
                    ok = _run_one_guarded(
                        cfg, method, seed, cell_dir, labels_per_grade=lpg,
                        multiplier=mult, pools=pools, test_records=test)
                    failures += 0 if ok else 1
    csv_path = out / "results.csv"
    _collect_results(cells, csv_path)
    return csv_path, failures


ABLATION_VARIANTS = (
    ("full", lambda w: w),
    ("no_in_manifold", lambda w: replace(w, w_in=0.0)),
    ("no_out_manifold", lambda w: replace(w, w_out=0.0)),
    ("no_interp", lambda w: replace(w, w_ic=0.0)),
)


def run_ablation(cfg: RunConfig) -> tuple[Path, int]:
    """Train the full objective and each single-term-ablated variant on one
    data setting; reports validation BA per variant and seed."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pools = build_pools(cfg.data)
    test = build_test_set(cfg.data)

    failures = 0
    rows = []
    for name, tweak in ABLATION_VARIANTS:
        for seed in cfg.seeds:
            cell_dir = out / f"ablate_{name}_s{seed}"
            ok = _run_one_guarded(cfg, "semixup", seed, cell_dir,
                                  weights=tweak(cfg.train.weights),
                                  pools=pools, test_records=test)
            failures += 0 if ok else 1
            res_file = cell_dir / "results.json"
            if res_file.exists():
                res = json.loads(res_file.read_text())
                rows.append([name, seed, res["val_ba"], res["val_kc"],
                             res["test"]["ba"]])
    csv_path = out / "ablation.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "seed", "val_ba", "val_kc", "test_ba"])
        writer.writerows(rows)
    return csv_path, failures


def run_weight_sweep(cfg: RunConfig) -> tuple[Path, int]:
    """Sweep the interpolation-consistency coefficient with the other two
    weights fixed, one cell per (w_ic, seed)."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pools = build_pools(cfg.data)
    test = build_test_set(cfg.data)
    failures = 0
    cells = []
    for w_ic in cfg.sweep_w_ic:
        for seed in cfg.seeds:
            cell_dir = out / f"sweep_wic{w_ic:g}_s{seed}"
            cells.append(cell_dir)
            ok = _run_one_guarded(
                cfg, "semixup", seed, cell_dir,
                weights=replace(cfg.train.weights, w_ic=float(w_ic)),
                pools=pools, test_records=test)
            failures += 0 if ok else 1
    csv_path = out / "sweep.csv"
    _collect_results(cells, csv_path)
    return csv_path, failures
