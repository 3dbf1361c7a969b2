"""Data model: records, stratified patient-disjoint splits, the labeled /
unlabeled experiment grid, manifest IO, and a procedural synthetic generator
of ordinal joint images for desk-scale runs.

Splits are pure functions of (records, seed); the synthetic generator is a
pure function of (grade, seed, size).
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .imageprep import PatchPair, load_pair

GRADES = (0, 1, 2, 3, 4)
N_CLASSES = len(GRADES)


class InsufficientData(ValueError):
    """Not enough records to satisfy a split or setting request."""


class ParseError(ValueError):
    """Malformed manifest row; message carries the line number."""


class MissingFile(FileNotFoundError):
    """A manifest row points at a pair blob that does not exist."""


@dataclass(frozen=True)
class Record:
    """One knee image: id, owning patient, optional grade, and where the
    patch-pair blob lives (a file path or a synth: URI)."""

    id: str
    patient_id: str
    grade: int | None
    pair_path: str

    def __post_init__(self):
        if self.grade is not None and self.grade not in GRADES:
            raise ValueError(f"grade {self.grade} outside {GRADES}")


@dataclass(frozen=True)
class DataSetting:
    """One cell of the experiment grid."""

    fold: int
    labels_per_grade: int
    unlabeled_multiplier: int

    def __post_init__(self):
        if not 1 <= self.fold:
            raise ValueError("fold is 1-based")
        if self.labels_per_grade < 1 or self.unlabeled_multiplier < 0:
            raise ValueError("bad setting")

    @property
    def n_labeled(self) -> int:
        return self.labels_per_grade * N_CLASSES

    @property
    def n_unlabeled(self) -> int:
        return self.unlabeled_multiplier * self.n_labeled


@dataclass
class SplitPlan:
    """Patient-disjoint labeled/unlabeled pools, each cut into folds."""

    labeled_folds: list[list[str]]
    unlabeled_folds: list[list[str]]

    @property
    def labeled_pool(self) -> list[str]:
        return [i for fold in self.labeled_folds for i in fold]

    @property
    def unlabeled_pool(self) -> list[str]:
        return [i for fold in self.unlabeled_folds for i in fold]

    @property
    def n_folds(self) -> int:
        return len(self.labeled_folds)

    def to_json(self) -> str:
        return json.dumps({"labeled_folds": self.labeled_folds,
                           "unlabeled_folds": self.unlabeled_folds})

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        d = json.loads(text)
        return cls(labeled_folds=d["labeled_folds"],
                   unlabeled_folds=d["unlabeled_folds"])


def _stable_hash(seed: int, key: str) -> int:
    digest = hashlib.blake2b(f"{seed}:{key}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stratified_split(records: list[Record], labeled_fraction: float,
                     n_folds: int, seed: int) -> SplitPlan:
    """Split records into labeled/unlabeled pools and folds, stratified by
    grade, keeping each patient's records together.

    Patients are ordered by a seeded hash within each grade group, assigned
    to the labeled pool by running-count balancing against the target
    fraction, then dealt round-robin into folds. Deterministic given seed.
    """
    for r in records:
        if r.grade is None:
            raise ValueError(f"record {r.id} has no grade")

    per_grade_counts = {g: 0 for g in GRADES}
    patients: dict[str, list[Record]] = {}
    for r in records:
        patients.setdefault(r.patient_id, []).append(r)
        per_grade_counts[r.grade] += 1
    for g, n in per_grade_counts.items():
        if n < n_folds:
            raise InsufficientData(f"grade {g} has {n} records < {n_folds} folds")

    def majority_grade(recs: list[Record]) -> int:
        counts = {}
        for r in recs:
            counts[r.grade] = counts.get(r.grade, 0) + 1
        return min(sorted(counts), key=lambda g: -counts[g])

    by_grade: dict[int, list[tuple[str, list[Record]]]] = {g: [] for g in GRADES}
    for pid, recs in patients.items():
        by_grade[majority_grade(recs)].append((pid, recs))

    labeled_folds: list[list[str]] = [[] for _ in range(n_folds)]
    unlabeled_folds: list[list[str]] = [[] for _ in range(n_folds)]
    next_fold = {"labeled": 0, "unlabeled": 0}

    for g in GRADES:
        group = sorted(by_grade[g], key=lambda p: (_stable_hash(seed, p[0]), p[0]))
        seen = 0
        labeled_seen = 0
        for pid, recs in group:
            size = len(recs)
            target = labeled_fraction * (seen + size)
            if abs(labeled_seen + size - target) < abs(labeled_seen - target):
                pool, folds = "labeled", labeled_folds
                labeled_seen += size
            else:
                pool, folds = "unlabeled", unlabeled_folds
            seen += size
            fold = next_fold[pool]
            folds[fold].extend(sorted(r.id for r in recs))
            next_fold[pool] = (fold + 1) % n_folds

    return SplitPlan(labeled_folds=labeled_folds, unlabeled_folds=unlabeled_folds)


def realize_setting(plan: SplitPlan, setting: DataSetting, seed: int,
                    records: list[Record],
                    ) -> tuple[list[Record], list[Record], list[Record]]:
    """Materialize one grid cell: draw `labels_per_grade` labeled records per
    grade from the training folds, `multiplier * N` grade-stripped unlabeled
    records, and hand back the held-out labeled fold as validation."""
    if setting.fold > plan.n_folds:
        raise ValueError(f"fold {setting.fold} > {plan.n_folds}")
    by_id = {r.id: r for r in records}
    held = setting.fold - 1

    train_labeled = [by_id[i] for f, fold in enumerate(plan.labeled_folds)
                     if f != held for i in fold]
    val = [by_id[i] for i in plan.labeled_folds[held]]
    train_unlabeled = [by_id[i] for f, fold in enumerate(plan.unlabeled_folds)
                       if f != held for i in fold]

    rng = np.random.default_rng(
        [seed, setting.fold, setting.labels_per_grade, setting.unlabeled_multiplier])

    labeled: list[Record] = []
    for g in GRADES:
        candidates = sorted(r.id for r in train_labeled if r.grade == g)
        if len(candidates) < setting.labels_per_grade:
            raise InsufficientData(
                f"grade {g}: {len(candidates)} < {setting.labels_per_grade}")
        picked = rng.choice(len(candidates), size=setting.labels_per_grade,
                            replace=False)
        labeled.extend(by_id[candidates[i]] for i in picked)

    pool = sorted(r.id for r in train_unlabeled)
    if len(pool) < setting.n_unlabeled:
        raise InsufficientData(f"unlabeled pool {len(pool)} < {setting.n_unlabeled}")
    picked = rng.choice(len(pool), size=setting.n_unlabeled, replace=False)
    unlabeled = [replace(by_id[pool[i]], grade=None) for i in picked]

    return labeled, unlabeled, val


# ---------------------------------------------------------------------------
# synthetic ordinal joint images

SYNTH_NOISE_SIGMA = 0.4


def synth_generate(grade: int, seed: int, size: int = 64,
                   noise_sigma: float = SYNTH_NOISE_SIGMA) -> PatchPair:
    """Procedurally draw one patch pair encoding ordinal severity.

    Two bright horizontal bands (bone plateaus) flank a dark joint-space gap
    whose width shrinks monotonically with grade; `grade` bright blobs sit on
    the band edges (osteophyte stand-ins); seeded Gaussian noise and smooth
    background texture provide within-class variation. Deterministic per
    (grade, seed, size); values clipped to [-1, 1].
    """
    if grade not in GRADES:
        raise ValueError(f"grade {grade} outside {GRADES}")
    if size < 16:
        raise ValueError("size must be >= 16")
    rng = np.random.default_rng([grade, seed, size])

    # joint geometry is shared between the two patches of a pair
    cy = size * float(np.clip(0.5 + 0.06 * rng.standard_normal(), 0.35, 0.65))
    gap = size * (0.26 - 0.035 * grade) * float(np.exp(0.10 * rng.standard_normal()))
    gap = max(gap, 1.2)
    thickness = size * 0.13 * float(np.exp(0.15 * rng.standard_normal()))
    band_level = 0.65 + 0.12 * float(rng.standard_normal())
    base_level = -0.55 + 0.10 * float(rng.standard_normal())

    rows = np.arange(size, dtype=np.float64)[:, None]
    cols = np.arange(size, dtype=np.float64)[None, :]
    edge = 0.7  # softness of band edges, px

    def sigmoid(z):
        return 1.0 / (1.0 + np.exp(-z))

    def band(lo, hi):
        return sigmoid((rows - lo) / edge) - sigmoid((rows - hi) / edge)

    def one_patch():
        img = np.full((size, size), base_level)
        # smooth low-frequency texture
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 2.5, size=2)
            phase = rng.uniform(0, 2 * np.pi, size=2)
            amp = rng.uniform(0.04, 0.16)
            img += amp * np.sin(2 * np.pi * fy * rows / size + phase[0]) \
                       * np.sin(2 * np.pi * fx * cols / size + phase[1])

        femur_lo = cy - gap / 2 - thickness
        femur_hi = cy - gap / 2
        tibia_lo = cy + gap / 2
        tibia_hi = cy + gap / 2 + thickness
        img += band_level * (band(femur_lo, femur_hi) + band(tibia_lo, tibia_hi))

        # osteophyte blobs hanging off the band edges
        sigma = size * 0.035
        for k in range(grade):
            bx = rng.uniform(0.1 * size, 0.9 * size)
            by = femur_hi if k % 2 == 0 else tibia_lo
            by += rng.uniform(-1.0, 1.0)
            amp = 0.55 + 0.15 * rng.standard_normal()
            img += amp * np.exp(-((cols - bx) ** 2 + (rows - by) ** 2)
                                / (2 * sigma ** 2))

        if noise_sigma > 0:
            img += rng.normal(0.0, noise_sigma, size=(size, size))
        return np.clip(img, -1.0, 1.0).astype(np.float32)

    return PatchPair(lateral=one_patch(), medial=one_patch())


def synth_uri(grade: int, seed: int, size: int) -> str:
    return f"synth:{grade}:{seed}:{size}"


def _parse_synth_uri(uri: str) -> tuple[int, int, int]:
    _, grade, seed, size = uri.split(":")
    return int(grade), int(seed), int(size)


@lru_cache(maxsize=8192)
def _cached_synth_array(grade: int, seed: int, size: int) -> np.ndarray:
    arr = synth_generate(grade, seed, size).to_array()
    arr.setflags(write=False)
    return arr


def load_record_pair(record: Record) -> np.ndarray:
    """Resolve a record to its (2, H, H) float32 array. synth: URIs are
    generated on the fly (cached); anything else is read from disk."""
    if record.pair_path.startswith("synth:"):
        return _cached_synth_array(*_parse_synth_uri(record.pair_path))
    path = Path(record.pair_path)
    if not path.exists():
        raise MissingFile(str(path))
    return load_pair(path).to_array()


def make_synthetic_cohort(n_per_grade: int, seed: int, size: int = 64,
                          knees_per_patient: int = 2,
                          id_prefix: str = "s") -> list[Record]:
    """Build a balanced synthetic cohort: `n_per_grade` records per grade,
    grouped into patients of `knees_per_patient` same-grade knees."""
    records = []
    for grade in GRADES:
        for idx in range(n_per_grade):
            pair_seed = (seed * N_CLASSES + grade) * 1_000_003 + idx
            pid = f"{id_prefix}{seed}-g{grade}p{idx // knees_per_patient:05d}"
            records.append(Record(
                id=f"{id_prefix}{seed}-g{grade}n{idx:05d}",
                patient_id=pid,
                grade=grade,
                pair_path=synth_uri(grade, pair_seed, size),
            ))
    return records


# ---------------------------------------------------------------------------
# manifest IO

MANIFEST_FIELDS = ("id", "patient_id", "grade", "pair_path")


def write_manifest(path: str | Path, records: list[Record]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            writer.writerow([r.id, r.patient_id,
                             "" if r.grade is None else r.grade, r.pair_path])


def load_manifest(path: str | Path, check_files: bool = False) -> list[Record]:
    """Read a manifest CSV. Raises ParseError with the offending line number,
    or MissingFile when check_files is set and a blob path dangles."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_FIELDS:
            raise ParseError(f"{path}:1: expected header {','.join(MANIFEST_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_FIELDS):
                raise ParseError(f"{path}:{lineno}: expected {len(MANIFEST_FIELDS)} "
                                 f"fields, got {len(row)}")
            rec_id, pid, grade_s, pair_path = (v.strip() for v in row)
            grade = None
            if grade_s:
                try:
                    grade = int(grade_s)
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: bad grade {grade_s!r}") from None
            try:
                rec = Record(id=rec_id, patient_id=pid, grade=grade,
                             pair_path=pair_path)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if check_files and not pair_path.startswith("synth:") \
                    and not Path(pair_path).exists():
                raise MissingFile(f"{path}:{lineno}: {pair_path}")
            records.append(rec)
    return records
