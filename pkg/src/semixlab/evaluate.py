"""Evaluation metrics and the chunked one-sided signed-rank comparison
protocol.

All functions are pure. Grades are integers 0..4; probability inputs are
rows of 5-way softmax outputs.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

N_CLASSES = 5


class EmptyInput(ValueError):
    pass


class DegenerateLabels(ValueError):
    """Marginals make the expected-agreement denominator vanish."""


class SingleClass(ValueError):
    """ROC/PR need both classes present."""


class AllZeroDifferences(ValueError):
    """Signed-rank test is undefined when every paired difference is 0."""


def _as_int_arrays(y_true, y_pred):
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise EmptyInput("no samples")
    if y_true.shape != y_pred.shape:
        raise ValueError("length mismatch")
    return y_true, y_pred


def confusion_matrix(y_true, y_pred, k: int = N_CLASSES) -> np.ndarray:
    y_true, y_pred = _as_int_arrays(y_true, y_pred)
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def balanced_accuracy(y_true, y_pred) -> float:
    """Mean recall over the classes present in y_true."""
    cm = confusion_matrix(y_true, y_pred)
    support = cm.sum(axis=1)
    present = support > 0
    recalls = cm.diagonal()[present] / support[present]
    return float(recalls.mean())


def quadratic_kappa(y_true, y_pred) -> float:
    """Chance-corrected agreement with (i-j)^2 disagreement weights."""
    cm = confusion_matrix(y_true, y_pred).astype(np.float64)
    n = cm.sum()
    k = cm.shape[0]
    idx = np.arange(k)
    w = (idx[:, None] - idx[None, :]) ** 2 / (k - 1) ** 2
    expected = np.outer(cm.sum(axis=1), cm.sum(axis=0)) / n
    denom = (w * expected).sum()
    if denom == 0:
        raise DegenerateLabels("expected disagreement is zero")
    return float(1.0 - (w * cm).sum() / denom)


def mean_squared_error(y_true, y_pred) -> float:
    y_true, y_pred = _as_int_arrays(y_true, y_pred)
    return float(((y_true - y_pred) ** 2).mean())


def oa_detection_scores(probabilities) -> np.ndarray:
    """Score for 'grade >= 2' detection: p2 + p3 + p4 per row."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    return p[:, 2:].sum(axis=1)


def roc_auc(truth_binary, scores) -> float:
    """Area under the ROC curve via the rank statistic with tie midranks."""
    t = np.asarray(truth_binary, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(t.sum())
    n_neg = int(t.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("need both classes for ROC")
    ranks = rankdata(s)
    return float((ranks[t].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pr_ap(truth_binary, scores) -> float:
    """Average precision by stepwise precision-recall summation over
    descending unique score thresholds."""
    t = np.asarray(truth_binary, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(t.sum())
    if n_pos == 0 or n_pos == t.size:
        raise SingleClass("need both classes for PR")
    order = np.argsort(-s, kind="stable")
    t_sorted = t[order]
    s_sorted = s[order]
    tp = np.cumsum(t_sorted)
    pred_pos = np.arange(1, t.size + 1)
    # evaluate only at the last index of each tied score group
    boundary = np.append(s_sorted[1:] != s_sorted[:-1], True)
    tp_b = tp[boundary]
    precision = tp_b / pred_pos[boundary]
    recall = tp_b / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


def roc_curve(truth_binary, scores) -> list[tuple[float, float]]:
    """(FPR, TPR) points over descending thresholds, for plotting."""
    t = np.asarray(truth_binary, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    t_sorted = t[order]
    s_sorted = s[order]
    boundary = np.append(s_sorted[1:] != s_sorted[:-1], True)
    tp = np.cumsum(t_sorted)[boundary]
    fp = np.cumsum(~t_sorted)[boundary]
    n_pos = max(int(t.sum()), 1)
    n_neg = max(int(t.size - t.sum()), 1)
    pts = [(0.0, 0.0)]
    pts += [(float(f) / n_neg, float(p) / n_pos) for f, p in zip(fp, tp)]
    return pts


def pr_points(truth_binary, scores) -> list[tuple[float, float]]:
    """(recall, precision) points over descending thresholds."""
    t = np.asarray(truth_binary, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    t_sorted = t[order]
    s_sorted = s[order]
    boundary = np.append(s_sorted[1:] != s_sorted[:-1], True)
    tp = np.cumsum(t_sorted)[boundary]
    pred_pos = np.arange(1, t.size + 1)[boundary]
    n_pos = max(int(t.sum()), 1)
    return [(float(p) / n_pos, float(c) / n) for c, n, p in
            zip(tp, pred_pos, tp)]


# ---------------------------------------------------------------------------
# one-sided Wilcoxon signed-rank test (alternative: a > b)

def wilcoxon_one_sided(a, b) -> float:
    """P-value of the signed-rank test against 'a > b'.

    Zero differences are dropped; ties get average ranks. The null
    distribution is exact (conditional on the observed ranks) for n <= 25,
    and a tie-corrected normal approximation with continuity correction
    above that.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("length mismatch")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise AllZeroDifferences("all paired differences are zero")
    if n < 5:
        raise ValueError(f"need >= 5 nonzero differences, got {n}")

    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())

    if n <= 25:
        return _exact_signed_rank_tail(ranks, w_plus)

    mean = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    tie_term = float((counts.astype(np.float64) ** 3 - counts).sum()) / 48.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    z = (w_plus - mean - 0.5) / math.sqrt(var)
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def _exact_signed_rank_tail(ranks: np.ndarray, w_plus: float) -> float:
    """P(W+ >= w_plus) under random signs, by dynamic programming over the
    doubled (integer) midranks."""
    doubled = np.rint(2 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = [0] * (total + 1)
    counts[0] = 1
    for r in doubled:
        r = int(r)
        for s in range(total, r - 1, -1):
            if counts[s - r]:
                counts[s] += counts[s - r]
    threshold = int(math.ceil(round(2 * w_plus, 6)))
    tail = sum(counts[threshold:])
    return tail / (1 << len(doubled))


def _chunk_hash(patient_id: str) -> int:
    digest = hashlib.blake2b(f"chunks:{patient_id}".encode(),
                             digest_size=8).digest()
    return int.from_bytes(digest, "little")


def chunk_patients(patient_ids, n_chunks: int = 20) -> list[np.ndarray]:
    """Deal patients into n_chunks near-equal disjoint chunks by sorted
    patient-id hash; returns per-chunk sample index arrays."""
    pids = np.asarray(patient_ids)
    unique = sorted(set(pids.tolist()), key=lambda p: (_chunk_hash(str(p)), str(p)))
    assignment = {pid: i % n_chunks for i, pid in enumerate(unique)}
    chunks = [[] for _ in range(n_chunks)]
    for idx, pid in enumerate(pids.tolist()):
        chunks[assignment[pid]].append(idx)
    return [np.asarray(c, dtype=np.int64) for c in chunks]


@dataclass
class ChunkedComparison:
    """Per-chunk balanced accuracies of two models and the one-sided
    signed-rank p-value for 'model A beats model B'. p_value is None when
    the test is undefined (all chunk differences zero)."""

    ba_a: list[float]
    ba_b: list[float]
    p_value: float | None

    @property
    def significant(self) -> bool:
        return self.p_value is not None and self.p_value < 0.05


def chunked_compare(preds_a, preds_b, truths, patient_ids,
                    n_chunks: int = 20) -> ChunkedComparison:
    """Split the shared test set into patient-disjoint chunks, score both
    prediction sets per chunk, and test 'A > B' on the paired BAs."""
    preds_a = np.asarray(preds_a)
    preds_b = np.asarray(preds_b)
    truths = np.asarray(truths)
    chunks = [c for c in chunk_patients(patient_ids, n_chunks) if c.size > 0]
    ba_a = [balanced_accuracy(truths[c], preds_a[c]) for c in chunks]
    ba_b = [balanced_accuracy(truths[c], preds_b[c]) for c in chunks]
    try:
        p = wilcoxon_one_sided(ba_a, ba_b)
    except AllZeroDifferences:
        p = None
    return ChunkedComparison(ba_a=ba_a, ba_b=ba_b, p_value=p)


# ---------------------------------------------------------------------------
# aggregate report

@dataclass
class EvalReport:
    ba: float
    kappa: float
    mse: float
    confusion: list[list[int]]
    confusion_percent: list[list[float]]
    auc: float | None
    ap: float | None
    n: int

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def evaluate_predictions(y_true, probabilities) -> EvalReport:
    """Full metric set from softmax rows; detection AUC/AP are None when the
    truth has only one side of the 'grade >= 2' split."""
    probs = np.asarray(probabilities, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != y_true.size:
        raise ValueError("probabilities must be (n, 5) matching y_true")
    y_pred = probs.argmax(axis=1)

    cm = confusion_matrix(y_true, y_pred)
    row_sums = cm.sum(axis=1, keepdims=True)
    percent = np.where(row_sums > 0, 100.0 * cm / np.maximum(row_sums, 1), 0.0)

    binary = y_true >= 2
    scores = oa_detection_scores(probs)
    try:
        auc = roc_auc(binary, scores)
        ap = pr_ap(binary, scores)
    except SingleClass:
        auc = ap = None

    return EvalReport(
        ba=balanced_accuracy(y_true, y_pred),
        kappa=quadratic_kappa(y_true, y_pred),
        mse=mean_squared_error(y_true, y_pred),
        confusion=cm.tolist(),
        confusion_percent=percent.tolist(),
        auc=auc, ap=ap, n=int(y_true.size),
    )
