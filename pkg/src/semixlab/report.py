"""Report rendering: confusion heatmaps, ROC/PR curves, method comparison
bars with significance stars, CSV point lists, and a markdown summary.

All outputs are deterministic: re-rendering the same inputs produces
byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .evaluate import (EvalReport, balanced_accuracy, chunk_patients,
                       chunked_compare, evaluate_predictions,
                       oa_detection_scores, pr_points, roc_curve)
from .svgplot import PALETTE, Axes, Canvas, heat_color


class MissingRun(FileNotFoundError):
    pass


def render_confusion_svg(cm, percent) -> str:
    cm = np.asarray(cm)
    pct = np.asarray(percent)
    k = cm.shape[0]
    cell = 52
    x0, y0 = 70, 50
    c = Canvas(x0 + k * cell + 30, y0 + k * cell + 60)
    c.text(x0 + k * cell / 2, 24, "Confusion matrix (row %)", 13, "middle")
    for i in range(k):
        for j in range(k):
            x, y = x0 + j * cell, y0 + i * cell
            c.rect(x, y, cell, cell, fill=heat_color(pct[i][j] / 100.0),
                   stroke="#999", stroke_width=0.5)
            c.text(x + cell / 2, y + cell / 2 - 2, f"{pct[i][j]:.1f}", 11, "middle")
            c.text(x + cell / 2, y + cell / 2 + 12, f"n={cm[i][j]}", 8,
                   "middle", fill="#555")
        c.text(x0 - 10, y0 + i * cell + cell / 2 + 4, str(i), 11, "end")
        c.text(x0 + i * cell + cell / 2, y0 + k * cell + 16, str(i), 11, "middle")
    c.text(x0 - 40, y0 + k * cell / 2, "true grade", 11, "middle", rotate=-90)
    c.text(x0 + k * cell / 2, y0 + k * cell + 38, "predicted grade", 11, "middle")
    return c.to_svg()


def render_curves_svg(curves, xlabel, ylabel, title, diagonal=False) -> str:
    """curves: list of (label, [(x, y), ...]) pairs."""
    c = Canvas(460, 360)
    ax = Axes(c, (60, 40, 340, 260), (0.0, 1.0), (0.0, 1.0))
    ticks = (0.0, 0.25, 0.5, 0.75, 1.0)
    ax.frame(xlabel, ylabel, ticks, ticks)
    c.text(230, 24, title, 13, "middle")
    if diagonal:
        c.line(ax.px(0), ax.py(0), ax.px(1), ax.py(1), "#bbb", dash="4,3")
    for idx, (label, pts) in enumerate(curves):
        color = PALETTE[idx % len(PALETTE)]
        ax.plot(pts, stroke=color)
        c.line(412, 50 + 16 * idx, 426, 50 + 16 * idx, color, 2)
        c.text(410, 54 + 16 * idx, label, 9, "end")
    return c.to_svg()


def render_comparison_svg(entries) -> str:
    """entries: list of (label, mean_ba, stderr, stars)."""
    n = len(entries)
    bar_w = 56
    x0, y0, h = 60, 40, 240
    c = Canvas(x0 + n * (bar_w + 24) + 40, y0 + h + 70)
    top = max(m + s for _, m, s, _ in entries) * 1.15 or 1.0
    ax = Axes(c, (x0, y0, n * (bar_w + 24), h), (0, n), (0.0, top))
    ax.frame("", "balanced accuracy",
             yticks=tuple(round(top * f, 2) for f in (0, 0.25, 0.5, 0.75, 1.0)))
    c.text(x0 + n * (bar_w + 24) / 2, 24, "Model comparison on the test set",
           13, "middle")
    for i, (label, mean, err, stars) in enumerate(entries):
        cx = x0 + i * (bar_w + 24) + 12
        y = ax.py(mean)
        color = PALETTE[i % len(PALETTE)]
        c.rect(cx, y, bar_w, ax.py(0) - y, fill=color)
        if err > 0:
            mid = cx + bar_w / 2
            c.line(mid, ax.py(mean - err), mid, ax.py(mean + err), "#222")
            c.line(mid - 5, ax.py(mean - err), mid + 5, ax.py(mean - err), "#222")
            c.line(mid - 5, ax.py(mean + err), mid + 5, ax.py(mean + err), "#222")
        if stars:
            c.text(cx + bar_w / 2, ax.py(mean + err) - 6, stars, 12, "middle")
        c.text(cx + bar_w / 2, y0 + h + 16, label, 10, "middle")
        c.text(cx + bar_w / 2, y0 + h + 30, f"{mean:.3f}", 9, "middle",
               fill="#555")
    return c.to_svg()


def significance_stars(p: float | None) -> str:
    if p is None:
        return ""
    if p < 1e-3:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def _write_points_csv(path: Path, header: tuple[str, str], points) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(points)


def write_eval_bundle(out_dir: str | Path, y_true, probs,
                      label: str = "model") -> EvalReport:
    """Evaluate predictions and drop report.json, curve CSVs, and SVGs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate_predictions(y_true, probs)
    (out / "report.json").write_text(report.to_json())

    with open(out / "confusion.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\pred"] + [str(i) for i in range(5)])
        for i, row in enumerate(report.confusion):
            writer.writerow([i] + list(row))
    (out / "confusion.svg").write_text(
        render_confusion_svg(report.confusion, report.confusion_percent))

    y = np.asarray(y_true)
    if report.auc is not None:
        scores = oa_detection_scores(probs)
        roc = roc_curve(y >= 2, scores)
        pr = pr_points(y >= 2, scores)
        _write_points_csv(out / "roc.csv", ("fpr", "tpr"), roc)
        _write_points_csv(out / "pr.csv", ("recall", "precision"), pr)
        (out / "roc.svg").write_text(render_curves_svg(
            [(f"{label} AUC={report.auc:.3f}", roc)],
            "false positive rate", "true positive rate",
            "Detection of grade >= 2 (ROC)", diagonal=True))
        (out / "pr.svg").write_text(render_curves_svg(
            [(f"{label} AP={report.ap:.3f}", pr)],
            "recall", "precision", "Detection of grade >= 2 (PR)"))
    return report


def load_run(run_dir: str | Path) -> dict:
    """Read results.json and test predictions of one finished run."""
    run_dir = Path(run_dir)
    results = run_dir / "results.json"
    preds = run_dir / "test_preds.csv"
    if not results.exists() or not preds.exists():
        raise MissingRun(f"{run_dir} has no completed results")
    info = json.loads(results.read_text())
    ids, pids, truths, probs = [], [], [], []
    with open(preds, newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["id"])
            pids.append(row["patient_id"])
            truths.append(int(row["grade"]))
            probs.append([float(row[f"p{c}"]) for c in range(5)])
    info["ids"] = ids
    info["patient_ids"] = pids
    info["truths"] = np.asarray(truths)
    info["probs"] = np.asarray(probs)
    info["dir"] = str(run_dir)
    return info


def write_comparison_report(run_dirs: list[str | Path],
                            out_dir: str | Path) -> Path:
    """Bundle per-run evaluations plus pairwise chunked signed-rank
    comparisons of the first run against each other run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = [load_run(d) for d in run_dirs]

    entries = []
    comparisons = []
    base = runs[0]
    for i, run in enumerate(runs):
        label = run.get("label") or run.get("method", f"run{i}")
        sub = write_eval_bundle(out / f"run{i}_{label}", run["truths"],
                                run["probs"], label)
        comp = None
        if i > 0:
            if run["ids"] != base["ids"]:
                raise ValueError("runs were evaluated on different test sets")
            comp = chunked_compare(base["probs"].argmax(1),
                                   run["probs"].argmax(1), run["truths"],
                                   run["patient_ids"])
            comparisons.append((label, comp))
        preds = run["probs"].argmax(1)
        chunks = [balanced_accuracy(run["truths"][c], preds[c])
                  for c in chunk_patients(run["patient_ids"]) if c.size > 0]
        stderr = float(np.std(chunks, ddof=1) / math.sqrt(len(chunks)))
        entries.append((label, sub.ba, stderr,
                        significance_stars(comp.p_value) if comp else ""))

    (out / "comparison.svg").write_text(render_comparison_svg(entries))

    lines = ["# Evaluation report", "",
             "Per-chunk standard errors shown as bars; stars mark one-sided",
             "signed-rank significance of run 0 vs the starred run",
             "(* p<0.05, ** p<0.001).", "", "| run | BA | kappa | MSE | AUC | AP |",
             "|---|---|---|---|---|---|"]
    for i, run in enumerate(runs):
        rep = evaluate_predictions(run["truths"], run["probs"])
        label = run.get("label") or run.get("method", f"run{i}")
        auc = f"{rep.auc:.3f}" if rep.auc is not None else "-"
        ap = f"{rep.ap:.3f}" if rep.ap is not None else "-"
        lines.append(f"| {label} | {rep.ba:.3f} | {rep.kappa:.3f} | "
                     f"{rep.mse:.3f} | {auc} | {ap} |")
    lines.append("")
    lines.append("| comparison (run 0 vs) | one-sided p |")
    lines.append("|---|---|")
    for label, comp in comparisons:
        p = "undefined" if comp.p_value is None else f"{comp.p_value:.2e}"
        lines.append(f"| {label} | {p} |")
    lines.append("")
    report_md = out / "report.md"
    report_md.write_text("\n".join(lines))
    return report_md
