"""Tables, charts and the comparison sheet written from evaluated runs."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

from .metrics import (
    METRIC_NAMES,
    AggregateReport,
    ConfusionMatrix,
    MetricReport,
    accuracy,
    aggregate_folds,
    auc,
    confusion_matrix,
    consolidate_confusions,
    evaluate_fold,
    metric_report,
    roc_curve,
)
from .exceptions import DegenerateCurveError
from .training import FoldResult

METRICS_HEADER = ["CNN", "AUC (%)", "Accuracy (%)", "Precision (%)", "Recall (%)", "F1-Score (%)"]
DISPLAY_NAMES = {"AlexNet": "AlexNet", "VGG11BN": "VGG-11", "SqueezeNet": "SqueezeNet", "DenseNet121": "DenseNet-121"}


@dataclass
class ArchitectureSummary:
    architecture: str
    fold_reports: list[MetricReport]
    fold_confusions: list[ConfusionMatrix]
    aggregate: AggregateReport
    consolidated: ConfusionMatrix
    consolidated_metrics: MetricReport

    @property
    def display_name(self) -> str:
        return DISPLAY_NAMES.get(self.architecture, self.architecture)

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "aggregate": self.aggregate.to_dict(),
            "consolidated_confusion": self.consolidated.to_dict(),
            "consolidated_metrics": self.consolidated_metrics.to_dict(),
            "fold_metrics": [r.to_dict() for r in self.fold_reports],
            "fold_confusions": [c.to_dict() for c in self.fold_confusions],
        }


def summarize(architecture: str, results: Sequence[FoldResult]) -> ArchitectureSummary:
    """Per-fold metrics, their mean/std, and the summed confusion matrix.

    The consolidated metrics are computed from pooled predictions and are
    generally not equal to the fold means.
    """
    reports = [evaluate_fold(r.predicted_labels, r.true_labels, r.positive_scores) for r in results]
    cms = [confusion_matrix(r.predicted_labels, r.true_labels) for r in results]
    pooled_scores = [s for r in results for s in r.positive_scores]
    pooled_labels = [l for r in results for l in r.true_labels]
    total = consolidate_confusions(cms)
    try:
        pooled_auc = auc(roc_curve(pooled_scores, pooled_labels))
    except DegenerateCurveError:
        pooled_auc = None
    return ArchitectureSummary(architecture, reports, cms, aggregate_folds(reports), total,
                               metric_report(total, pooled_auc))


def _pct(x: float) -> str:
    return f"{100 * x:.2f}"


def metric_rows(summaries: Sequence[ArchitectureSummary]) -> list[list[str]]:
    rows = []
    for s in summaries:
        cells = [f"{_pct(s.aggregate.mean[m])} ± {_pct(s.aggregate.std[m])}" for m in METRIC_NAMES]
        rows.append([s.display_name, *cells])
    return rows


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def write_metrics_csv(path: Path, summaries: Sequence[ArchitectureSummary]) -> Path:
    """k-fold mean ± sample std, in percent, one row per architecture."""
    return _write_csv(path, METRICS_HEADER, metric_rows(summaries))


def write_metrics_detail_csv(path: Path, summaries: Sequence[ArchitectureSummary]) -> Path:
    rows = []
    for s in summaries:
        for name in s.aggregate.mean:
            rows.append([s.architecture, name, "fold_mean", f"{s.aggregate.mean[name]:.10f}", s.aggregate.k])
            rows.append([s.architecture, name, "fold_std", f"{s.aggregate.std[name]:.10f}", s.aggregate.k])
        for name, value in s.consolidated_metrics.values().items():
            rows.append([s.architecture, name, "consolidated", f"{value:.10f}", s.aggregate.k])
    return _write_csv(path, ["architecture", "metric", "statistic", "value", "folds"], rows)


def write_fold_metrics_csv(path: Path, summary: ArchitectureSummary) -> Path:
    names = list(summary.fold_reports[0].values())
    rows = []
    for i, (r, cm) in enumerate(zip(summary.fold_reports, summary.fold_confusions)):
        rows.append([i, cm.tp, cm.fp, cm.fn, cm.tn, *(f"{r.values()[n]:.10f}" for n in names),
                     ";".join(sorted(r.undefined_flags))])
    return _write_csv(path, ["fold", "tp", "fp", "fn", "tn", *names, "undefined"], rows)


def write_confusion_csv(path: Path, summaries: Sequence[ArchitectureSummary]) -> Path:
    """Summed confusion matrices: actual class per row, predicted per column."""
    rows = []
    for s in summaries:
        (tp, fn), (fp, tn) = s.consolidated.as_table()
        rows.append([s.display_name, "Positive", tp, fn])
        rows.append([s.display_name, "Negative", fp, tn])
    return _write_csv(path, ["CNN", "Actual", "Predicted Positive", "Predicted Negative"], rows)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_metric_bars(path: Path, summaries: Sequence[ArchitectureSummary]) -> Path:
    """Grouped bars of fold-mean metrics per architecture with std error bars."""
    plt = _pyplot()
    labels = ["AUC", "Accuracy", "Precision", "Recall", "F1-Score"]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    width = 0.8 / max(len(summaries), 1)
    for j, s in enumerate(summaries):
        xs = [i + (j - (len(summaries) - 1) / 2) * width for i in range(len(labels))]
        means = [100 * s.aggregate.mean[m] for m in METRIC_NAMES]
        stds = [100 * s.aggregate.std[m] for m in METRIC_NAMES]
        ax.bar(xs, means, width, yerr=stds, capsize=2, label=f"{j + 1}) {s.display_name}")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels)
    ax.set_ylabel("k-fold mean (%)")
    low = min((100 * s.aggregate.mean[m] for s in summaries for m in METRIC_NAMES), default=0)
    ax.set_ylim(max(0, low - 5), 100.5)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_fold_rocs(path: Path, architecture: str, results: Sequence[FoldResult]) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 5))
    for r in results:
        try:
            pts = roc_curve(r.positive_scores, r.true_labels)
        except DegenerateCurveError:
            continue
        ax.step([p[0] for p in pts], [p[1] for p in pts], where="post",
                label=f"fold {r.fold_index} (AUC {auc(pts):.3f})", linewidth=1)
    ax.plot([0, 1], [0, 1], linestyle=":", color="grey")
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(f"{DISPLAY_NAMES.get(architecture, architecture)} ROC per fold")
    ax.legend(fontsize=6, loc="lower right")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def literature_rows() -> list[dict]:
    """Published results used for comparison; static data, never recomputed."""
    text = (resources.files("cxrbench") / "data" / "literature.csv").read_text(encoding="utf-8")
    return list(csv.DictReader(io.StringIO(text)))


def comparison_rows(summaries: Sequence[ArchitectureSummary]) -> list[list[str]]:
    """Literature accuracy/F1 rows followed by this run's best architecture."""
    rows = [[r["method"], r["metric"], r["value_percent"], r["citation"]] for r in literature_rows()]
    if summaries:
        best = max(summaries, key=lambda s: s.aggregate.mean["accuracy"])
        name = f"This run ({best.display_name} + SFT + data aug.)"
        rows.append([name, "accuracy", _pct(best.aggregate.mean["accuracy"]), "k-fold mean"])
        rows.append([name, "f1", _pct(best.aggregate.mean["f1"]), "k-fold mean"])
    return rows


def _md_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = ["| " + " | ".join(map(str, header)) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(map(str, r)) + " |" for r in rows]
    return "\n".join(lines)


def render_markdown(summaries: Sequence[ArchitectureSummary], status: dict[str, str],
                    chart: str | None = None) -> str:
    parts = ["# Benchmark report", ""]
    incomplete = [a for a, st in status.items() if st != "complete"]
    if incomplete:
        parts += [f"**Partial run**: no results for {', '.join(incomplete)}.", ""]
    k = summaries[0].aggregate.k if summaries else 0
    parts += [f"## {k}-fold mean ± sample standard deviation (%)", "", _md_table(METRICS_HEADER, metric_rows(summaries)), ""]
    parts += ["## Consolidated confusion matrices (rows: actual, columns: predicted)", ""]
    for s in summaries:
        (tp, fn), (fp, tn) = s.consolidated.as_table()
        parts += [f"**{s.display_name}** (accuracy over all records {_pct(accuracy(s.consolidated))}%)", "",
                  _md_table(["", "Positive", "Negative"], [["Positive", tp, fn], ["Negative", fp, tn]]), ""]
    parts += ["## Comparison with published results", "",
              _md_table(["Method", "Metric", "Value (%)", "Source"], comparison_rows(summaries)), ""]
    if chart:
        parts += ["## Fold-mean metrics", "", f"![metrics]({chart})", ""]
    return "\n".join(parts)
