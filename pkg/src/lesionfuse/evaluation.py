"""One-vs-all ROC/AUC evaluation of prediction tables.

The ternary vectors are scored on two binary tasks (melanoma vs. all and
seborrheic keratosis vs. all) by taking the positive class's probability as
the score. ROC curves place a threshold at every distinct score; AUC is the
trapezoidal area, which for this construction equals the pairwise ranking
statistic with ties credited 0.5.

Published results on the same benchmark are kept as embedded constants for
the comparison table; they are display-only and never recomputed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .catalog import LABEL_INDEX, LABELS, DatasetManifest
from .errors import EvaluationError, PipelineError
from .tables import PredictionTable


@dataclass(frozen=True)
class BinaryTask:
    name: str
    positive_label: str

    @property
    def class_index(self) -> int:
        return LABEL_INDEX[self.positive_label]


MM_VS_ALL = BinaryTask("MM_vs_all", "MM")
SK_VS_ALL = BinaryTask("SK_vs_all", "SK")
TASKS = (MM_VS_ALL, SK_VS_ALL)


@dataclass
class ROCCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray


@dataclass
class EvalReport:
    source_id: str
    auc: dict[str, float]
    curves: dict[str, ROCCurve]

    @property
    def average_auc(self) -> float:
        return (self.auc[MM_VS_ALL.name] + self.auc[SK_VS_ALL.name]) / 2.0

    def to_dict(self) -> dict:
        return {
            "source_id": self.source_id,
            "auc": {name: float(v) for name, v in sorted(self.auc.items())},
            "average_auc": float(self.average_auc),
            "curves": {
                name: {
                    "fpr": [float(v) for v in curve.fpr],
                    "tpr": [float(v) for v in curve.tpr],
                    "thresholds": [float(v) for v in curve.thresholds],
                }
                for name, curve in sorted(self.curves.items())
            },
        }


def one_vs_all(vector, task: BinaryTask) -> float:
    """Binary score for a ternary probability vector: the positive class's
    probability."""
    return float(np.asarray(vector, dtype=np.float64)[task.class_index])


def roc_auc(scores, labels) -> tuple[ROCCurve, float]:
    """ROC curve with a threshold at every distinct score, plus trapezoidal
    AUC. Needs at least one positive and one negative label."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1 or scores.size == 0:
        raise ValueError(f"scores/labels must be matching 1-D sequences, "
                         f"got shapes {scores.shape} and {labels.shape}")
    positives = int(labels.sum())
    negatives = int(labels.size - positives)
    if positives == 0 or negatives == 0:
        raise EvaluationError(
            f"degenerate task: need both classes, got {positives} positives "
            f"and {negatives} negatives")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    # last index of each run of equal scores
    block_ends = np.nonzero(np.diff(sorted_scores))[0]
    cut = np.concatenate([block_ends, [scores.size - 1]])
    tp = np.cumsum(sorted_labels)[cut]
    fp = (cut + 1) - tp

    tpr = np.concatenate([[0.0], tp / positives])
    fpr = np.concatenate([[0.0], fp / negatives])
    thresholds = np.concatenate([[np.inf], sorted_scores[cut]])
    auc = float(np.trapezoid(tpr, fpr))
    return ROCCurve(fpr=fpr, tpr=tpr, thresholds=thresholds), auc


def evaluate_table(table: PredictionTable, manifest: DatasetManifest, *,
                   split: str = "test") -> EvalReport:
    """Score a table on both binary tasks against the split's ground truth.
    The table must cover the split exactly."""
    truth = {rec.image_id: rec.label for rec in manifest.split_records(split)}
    table_ids = set(table.rows)
    split_ids = set(truth)
    if table_ids != split_ids:
        missing = sorted(split_ids - table_ids)[:10]
        extra = sorted(table_ids - split_ids)[:10]
        raise EvaluationError(
            f"{table.source_id}: table does not cover the {split} split: "
            f"missing {missing}, extra {extra}")

    image_ids = sorted(table_ids)
    auc: dict[str, float] = {}
    curves: dict[str, ROCCurve] = {}
    for task in TASKS:
        scores = [one_vs_all(table.rows[i], task) for i in image_ids]
        labels = [truth[i] == task.positive_label for i in image_ids]
        curve, area = roc_auc(scores, labels)
        auc[task.name] = area
        curves[task.name] = curve
    return EvalReport(source_id=table.source_id, auc=auc, curves=curves)


def argmax_label(vector) -> str:
    """Label of the largest component; exact ties resolve in class order
    MM > SK > BN (np.argmax returns the first maximum)."""
    return LABELS[int(np.argmax(np.asarray(vector, dtype=np.float64)))]


def argmax_classify(table: PredictionTable) -> dict[str, str]:
    return {image_id: argmax_label(vec) for image_id, vec in table.rows.items()}


@dataclass
class TaskExemplars:
    correct: list[str]
    incorrect: list[str]


def exemplar_lists(table: PredictionTable, manifest: DatasetManifest, *,
                   split: str = "test") -> dict[str, TaskExemplars]:
    """Partition the split's images, per binary task, by whether the argmax
    prediction agrees with ground truth once both are binarized."""
    truth = {rec.image_id: rec.label for rec in manifest.split_records(split)}
    predicted = argmax_classify(table)
    out: dict[str, TaskExemplars] = {}
    for task in TASKS:
        correct, incorrect = [], []
        for image_id in sorted(truth):
            pred_pos = predicted[image_id] == task.positive_label
            true_pos = truth[image_id] == task.positive_label
            (correct if pred_pos == true_pos else incorrect).append(image_id)
        out[task.name] = TaskExemplars(correct=correct, incorrect=incorrect)
    return out


@dataclass(frozen=True)
class ComparisonRow:
    approach: str
    input_size: str
    mm_auc: float | None
    sk_auc: float | None
    avg_auc: float | None


#: Published AUC scores [%] on the ISIC 2017 test set: the three challenge
#: winners, later state-of-the-art methods, and the published multi-resolution
#: three-level fusion result. Display-only constants.
PUBLISHED_RESULTS: tuple[ComparisonRow, ...] = (
    ComparisonRow("Matsunaga et al.", "n/a", 86.8, 95.3, 91.1),
    ComparisonRow("Gonzalez-Diaz", "256x256", 85.6, 96.5, 91.0),
    ComparisonRow("Menegola et al.", "128x128", 87.4, 94.3, 90.8),
    ComparisonRow("Mahbod et al.", "224x224", 87.3, 95.5, 91.4),
    ComparisonRow("Zhang et al.", "224x224", 87.5, 95.8, 91.7),
    ComparisonRow("Yan et al.", "256x256", 88.3, None, None),
    ComparisonRow("Guo et al.", "224x224", 87.4, 95.9, 91.7),
    ComparisonRow("three-level fusion (published)", "multiple", 89.2, 96.6, 92.9),
)


def comparison_report(report: EvalReport) -> list[ComparisonRow]:
    """Published baselines plus one row mirroring this run's report values."""
    ours = ComparisonRow(
        approach="three-level fusion (this run)",
        input_size="multiple",
        mm_auc=report.auc[MM_VS_ALL.name] * 100.0,
        sk_auc=report.auc[SK_VS_ALL.name] * 100.0,
        avg_auc=report.average_auc * 100.0,
    )
    return [*PUBLISHED_RESULTS, ours]


def _cell(value: float | None) -> str:
    # n/a cells stay n/a and never enter an average
    return "n/a" if value is None else f"{value:.2f}"


def render_comparison(rows: list[ComparisonRow]) -> str:
    header = ("approach", "input size", "MM", "SK", "avg.")
    body = [(r.approach, r.input_size, _cell(r.mm_auc), _cell(r.sk_auc), _cell(r.avg_auc))
            for r in rows]
    widths = [max(len(col[i]) for col in [header, *body]) for i in range(5)]
    lines = []
    for row in [header, *body]:
        left = row[0].ljust(widths[0])
        rest = "  ".join(cell.rjust(widths[i + 1]) for i, cell in enumerate(row[1:]))
        lines.append(f"{left}  {rest}".rstrip())
    lines.insert(1, "-" * max(len(line) for line in lines))
    return "\n".join(lines) + "\n"


def render_summary(reports: list[EvalReport]) -> str:
    """Aligned MM / SK / avg. table (AUC [%], two decimals at display time)
    for a set of evaluated nodes."""
    header = ("source", "MM", "SK", "avg.")
    body = [
        (r.source_id, f"{r.auc[MM_VS_ALL.name] * 100:.2f}",
         f"{r.auc[SK_VS_ALL.name] * 100:.2f}", f"{r.average_auc * 100:.2f}")
        for r in reports
    ]
    widths = [max(len(col[i]) for col in [header, *body]) for i in range(4)]
    lines = []
    for row in [header, *body]:
        left = row[0].ljust(widths[0])
        rest = "  ".join(cell.rjust(widths[i + 1]) for i, cell in enumerate(row[1:]))
        lines.append(f"{left}  {rest}".rstrip())
    lines.insert(1, "-" * max(len(line) for line in lines))
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


# --- deterministic ROC plot -------------------------------------------------

_SVG_SIZE = 560
_SVG_MARGIN = 64
_CURVE_COLORS = {MM_VS_ALL.name: "#c0392b", SK_VS_ALL.name: "#2471a3"}


def _to_px(fraction: float, axis: str) -> float:
    span = _SVG_SIZE - 2 * _SVG_MARGIN
    if axis == "x":
        return _SVG_MARGIN + fraction * span
    return _SVG_SIZE - _SVG_MARGIN - fraction * span


def roc_plot_svg(report: EvalReport) -> str:
    """Both task curves, the chance diagonal, and an AUC legend as a
    deterministic SVG document: identical inputs produce identical bytes."""
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_SIZE}" '
        f'height="{_SVG_SIZE}" viewBox="0 0 {_SVG_SIZE} {_SVG_SIZE}">',
        f'<rect width="{_SVG_SIZE}" height="{_SVG_SIZE}" fill="white"/>',
    ]
    x0, y0 = _to_px(0.0, "x"), _to_px(0.0, "y")
    x1, y1 = _to_px(1.0, "x"), _to_px(1.0, "y")
    parts.append(f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y0:.2f}" '
                 f'stroke="black" stroke-width="1"/>')
    parts.append(f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x0:.2f}" y2="{y1:.2f}" '
                 f'stroke="black" stroke-width="1"/>')
    for tick in (0.0, 0.2, 0.4, 0.6, 0.8, 1.0):
        tx, ty = _to_px(tick, "x"), _to_px(tick, "y")
        parts.append(f'<line x1="{tx:.2f}" y1="{y0:.2f}" x2="{tx:.2f}" y2="{y0 + 5:.2f}" '
                     f'stroke="black" stroke-width="1"/>')
        parts.append(f'<text x="{tx:.2f}" y="{y0 + 20:.2f}" font-size="12" '
                     f'text-anchor="middle">{tick:.1f}</text>')
        parts.append(f'<line x1="{x0 - 5:.2f}" y1="{ty:.2f}" x2="{x0:.2f}" y2="{ty:.2f}" '
                     f'stroke="black" stroke-width="1"/>')
        parts.append(f'<text x="{x0 - 9:.2f}" y="{ty + 4:.2f}" font-size="12" '
                     f'text-anchor="end">{tick:.1f}</text>')
    parts.append(f'<text x="{(x0 + x1) / 2:.2f}" y="{_SVG_SIZE - 16}" font-size="14" '
                 f'text-anchor="middle">False positive rate</text>')
    parts.append(f'<text x="18" y="{(y0 + y1) / 2:.2f}" font-size="14" '
                 f'text-anchor="middle" transform="rotate(-90 18 {(y0 + y1) / 2:.2f})">'
                 f'True positive rate</text>')
    parts.append(f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y1:.2f}" '
                 f'stroke="#999999" stroke-width="1" stroke-dasharray="6 4"/>')

    legend_y = _to_px(1.0, "y") + 18
    for name in sorted(report.curves):
        curve = report.curves[name]
        color = _CURVE_COLORS.get(name, "#444444")
        points = " ".join(
            f"{_to_px(float(fx), 'x'):.2f},{_to_px(float(ty), 'y'):.2f}"
            for fx, ty in zip(curve.fpr, curve.tpr))
        parts.append(f'<polyline points="{points}" fill="none" stroke="{color}" '
                     f'stroke-width="2"/>')
        label = name.replace("_vs_all", " vs. all")
        parts.append(f'<line x1="{x0 + 16:.2f}" y1="{legend_y:.2f}" '
                     f'x2="{x0 + 44:.2f}" y2="{legend_y:.2f}" stroke="{color}" '
                     f'stroke-width="2"/>')
        parts.append(f'<text x="{x0 + 50:.2f}" y="{legend_y + 4:.2f}" font-size="13">'
                     f'{label} (AUC = {report.auc[name] * 100:.2f}%)</text>')
        legend_y += 20
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_roc_plot(report: EvalReport, path: str | Path) -> Path:
    """Render the ROC plot to an SVG file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_text(roc_plot_svg(report), encoding="utf-8")
    except OSError as err:
        raise PipelineError(f"failed to write ROC plot at {path}: {err}") from err
    return path
