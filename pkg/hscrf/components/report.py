import csv
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from hscrf.services.dataset import write_json  # noqa: E402
from hscrf.services.harness import REPORT_HEADER, JourneyStep, ReportRow  # noqa: E402
from hscrf.services.shape_priors import ShapeRow  # noqa: E402
from hscrf.utils.errors import ReportWriteError, UsageError  # noqa: E402
from hscrf.utils.logger import get_logger  # noqa: E402

logger = get_logger(__name__)

CHART_PANELS = (
    ("avg_recall", "Segmentation (avg recall)"),
    ("mAP", "Detection (mAP)"),
    ("scene_acc", "Scene accuracy"),
)
JOURNEY_HEADER = REPORT_HEADER[:-1] + ("d_avg_recall", "d_global_recall", "d_mAP", "d_scene_acc", "seconds")
SHAPES_HEADER = ("prior", "normalized_accuracy", "pixel_accuracy", "objects")

plt.rcParams["svg.hashsalt"] = "hscrf"
plt.rcParams["svg.fonttype"] = "none"
plt.rcParams["font.size"] = 9


def _ensure_dir(out_dir: Path) -> Path:
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ReportWriteError(f"cannot create output directory {root}: {e}") from e
    return root


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        raise ReportWriteError(f"cannot write {path}: {e}") from e


def read_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def _value(text: str) -> float:
    return float(text) if text not in ("", "nan") else float("nan")


# --------------------------------------------------------------------------
# Charts
# --------------------------------------------------------------------------


def build_chart(csv_path: Path, svg_path: Path, baseline: str = "machine", title: Optional[str] = None) -> None:
    """Grouped bar chart, one panel per task, read back from a report CSV.

    The baseline config's value is drawn as a dashed rule in every panel.
    """
    records = read_csv(csv_path)
    labels = [r["config"] for r in records]
    x = np.arange(len(labels))
    fig, axes = plt.subplots(1, len(CHART_PANELS), figsize=(4.0 * len(CHART_PANELS), 3.6), sharey=False)
    for ax, (column, panel_title) in zip(np.atleast_1d(axes), CHART_PANELS):
        values = np.array([_value(r[column]) for r in records])
        colors = ["#7f8c8d" if label == baseline else "#3498db" for label in labels]
        ax.bar(x, np.nan_to_num(values), color=colors, width=0.7)
        if baseline in labels:
            base_value = values[labels.index(baseline)]
            if np.isfinite(base_value):
                ax.axhline(base_value, color="#c0392b", linestyle="--", linewidth=1.0, label=baseline)
                ax.legend(loc="lower right", fontsize=7)
        ax.set_title(panel_title)
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
        ax.set_ylim(0.0, 1.0)
        ax.grid(axis="y", alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)


def build_journey_chart(csv_path: Path, svg_path: Path) -> None:
    """One line per task across the journey steps."""
    records = read_csv(csv_path)
    labels = [r["config"] for r in records]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(6.5, 3.8))
    for column, panel_title in CHART_PANELS:
        ax.plot(x, [_value(r[column]) for r in records], marker="o", label=panel_title)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
    ax.set_ylim(0.0, 1.0)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


def emit_report(
    rows: Sequence[ReportRow],
    out_dir: Path,
    failures: Sequence[Tuple[str, str]] = (),
    baseline: str = "machine",
) -> List[Path]:
    """Write `report.csv` and the `report.svg` chart derived from it.

    Failed configs go to `failures.json` next to them.
    """
    if not rows:
        raise UsageError("no report rows to write")
    root = _ensure_dir(out_dir)
    csv_path, svg_path = root / "report.csv", root / "report.svg"
    _write_csv(csv_path, REPORT_HEADER, [row.csv_values() for row in rows])
    build_chart(csv_path, svg_path, baseline=baseline)
    written = [csv_path, svg_path]
    if failures:
        failures_path = root / "failures.json"
        write_json(failures_path, [{"config": label, "reason": reason} for label, reason in failures])
        written.append(failures_path)
    logger.info(f"Report written to {root} ({len(rows)} rows, {len(failures)} failures)")
    return written


def emit_journey(steps: Sequence[JourneyStep], out_dir: Path) -> List[Path]:
    if not steps:
        raise UsageError("no journey steps to write")
    root = _ensure_dir(out_dir)
    csv_path, svg_path = root / "journey.csv", root / "journey.svg"
    rows = []
    for step in steps:
        values = step.row.csv_values()
        deltas = [f"{step.deltas[name]:.6f}" for name in ("avg_recall", "global_recall", "mean_ap", "scene_acc")]
        rows.append(values[:-1] + deltas + values[-1:])
    _write_csv(csv_path, JOURNEY_HEADER, rows)
    build_journey_chart(csv_path, svg_path)
    logger.info(f"Journey written to {root} ({len(steps)} steps)")
    return [csv_path, svg_path]


def emit_shapes(rows: Sequence[ShapeRow], out_dir: Path) -> Path:
    root = _ensure_dir(out_dir)
    path = root / "shapes.csv"
    _write_csv(
        path,
        SHAPES_HEADER,
        [[r.prior, f"{r.normalized:.6f}", f"{r.pixel:.6f}", str(r.objects)] for r in rows],
    )
    logger.info(f"Shape comparison written to {path}")
    return path
