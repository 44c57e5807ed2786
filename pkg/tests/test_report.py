import pytest

from hscrf.components.report import JOURNEY_HEADER, emit_journey, emit_report, emit_shapes, read_csv
from hscrf.services.dataset import read_json
from hscrf.services.harness import REPORT_HEADER, JourneyStep, ReportRow
from hscrf.services.shape_priors import ShapeRow
from hscrf.utils.errors import EXIT_RUNTIME, ReportWriteError, UsageError

ROWS = [
    ReportRow("machine", 0.5, 0.6, 0.25, 0.5),
    ReportRow("seg_unary=human", 0.55, 0.62, 0.25, 0.5),
    ReportRow("scene_unary=gt", 0.52, 0.61, 0.3, 1.0),
]


def test_report_writes_csv_and_chart(tmp_path):
    written = emit_report(ROWS, tmp_path / "out")
    assert [p.name for p in written] == ["report.csv", "report.svg"]
    lines = (tmp_path / "out" / "report.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == ",".join(REPORT_HEADER)
    assert lines[1] == "machine,0.500000,0.600000,0.250000,0.500000,"
    assert [r["config"] for r in read_csv(tmp_path / "out" / "report.csv")] == [r.config for r in ROWS]
    assert (tmp_path / "out" / "report.svg").read_text(encoding="utf-8").lstrip().startswith("<?xml")


def test_reports_are_byte_identical_across_reruns(tmp_path):
    emit_report(ROWS, tmp_path / "a")
    emit_report(ROWS, tmp_path / "b")
    for name in ("report.csv", "report.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_failures_are_written_next_to_the_report(tmp_path):
    written = emit_report(ROWS[:1], tmp_path, failures=[("no pn", "disconnected")])
    assert written[-1].name == "failures.json"
    assert read_json(tmp_path / "failures.json") == [{"config": "no pn", "reason": "disconnected"}]


def test_empty_reports_are_usage_errors(tmp_path):
    with pytest.raises(UsageError):
        emit_report([], tmp_path)
    with pytest.raises(UsageError):
        emit_journey([], tmp_path)


def test_unwritable_output_is_a_runtime_failure(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("", encoding="utf-8")
    with pytest.raises(ReportWriteError, match="cannot create output directory") as excinfo:
        emit_report(ROWS, blocker / "sub")
    assert excinfo.value.exit_code == EXIT_RUNTIME


def test_journey_csv_carries_deltas(tmp_path):
    zero = {"avg_recall": 0.0, "global_recall": 0.0, "mean_ap": 0.0, "scene_acc": 0.0}
    steps = [
        JourneyStep(ROWS[0], zero),
        JourneyStep(ROWS[1], {"avg_recall": 0.05, "global_recall": 0.02, "mean_ap": 0.0, "scene_acc": 0.0}),
    ]
    emit_journey(steps, tmp_path)
    records = read_csv(tmp_path / "journey.csv")
    assert list(records[0]) == list(JOURNEY_HEADER)
    assert records[1]["d_avg_recall"] == "0.050000"
    assert (tmp_path / "journey.svg").exists()


def test_shapes_csv(tmp_path):
    path = emit_shapes([ShapeRow("GT-snap", 1.0, 1.0, 3)], tmp_path)
    assert read_csv(path) == [
        {"prior": "GT-snap", "normalized_accuracy": "1.000000", "pixel_accuracy": "1.000000", "objects": "3"}
    ]
