from dataclasses import replace

import numpy as np
import pytest

from hscrf.services.dataset import (
    VOID,
    DetectionCandidate,
    GTBox,
    InstanceBuilder,
    box_iou,
    canonical_dumps,
    class_presence,
    coverage_stats,
    dataset_summary,
    decode_rle,
    encode_rle,
    load_dataset,
    majority_label,
    paint_segments,
    save_dataset,
    validate_instance,
    write_json,
)
from hscrf.utils.errors import DataError


def test_builder_derives_labels_from_pixel_majority(tiny_instance):
    assert [s.gt_label for s in tiny_instance.segments] == [1, 1, 0, 2, 0]
    assert [s.gt_label for s in tiny_instance.supersegments] == [1, 0]
    assert [s.area for s in tiny_instance.segments] == [6, 6, 4, 4, 4]
    assert tiny_instance.supersegment_areas().tolist() == [12, 12]


def test_well_formed_instance_has_no_violations(tiny_instance, label_space):
    assert validate_instance(tiny_instance, label_space) == []


def test_overlapping_segments_name_the_shared_pixel(label_space):
    labels = np.zeros((2, 3), dtype=np.int64)
    builder = InstanceBuilder(label_space, 2, 3, labels)
    inst = builder.build("x", [np.array([0, 1]), np.array([1, 2])], [0, 0])
    assert "segments 0 and 1 share pixel (0,1)" in validate_instance(inst, label_space)


def test_missing_parent_is_reported(tiny_instance, label_space):
    broken = replace(tiny_instance, seg_parent={i: 0 for i in range(4)})
    assert "segment 4 has no parent" in validate_instance(broken, label_space)


def test_gt_box_outside_grid_is_reported(tiny_instance, label_space):
    broken = replace(tiny_instance, gt_boxes=(GTBox(2, (0, 0, 7, 4)),))
    assert validate_instance(broken, label_space) == ["gt box 0 box (0, 0, 7, 4) outside grid bounds"]


def test_detection_of_non_detector_class_is_reported(tiny_instance, label_space):
    broken = replace(tiny_instance, detections=(DetectionCandidate(0, 0.3, (0, 0, 2, 2)),))
    assert validate_instance(broken, label_space) == ["detection 0 class 0 is not a detector class"]


def test_segment_label_must_match_majority(tiny_instance, label_space):
    segments = list(tiny_instance.segments)
    segments[3] = replace(segments[3], gt_label=0)
    problems = validate_instance(replace(tiny_instance, segments=tuple(segments)), label_space)
    assert problems == ["segment 3 gt_label 0 != pixel majority 2"]


def test_scene_outside_label_space_is_reported(tiny_instance, label_space):
    assert validate_instance(replace(tiny_instance, gt_scene=5), label_space) == ["gt_scene 5 outside scene types"]


def test_majority_label_ties_and_void():
    assert majority_label(np.array([2, 1, 2, 1]), 3) == 1
    assert majority_label(np.array([VOID, VOID]), 3) == VOID


def test_rle_skips_void_runs():
    runs = encode_rle(np.array([-1, -1, 2, 2, 2, -1, 0]))
    assert runs == [[2, 3, 2], [6, 1, 0]]
    assert decode_rle(runs, 7).tolist() == [-1, -1, 2, 2, 2, -1, 0]


def test_decode_rle_rejects_runs_outside_grid():
    with pytest.raises(ValueError):
        decode_rle([[5, 3, 1]], 6)


def test_box_iou_of_half_open_boxes():
    assert box_iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1.0 / 3.0)
    assert box_iou((0, 0, 2, 2), (2, 2, 4, 4)) == 0.0


def test_gt_surrogate_detection_has_unit_sigma():
    assert DetectionCandidate(2, float("inf"), (0, 0, 1, 1)).sigma == 1.0


def test_class_presence_and_painting(tiny_instance):
    assert class_presence(tiny_instance, 3).tolist() == [True, True, True]
    painted = paint_segments(tiny_instance, [s.gt_label for s in tiny_instance.segments])
    assert np.array_equal(painted, tiny_instance.gt_pixel_labels)


def test_coverage_counts_only_large_segments(tiny_instance):
    fraction, count = coverage_stats(tiny_instance, min_area=5)
    assert count == 2
    assert fraction == pytest.approx(0.5)
    with pytest.raises(ValueError):
        coverage_stats(tiny_instance, -1)


def test_canonical_json_sorts_keys_and_nulls_non_finite():
    assert canonical_dumps({"b": 1.0 / 3.0, "a": float("nan")}) == '{"a":null,"b":0.333333333333}\n'


def test_save_load_save_is_byte_identical(tiny_dataset, tmp_path):
    first, second = tmp_path / "first", tmp_path / "second"
    save_dataset(tiny_dataset, first)
    loaded = load_dataset(first)
    save_dataset(loaded, second)
    files = sorted(p.relative_to(first) for p in first.rglob("*.json"))
    assert files == sorted(p.relative_to(second) for p in second.rglob("*.json"))
    for rel in files:
        assert (first / rel).read_bytes() == (second / rel).read_bytes()
    assert [i.id for i in loaded.train] == ["a", "b"]
    assert [i.id for i in loaded.test] == ["t0", "t1"]


def test_parse_error_carries_file_and_line(tiny_dataset, tmp_path):
    save_dataset(tiny_dataset, tmp_path)
    bad = tmp_path / "instances" / "zz.json"
    bad.write_text('{\n  "id": "zz",\n  oops\n}\n', encoding="utf-8")
    with pytest.raises(DataError) as err:
        load_dataset(tmp_path)
    assert err.value.path.endswith("zz.json")
    assert err.value.line == 3


def test_invalid_instance_aborts_loading(tiny_dataset, tmp_path):
    save_dataset(tiny_dataset, tmp_path)
    record = (tmp_path / "instances" / "a.json").read_text(encoding="utf-8").replace('"gt_scene":0', '"gt_scene":9')
    (tmp_path / "instances" / "a.json").write_text(record, encoding="utf-8")
    with pytest.raises(DataError, match="instance a: gt_scene 9 outside scene types"):
        load_dataset(tmp_path)


def test_duplicate_ids_are_rejected(tiny_dataset, tmp_path):
    save_dataset(tiny_dataset, tmp_path)
    text = (tmp_path / "instances" / "a.json").read_text(encoding="utf-8")
    (tmp_path / "instances" / "copy.json").write_text(text, encoding="utf-8")
    with pytest.raises(DataError, match="duplicate instance id"):
        load_dataset(tmp_path)


def test_label_space_violations_are_data_errors(tmp_path):
    write_json(tmp_path / "labelspace.json", {"classes": ["a"], "scene_types": ["s"], "is_thing": [False]})
    with pytest.raises(DataError, match="need at least 2 classes"):
        load_dataset(tmp_path)


def test_dataset_summary_counts(tiny_dataset):
    summary = dataset_summary(tiny_dataset)
    assert summary["train"] == 2 and summary["test"] == 2
    assert summary["mean_segments"] == 5.0
    assert summary["mean_detections"] == 1.5
