import numpy as np
import pytest

from hscrf.services.metrics import (
    DetResult,
    GTObject,
    confusion_from_labels,
    detection_ap,
    global_recall,
    mean_rank_of_truth,
    oracle_combination,
    per_class_recall,
    scene_accuracy,
    segment_pixel_accuracy,
    snap_upper_bound,
    supersegment_disagreement,
    symmetric_kl_rows,
    thing_stuff_recall,
    unary_argmax_labels,
    voc_ap,
)
from hscrf.utils.errors import MetricError


def test_confusion_of_perfect_labels_is_diagonal(tiny_instance):
    cm = confusion_from_labels(tiny_instance, [1, 1, 0, 2, 0], 3)
    assert cm.tolist() == [[8, 0, 0], [0, 12, 0], [0, 0, 4]]


def test_confusion_rows_are_ground_truth(tiny_instance):
    cm = confusion_from_labels(tiny_instance, [1, 1, 0, 0, 0], 3)
    assert cm[2].tolist() == [4, 0, 0]


def test_recall_skips_classes_without_pixels():
    recalls, avg = per_class_recall(np.array([[3, 1, 0], [0, 0, 0], [0, 1, 1]]))
    assert np.isnan(recalls[1])
    assert avg == pytest.approx((0.75 + 0.5) / 2)
    assert global_recall(np.array([[3, 1], [1, 3]])) == 0.75
    with pytest.raises(MetricError):
        per_class_recall(np.zeros((2, 2)))


def test_thing_and_stuff_recall():
    cm = np.array([[4, 0, 0], [2, 2, 0], [0, 3, 1]])
    things, stuff = thing_stuff_recall(cm, [False, False, True])
    assert things == 0.25
    assert stuff == 0.75


def test_voc_ap_of_a_perfect_ranking():
    assert voc_ap(np.array([0.5, 1.0]), np.array([1.0, 1.0])) == 1.0


def test_detection_ap_with_a_false_positive_ranked_first():
    gts = [GTObject("img", 2, (0, 0, 4, 4))]
    dets = [DetResult("img", 2, (10, 10, 12, 12), 0.9), DetResult("img", 2, (0, 0, 4, 4), 0.4)]
    per_class, mean = detection_ap(dets, gts)
    assert per_class == {2: 0.5}
    assert mean == 0.5


def test_duplicate_detections_count_once():
    gts = [GTObject("img", 1, (0, 0, 4, 4))]
    dets = [DetResult("img", 1, (0, 0, 4, 4), 0.9), DetResult("img", 1, (0, 0, 4, 4), 0.8)]
    per_class, _ = detection_ap(dets, gts)
    assert per_class[1] == 1.0


def test_detections_in_other_images_do_not_match():
    gts = [GTObject("a", 1, (0, 0, 4, 4))]
    per_class, _ = detection_ap([DetResult("b", 1, (0, 0, 4, 4), 0.9)], gts)
    assert per_class[1] == 0.0


def test_mean_ap_is_zero_without_ground_truth_objects():
    assert detection_ap([DetResult("img", 1, (0, 0, 2, 2), 0.5)], []) == ({}, 0.0)


def test_scene_and_segment_accuracy():
    assert scene_accuracy([0, 1, 1, 2], [0, 1, 0, 2]) == 0.75
    assert segment_pixel_accuracy([0, 1, 2], [0, -1, 1], [4, 10, 4]) == 0.5
    with pytest.raises(MetricError):
        scene_accuracy([], [])


def test_symmetric_kl_is_zero_only_for_matching_rows():
    cm = np.array([[8.0, 2.0], [1.0, 9.0]])
    assert symmetric_kl_rows(cm, cm * 3.0) == pytest.approx(0.0, abs=1e-12)
    assert symmetric_kl_rows(cm, cm[:, ::-1]) > 1.0
    assert symmetric_kl_rows(cm, cm[:, ::-1]) == pytest.approx(symmetric_kl_rows(cm[:, ::-1], cm))


def test_oracle_combination_uses_the_right_predictor():
    assert oracle_combination([0, 1, 1], [0, 0, 2], [0, 0, 2]) == 1.0
    assert oracle_combination([0, 1, 1], [0, 0, 0], [0, 0, 2], areas=[1, 1, 2]) == 0.5


def test_mean_rank_of_truth():
    table = np.array([[0.1, 0.7, 0.2], [0.6, 0.3, 0.1], [0.3, 0.3, 0.4]])
    assert mean_rank_of_truth(table, [2, 0, -1]) == 1.5
    assert mean_rank_of_truth(table, [2, 0, -1], restrict_to_misclassified=True) == 2.0
    assert np.isnan(mean_rank_of_truth(table, [-1, -1, -1]))


def test_supersegment_disagreement():
    parents = {0: 0, 1: 0, 2: 0, 3: 1, 4: 1}
    assert supersegment_disagreement([0, 0, 1, 2, 2], parents) == pytest.approx(0.2)
    assert supersegment_disagreement([], {}) == 0.0


def test_snap_upper_bound_of_pure_segments(tiny_dataset):
    assert snap_upper_bound(tiny_dataset.test, 3) == (1.0, 1.0)


def test_unary_argmax_takes_the_first_maximum():
    assert unary_argmax_labels(np.array([[0.4, 0.4, 0.2], [0.1, 0.2, 0.7]])).tolist() == [0, 2]
