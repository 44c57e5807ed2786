import itertools

import numpy as np
import pytest

from hscrf.services.shape_priors import (
    SHAPE_ROWS,
    MaskLibrary,
    MaskRecord,
    average_component_mask,
    boundary,
    cluster_masks,
    distance_transform_select,
    load_mask_records,
    mask_rates,
    naive_box_prior,
    normalized_mask_accuracy,
    oracle_best,
    pixel_accuracy,
    resample_mask,
    save_mask_records,
    shape_table,
    snap_mask_to_segments,
    to_raster,
)


def test_average_component_mask_is_the_per_cell_mean():
    avg = average_component_mask([np.array([[1, 0], [1, 0]]), np.array([[1, 1], [1, 1]])])
    assert avg.tolist() == [[1.0, 0.5], [1.0, 0.5]]
    with pytest.raises(ValueError):
        average_component_mask([])


def test_resampling_preserves_area_means():
    checker = (np.indices((20, 20)).sum(axis=0) % 2).astype(float)
    assert np.allclose(to_raster(checker), 0.5)
    assert np.allclose(resample_mask(np.ones((3, 7)), (10, 10)), 1.0)


def test_cluster_masks_returns_inputs_when_k_equals_count():
    masks = [np.eye(4, dtype=bool), np.ones((4, 4), dtype=bool)]
    reps = cluster_masks(masks, 2)
    assert all(np.array_equal(r, m) for r, m in zip(reps, masks))
    with pytest.raises(ValueError):
        cluster_masks(masks, 0)
    with pytest.raises(ValueError):
        cluster_masks(masks, 3)


def test_cluster_masks_picks_a_member_per_cluster():
    wide = np.zeros((10, 10), dtype=bool)
    wide[4:6, :] = True
    tall = wide.T.copy()
    reps = cluster_masks([wide, wide.copy(), tall, tall.copy()], 2, seed=1)
    kinds = sorted("wide" if np.array_equal(r, wide) else "tall" for r in reps)
    assert kinds == ["tall", "wide"]


def test_boundary_is_the_inner_contour():
    square = np.zeros((5, 5), dtype=bool)
    square[1:4, 1:4] = True
    expected = square.copy()
    expected[2, 2] = False
    assert np.array_equal(boundary(square), expected)


def test_distance_transform_prefers_the_candidate_on_the_edges():
    target = np.zeros((12, 12), dtype=bool)
    target[3:9, 3:9] = True
    shifted = np.roll(target, 2, axis=1)
    selection = distance_transform_select(boundary(target), [shifted, target])
    assert selection.index == 1
    assert selection.score == 0.0
    other = distance_transform_select(boundary(target), [shifted])
    assert other.score > 0.0


def test_distance_transform_rejects_empty_boundaries():
    with pytest.raises(ValueError, match="empty boundary"):
        distance_transform_select(np.ones((3, 3), dtype=bool), [np.zeros((3, 3), dtype=bool)])


def test_naive_prior_counts_border_segments_as_inside(tiny_instance):
    assert naive_box_prior((2, 2, 4, 4), tiny_instance).tolist() == [0, 0, 0, 1, 0]
    assert naive_box_prior((0, 0, 6, 2), tiny_instance).tolist() == [1, 1, 0, 0, 0]
    assert naive_box_prior((1, 0, 6, 2), tiny_instance).tolist() == [0, 1, 0, 0, 0]


def test_snap_is_a_per_segment_majority():
    ids = np.repeat(np.arange(2), 10).reshape(4, 5)
    gt = np.zeros((4, 5), dtype=bool)
    gt.ravel()[:10] = True
    gt.ravel()[10:14] = True
    snapped = snap_mask_to_segments(gt, ids)
    assert snapped.ravel()[:10].all()
    assert not snapped.ravel()[10:].any()


def test_snap_ties_go_to_background():
    assert not snap_mask_to_segments(np.array([[True, False]]), np.array([[0, 0]])).any()


def test_snap_is_the_best_segment_constant_mask():
    rng = np.random.default_rng(7)
    for _ in range(20):
        ids = rng.integers(0, 6, size=(6, 6))
        gt = rng.random((6, 6)) < 0.5
        best = pixel_accuracy(snap_mask_to_segments(gt, ids), gt)
        for on in itertools.product([False, True], repeat=6):
            assert pixel_accuracy(np.array(on)[ids], gt) <= best + 1e-12


def test_normalized_accuracy_trivial_cases():
    gt = np.array([[True, False], [True, False]])
    assert normalized_mask_accuracy(gt, gt) == 1.0
    assert normalized_mask_accuracy(~gt, gt) == 0.0
    assert normalized_mask_accuracy(np.ones_like(gt), gt) == 0.5


def test_mask_and_complement_accuracies_sum_to_one():
    rng = np.random.default_rng(11)
    for _ in range(10):
        gt = rng.random((8, 8)) < 0.4
        gt[0, 0], gt[0, 1] = True, False
        pred = rng.random((8, 8)) < 0.5
        assert normalized_mask_accuracy(pred, gt) + normalized_mask_accuracy(~pred, gt) == pytest.approx(1.0)


def test_random_masks_score_chance():
    rng = np.random.default_rng(3)
    gt = np.zeros((20, 20), dtype=bool)
    gt[5:15, 3:12] = True
    scores = [normalized_mask_accuracy(rng.random((20, 20)) < 0.5, gt) for _ in range(1000)]
    assert np.mean(scores) == pytest.approx(0.5, abs=0.02)


def test_degenerate_ground_truth_returns_the_defined_rate():
    rates = mask_rates(np.array([[True, False]]), np.array([[True, True]]))
    assert rates.degenerate
    assert rates.value == 0.5
    assert np.isnan(rates.tnr)


def test_oracle_picks_the_ground_truth_when_offered():
    gt = np.array([[True, False], [False, False]])
    index, accuracy = oracle_best([np.zeros_like(gt), gt, gt.copy()], gt)
    assert (index, accuracy) == (1, 1.0)


def test_library_components_and_aspects():
    wide = np.ones((2, 6), dtype=bool)
    tall = np.ones((6, 2), dtype=bool)
    library = MaskLibrary.from_records([MaskRecord(3, 0, wide), MaskRecord(3, 1, tall), MaskRecord(3, 1, tall)])
    assert library.component_ids(3) == [0, 1]
    assert len(library.clusters[3]) == 2
    assert library.pick_component(3, (0, 0, 9, 3)) == 0
    assert library.pick_component(3, (0, 0, 3, 9)) == 1
    assert library.component_mask(3, 5) is library.components[(3, 1)]
    with pytest.raises(KeyError):
        library.pick_component(0, (0, 0, 2, 2))


def test_mask_records_round_trip(label_space, tmp_path):
    records = [MaskRecord(2, 1, np.array([[True, False, True], [False, True, True]]))]
    save_mask_records(records, tmp_path, label_space)
    assert (tmp_path / "cow" / "0.json").exists()
    loaded = load_mask_records(tmp_path, label_space)
    assert loaded[0].component == 1
    assert np.array_equal(loaded[0].mask, records[0].mask)


def test_shape_table_rows(tiny_dataset, tiny_stores):
    rows = shape_table(tiny_dataset.test, tiny_dataset.label_space, tiny_stores.masks, tiny_stores.edges)
    assert [r.prior for r in rows] == list(SHAPE_ROWS)
    assert all(r.objects == 1 for r in rows)
    snap = rows[SHAPE_ROWS.index("GT-snap")]
    assert snap.normalized == 1.0 and snap.pixel == 1.0
