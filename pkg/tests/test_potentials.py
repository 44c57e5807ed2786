from dataclasses import replace

import numpy as np
import pytest

from hscrf.services.dataset import Dataset, save_dataset
from hscrf.services.potentials import (
    RESOLVABLE,
    PairPreferenceAnswers,
    ProviderStores,
    assemble_bundle,
    check_rows,
    chow_liu_tree,
    cooccurrence_from_counts,
    cooccurrence_from_preferences,
    cooccurrence_from_presence,
    gt_potentials,
    human_unary_from_votes,
    mutual_information,
    one_hot_rows,
    preference_conditionals,
    presence_table,
    scene_class_from_counts,
)
from hscrf.services.shape_priors import MaskLibrary
from hscrf.utils.config import COMPONENTS, ExperimentConfig, Source
from hscrf.utils.errors import DataError, UnresolvableComponentError


def test_votes_normalize_into_a_distribution():
    assert human_unary_from_votes([3, 1, 0], min_area=5, area=10).tolist() == [0.75, 0.25, 0.0]


def test_small_or_unvoted_regions_are_uniform():
    assert np.allclose(human_unary_from_votes([3, 1, 0], min_area=5, area=2), 1.0 / 3.0)
    assert np.allclose(human_unary_from_votes([0, 0], min_area=0, area=9), 0.5)
    with pytest.raises(ValueError):
        human_unary_from_votes([1, -1], min_area=0, area=1)


def test_cooccurrence_uses_add_one_smoothing():
    marginals, joint = cooccurrence_from_presence(np.array([[1, 0], [1, 1]]))
    assert marginals == pytest.approx([4.0 / 6.0, 3.0 / 6.0])
    assert joint[0, 1] == pytest.approx(2.0 / 6.0)
    assert np.allclose(np.diag(joint), marginals)


def test_presence_table_is_a_distribution():
    _, joint = cooccurrence_from_presence(np.array([[1, 0, 1], [1, 1, 0], [0, 1, 1]]))
    table = presence_table(joint, 0, 2)
    assert table.sum() == pytest.approx(1.0)
    assert (table > 0).all()
    assert mutual_information(table) >= -1e-12


def test_chow_liu_prefers_the_dependent_pair():
    rng = np.random.default_rng(0)
    a = rng.random(400) < 0.5
    presence = np.stack([a, a, rng.random(400) < 0.5], axis=1).astype(float)
    _, joint = cooccurrence_from_presence(presence)
    edges = chow_liu_tree(joint)
    assert len(edges) == 2
    assert (0, 1) in edges


def test_chow_liu_needs_two_classes():
    with pytest.raises(ValueError):
        chow_liu_tree(np.array([[0.5]]))


def test_preference_conditionals_ignore_self_preferences():
    counts = np.array([[7.0, 3.0, 1.0], [2.0, 0.0, 2.0], [1.0, 1.0, 0.0]])
    cond = preference_conditionals(PairPreferenceAnswers(counts=counts, marginals=np.full(3, 0.5)))
    assert cond[0].tolist() == [0.0, 0.75, 0.25]
    assert np.allclose(cond.sum(axis=1), 1.0)


def test_anchor_without_answers_is_rejected():
    counts = np.array([[0.0, 0.0], [1.0, 0.0]])
    with pytest.raises(ValueError, match="anchor class 0"):
        preference_conditionals(PairPreferenceAnswers(counts=counts, marginals=np.full(2, 0.5)))


def test_preference_joint_is_symmetric_with_marginals_on_the_diagonal():
    counts = np.array([[0.0, 4.0, 2.0], [4.0, 0.0, 2.0], [2.0, 2.0, 0.0]])
    marginals = np.array([0.9, 0.6, 0.3])
    joint = cooccurrence_from_preferences(PairPreferenceAnswers(counts=counts, marginals=marginals))
    assert np.allclose(joint, joint.T)
    assert np.allclose(np.diag(joint), marginals)


def test_scene_class_from_counts():
    presence = np.array([[1.0, 1.0, 1.0], [1.0, 1.0, 0.0]])
    table = scene_class_from_counts(presence, np.array([0, 1]), 2)
    assert np.allclose(table[0], 2.0 / 3.0)
    assert np.allclose(table[1], [2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0])


def test_one_hot_rows_are_uniform_for_void():
    table = one_hot_rows([2, -1], 4)
    assert table[0].tolist() == [0.0, 0.0, 1.0, 0.0]
    assert np.allclose(table[1], 0.25)


def test_bundle_sources_follow_the_configuration(tiny_instance, tiny_stores):
    cfg = ExperimentConfig(min_area=0).with_components(
        seg_unary=Source.HUMAN, class_tree=Source.HUMAN, scene_class=Source.HUMAN
    )
    bundle = assemble_bundle(tiny_instance, cfg, tiny_stores)
    assert {name: bundle.sources[name] for name in COMPONENTS} == {
        name: getattr(cfg.components, name) for name in COMPONENTS
    }
    assert check_rows(bundle.seg_unary)
    assert bundle.seg_unary[0].tolist() == pytest.approx([1 / 6, 4 / 6, 1 / 6])
    assert bundle.class_tree is tiny_stores.stats.human_tree
    assert bundle.scene_class.shape == (2, 3)


def test_removing_detection_removes_shape(tiny_instance, tiny_stores):
    cfg = ExperimentConfig().with_components(detection=Source.REMOVE)
    bundle = assemble_bundle(tiny_instance, cfg, tiny_stores)
    assert bundle.detections is None and bundle.shape_masks is None
    assert bundle.sources["shape"] is Source.REMOVE


def test_human_detection_uses_gt_boxes(tiny_instance, tiny_stores):
    cfg = ExperimentConfig().with_components(detection=Source.HUMAN, shape=Source.GT)
    bundle = assemble_bundle(tiny_instance, cfg, tiny_stores)
    assert [d.box for d in bundle.detections] == [(2, 2, 4, 4)]
    assert bundle.detections[0].sigma == 1.0
    assert bundle.shape_masks[0].tolist() == [[1.0, 1.0], [1.0, 1.0]]


def test_gt_sources_give_one_hot_tables(tiny_instance, tiny_stores):
    sources = {"seg_unary": Source.GT, "supseg_unary": Source.GT, "class_unary": Source.GT, "scene_unary": Source.GT}
    bundle = assemble_bundle(tiny_instance, ExperimentConfig().with_components(**sources), tiny_stores)
    assert np.argmax(bundle.seg_unary, axis=1).tolist() == [1, 1, 0, 2, 0]
    assert bundle.class_unary.tolist() == [1.0, 1.0, 1.0]
    assert bundle.scene_unary.tolist() == [1.0, 0.0]


def test_machine_class_unary_is_the_training_frequency(tiny_instance, tiny_stores):
    bundle = assemble_bundle(tiny_instance, ExperimentConfig(), tiny_stores)
    # grass and sky appear in both training scenes, the cow in one of two
    assert bundle.class_unary.tolist() == pytest.approx([4 / 6, 4 / 6, 3 / 6])


def test_small_segments_can_get_uniform_machine_rows(tiny_instance, tiny_stores):
    cfg = ExperimentConfig(min_area=5, small_segment_uniform=True)
    table = assemble_bundle(tiny_instance, cfg, tiny_stores).seg_unary
    assert np.allclose(table[2:], 1.0 / 3.0)
    assert table[0].max() == pytest.approx(0.6)


@pytest.mark.parametrize("component,source", [("shape", Source.HUMAN), ("class_unary", Source.HUMAN)])
def test_unresolvable_sources_raise(tiny_instance, tiny_stores, component, source):
    assert source not in RESOLVABLE[component]
    cfg = ExperimentConfig().with_components(**{component: source})
    with pytest.raises(UnresolvableComponentError, match=component):
        assemble_bundle(tiny_instance, cfg, tiny_stores)


def test_missing_store_data_is_unresolvable(tiny_instance, tiny_stores):
    tiny_stores.votes.pop(tiny_instance.id)
    cfg = ExperimentConfig().with_components(seg_unary=Source.HUMAN)
    with pytest.raises(UnresolvableComponentError, match="no votes"):
        assemble_bundle(tiny_instance, cfg, tiny_stores)


def test_human_tree_needs_preference_answers(label_space, tiny_dataset, tiny_stores, tiny_instance):
    stores = ProviderStores(label_space=label_space, machine=tiny_stores.machine).with_stats(tiny_dataset.train)
    cfg = ExperimentConfig().with_components(class_tree=Source.HUMAN, detection=Source.REMOVE)
    with pytest.raises(UnresolvableComponentError, match="no preference answers"):
        assemble_bundle(tiny_instance, cfg, stores)


def test_stores_survive_a_disk_round_trip(tiny_dataset, tiny_stores, tmp_path):
    save_dataset(tiny_dataset, tmp_path)
    tiny_stores.save(tmp_path)
    loaded = ProviderStores.from_directory(tmp_path, tiny_dataset)
    assert sorted(loaded.machine) == sorted(tiny_stores.machine)
    assert np.allclose(loaded.machine["a"].seg_unary, tiny_stores.machine["a"].seg_unary)
    assert np.array_equal(loaded.votes["b"].segments, tiny_stores.votes["b"].segments)
    assert np.array_equal(loaded.edges["a"], tiny_stores.edges["a"])
    assert np.array_equal(loaded.class_preferences, tiny_stores.class_preferences)
    assert loaded.stats is not None


def test_negative_votes_are_data_errors(tiny_dataset, tiny_stores, tmp_path):
    tiny_stores.votes["a"].segments[0, 0] = -1.0
    tiny_stores.save(tmp_path)
    with pytest.raises(DataError, match="negative vote count"):
        ProviderStores.from_directory(tmp_path, tiny_dataset)


def test_training_stats_need_training_instances(label_space, tiny_dataset):
    empty = Dataset(label_space=label_space, train=(), test=tiny_dataset.test)
    with pytest.raises(DataError):
        ProviderStores(label_space=label_space).with_stats(empty.train)


def test_cooccurrence_from_counts_reads_the_training_split(tiny_dataset):
    # both training scenes hold grass and sky, only one holds the cow
    marginals, joint = cooccurrence_from_counts(tiny_dataset, alpha=0.0)
    assert marginals.tolist() == [1.0, 1.0, 0.5]
    assert joint[0, 1] == pytest.approx(1.0)
    assert joint[0, 2] == pytest.approx(0.5)
    assert np.allclose(joint, joint.T)
    smoothed, _ = cooccurrence_from_counts(tiny_dataset)
    assert smoothed.tolist() == pytest.approx([4 / 6, 4 / 6, 3 / 6])


def test_gt_potentials_follow_the_annotation(tiny_instance, label_space, tiny_stores):
    bundle = gt_potentials(tiny_instance, label_space, tiny_stores.masks)
    assert bundle.seg_unary[3].tolist() == [0.0, 0.0, 1.0]
    assert np.argmax(bundle.supseg_unary, axis=1).tolist() == [1, 0]
    assert bundle.class_unary.tolist() == [1.0, 1.0, 1.0]
    assert bundle.scene_unary.tolist() == [1.0, 0.0]
    assert [(d.class_id, d.box, d.sigma) for d in bundle.detections] == [(2, (2, 2, 4, 4), 1.0)]
    assert bundle.shape_masks[0].tolist() == [[1.0, 1.0], [1.0, 1.0]]
    assert set(bundle.sources.values()) == {Source.GT}


def test_gt_potentials_need_an_annotation(tiny_instance, label_space):
    with pytest.raises(DataError):
        gt_potentials(replace(tiny_instance, gt_scene=None), label_space)


def test_gt_routing_uses_the_annotation_bundle(tiny_instance, tiny_stores, label_space):
    cfg = ExperimentConfig().with_components(detection=Source.GT, shape=Source.GT, seg_unary=Source.GT)
    routed = assemble_bundle(tiny_instance, cfg, tiny_stores)
    direct = gt_potentials(tiny_instance, label_space, tiny_stores.masks)
    assert np.array_equal(routed.seg_unary, direct.seg_unary)
    assert [d.box for d in routed.detections] == [d.box for d in direct.detections]
    assert np.array_equal(routed.shape_masks[0], direct.shape_masks[0])


def test_gt_sources_need_an_annotated_instance(tiny_instance, tiny_stores):
    cfg = ExperimentConfig().with_components(scene_unary=Source.GT)
    with pytest.raises(UnresolvableComponentError, match="scene_unary from gt"):
        assemble_bundle(replace(tiny_instance, gt_scene=None), cfg, tiny_stores)


def test_classes_without_training_masks_fall_back_to_the_box_prior(tiny_instance, tiny_stores):
    tiny_stores.masks = MaskLibrary()
    detector = assemble_bundle(tiny_instance, ExperimentConfig(), tiny_stores)
    naive = assemble_bundle(tiny_instance, ExperimentConfig(shape_prior="naive"), tiny_stores)
    assert len(detector.shape_masks) == 2
    for ours, box_prior in zip(detector.shape_masks, naive.shape_masks):
        assert np.array_equal(ours, box_prior)
