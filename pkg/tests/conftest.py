from pathlib import Path

import numpy as np
import pytest

from hscrf.services.dataset import Dataset, DetectionCandidate, GTBox, InstanceBuilder, LabelSpace, SceneInstance
from hscrf.services.potentials import InstanceVotes, MachineRecord, ProviderStores
from hscrf.services.shape_priors import MaskLibrary, MaskRecord
from hscrf.services.synth import SynthOutput, generate_dataset, write_synth
from hscrf.utils.config import ExperimentConfig, GeneratorConfig, LearnOptions

GRASS, SKY, COW = 0, 1, 2

# 4x6 scene: sky on top, grass below, a 2x2 cow in the middle of the grass.
COW_LABELS = np.array(
    [
        [1, 1, 1, 1, 1, 1],
        [1, 1, 1, 1, 1, 1],
        [0, 0, 2, 2, 0, 0],
        [0, 0, 2, 2, 0, 0],
    ]
)
PLAIN_LABELS = np.where(COW_LABELS == COW, GRASS, COW_LABELS)
COW_BOX = (2, 2, 4, 4)
FP_BOX = (0, 0, 2, 2)


def _block(r0: int, r1: int, c0: int, c1: int) -> np.ndarray:
    mask = np.zeros((4, 6), dtype=bool)
    mask[r0:r1, c0:c1] = True
    return mask


SEGMENT_MASKS = [
    _block(0, 2, 0, 3),
    _block(0, 2, 3, 6),
    _block(2, 4, 0, 2),
    _block(2, 4, 2, 4),
    _block(2, 4, 4, 6),
]
SEG_PARENT = [0, 0, 1, 1, 1]


def soft_row(label: int, n: int, peak: float = 0.6) -> np.ndarray:
    row = np.full(n, (1.0 - peak) / (n - 1))
    row[label] = peak
    return row


@pytest.fixture
def label_space() -> LabelSpace:
    return LabelSpace(
        classes=("grass", "sky", "cow"),
        scene_types=("field", "beach"),
        is_thing=(False, False, True),
        detector_classes=(COW,),
    )


@pytest.fixture
def make_instance(label_space):
    """Factory for the 4x6 scene, with or without the cow."""

    def build(inst_id: str = "a", cow: bool = True, split: str = "train", scene: int = 0) -> SceneInstance:
        labels = COW_LABELS if cow else PLAIN_LABELS
        builder = InstanceBuilder(label_space, 4, 6, labels)
        detections = [DetectionCandidate(COW, -1.0, FP_BOX, 0)]
        gt_boxes = []
        if cow:
            detections.insert(0, DetectionCandidate(COW, 1.5, COW_BOX, 0))
            gt_boxes.append(GTBox(COW, COW_BOX))
        return builder.build(inst_id, SEGMENT_MASKS, SEG_PARENT, detections, gt_boxes, gt_scene=scene, split=split)

    return build


@pytest.fixture
def tiny_instance(make_instance) -> SceneInstance:
    return make_instance()


@pytest.fixture
def tiny_dataset(label_space, make_instance) -> Dataset:
    return Dataset(
        label_space=label_space,
        train=(make_instance("a", cow=True, scene=0), make_instance("b", cow=False, scene=1)),
        test=(
            make_instance("t0", cow=True, split="test", scene=0),
            make_instance("t1", cow=False, split="test", scene=1),
        ),
    )


@pytest.fixture
def tiny_stores(label_space, tiny_dataset) -> ProviderStores:
    C, C_l = label_space.C, label_space.C_l
    machine, votes, edges = {}, {}, {}
    for inst in tiny_dataset.instances:
        machine[inst.id] = MachineRecord(
            seg_unary=np.array([soft_row(s.gt_label, C) for s in inst.segments]),
            supseg_unary=np.array([soft_row(s.gt_label, C) for s in inst.supersegments]),
            scene_unary=soft_row(inst.gt_scene, C_l),
        )
        votes[inst.id] = InstanceVotes(
            segments=np.array([np.eye(C)[s.gt_label] * 3 + 1 for s in inst.segments]),
            supersegments=np.array([np.eye(C)[s.gt_label] * 3 + 1 for s in inst.supersegments]),
            scene=np.eye(C_l)[inst.gt_scene] * 4 + 1,
        )
        grid = np.zeros((4, 6), dtype=bool)
        grid[2, :] = True
        edges[inst.id] = grid
    records = [
        MaskRecord(COW, 0, np.ones((2, 2), dtype=bool)),
        MaskRecord(COW, 1, np.array([[True, False], [True, True]])),
    ]
    stores = ProviderStores(
        label_space=label_space,
        machine=machine,
        votes=votes,
        class_preferences=np.array([[0.0, 4.0, 2.0], [4.0, 0.0, 2.0], [2.0, 2.0, 0.0]]),
        scene_preferences=np.array([[3.0, 1.0, 2.0], [2.0, 3.0, 0.0]]),
        masks=MaskLibrary.from_records(records),
        edges=edges,
    )
    return stores.with_stats(tiny_dataset.train)


@pytest.fixture
def quick_config() -> ExperimentConfig:
    """All-machine config with a short learning schedule."""
    return ExperimentConfig(learn=LearnOptions(epochs=3, max_iters=50))


@pytest.fixture(scope="session")
def small_generator() -> GeneratorConfig:
    return GeneratorConfig(seed=5, n_train=12, n_test=6, height=32, width=48)


@pytest.fixture(scope="session")
def synth_output(small_generator) -> SynthOutput:
    return generate_dataset(small_generator)


@pytest.fixture(scope="session")
def synth_dir(synth_output, tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("synth")
    write_synth(synth_output, root)
    return root
