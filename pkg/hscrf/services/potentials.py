"""Potential tables from machine, human and ground-truth sources.

Tables are kept probability-style here (rows sum to 1); the factor graph takes
logs with an epsilon floor when it builds factors.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np

from hscrf.services.dataset import (
    Dataset,
    DetectionCandidate,
    LabelSpace,
    SceneInstance,
    class_presence,
    decode_rle,
    encode_rle,
    read_json,
    write_json,
)
from hscrf.services.shape_priors import (
    MaskLibrary,
    MaskRecord,
    boundary,
    crop,
    distance_transform_select,
    load_mask_records,
    naive_box_mask,
    save_mask_records,
    to_box,
)
from hscrf.utils.config import ExperimentConfig, Source
from hscrf.utils.errors import DataError, UnresolvableComponentError
from hscrf.utils.logger import get_logger

logger = get_logger(__name__)

EPS = 1e-6
ALPHA = 1.0

# Sources each component can be resolved from; anything else is unresolvable.
RESOLVABLE: Dict[str, Tuple[Source, ...]] = {
    "seg_unary": (Source.MACHINE, Source.HUMAN, Source.GT, Source.REMOVE),
    "seg_unary_aux": (Source.MACHINE, Source.HUMAN, Source.GT, Source.REMOVE),
    "supseg_unary": (Source.MACHINE, Source.HUMAN, Source.GT, Source.REMOVE),
    "pn": (Source.MACHINE, Source.REMOVE),
    "class_unary": (Source.MACHINE, Source.GT, Source.REMOVE),
    "class_tree": (Source.MACHINE, Source.HUMAN, Source.REMOVE),
    "detection": (Source.MACHINE, Source.HUMAN, Source.GT, Source.REMOVE),
    "shape": (Source.MACHINE, Source.GT, Source.REMOVE),
    "scene_unary": (Source.MACHINE, Source.HUMAN, Source.GT, Source.REMOVE),
    "scene_class": (Source.MACHINE, Source.HUMAN, Source.REMOVE),
}


# --------------------------------------------------------------------------
# Types
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VoteRecord:
    segment: int
    counts: np.ndarray


@dataclass(frozen=True, eq=False)
class InstanceVotes:
    segments: np.ndarray  # N_seg x C
    supersegments: np.ndarray  # N_ss x C
    scene: np.ndarray  # C_l

    def record(self, segment: int) -> VoteRecord:
        return VoteRecord(segment=segment, counts=self.segments[segment])


@dataclass(frozen=True, eq=False)
class PairPreferenceAnswers:
    """Pairwise preference counts n(i -> j) per anchor class plus class marginals P(z_i)."""

    counts: np.ndarray  # C x C
    marginals: np.ndarray  # C


@dataclass(frozen=True, eq=False)
class MachineRecord:
    seg_unary: np.ndarray
    supseg_unary: np.ndarray
    scene_unary: np.ndarray


@dataclass(frozen=True, eq=False)
class TreeEdge:
    i: int
    k: int
    log_table: np.ndarray  # 2x2 pointwise mutual information


@dataclass(frozen=True, eq=False)
class PotentialBundle:
    """All potential tables for one instance; None marks a Removed component."""

    n_classes: int
    n_scenes: int
    sources: Mapping[str, Source]
    seg_unary: Optional[np.ndarray] = None
    seg_unary_aux: Optional[np.ndarray] = None
    supseg_unary: Optional[np.ndarray] = None
    pn: bool = False
    class_unary: Optional[np.ndarray] = None  # P(z_k = 1)
    class_tree: Optional[Tuple[TreeEdge, ...]] = None
    detections: Optional[Tuple[DetectionCandidate, ...]] = None
    shape_masks: Optional[Tuple[np.ndarray, ...]] = None  # box-sized, values in [0, 1]
    scene_unary: Optional[np.ndarray] = None
    scene_class: Optional[np.ndarray] = None  # C_l x C, q(k present | s)

    @property
    def n_detections(self) -> int:
        return 0 if self.detections is None else len(self.detections)


@dataclass(frozen=True, eq=False)
class TrainingStats:
    """Count-based statistics of the training split."""

    marginals: np.ndarray
    joint: np.ndarray
    machine_tree: Tuple[TreeEdge, ...]
    human_tree: Optional[Tuple[TreeEdge, ...]]
    machine_scene_class: np.ndarray
    human_scene_class: Optional[np.ndarray]


@dataclass
class ProviderStores:
    """Everything the providers read: files on disk plus training statistics."""

    label_space: LabelSpace
    machine: Dict[str, MachineRecord] = field(default_factory=dict)
    votes: Dict[str, InstanceVotes] = field(default_factory=dict)
    class_preferences: Optional[np.ndarray] = None
    scene_preferences: Optional[np.ndarray] = None
    masks: MaskLibrary = field(default_factory=MaskLibrary)
    edges: Dict[str, np.ndarray] = field(default_factory=dict)
    stats: Optional[TrainingStats] = None

    def with_stats(self, train: Sequence[SceneInstance]) -> "ProviderStores":
        self.stats = training_stats(train, self.label_space, self.class_preferences, self.scene_preferences)
        return self

    @classmethod
    def from_directory(cls, path: Path, dataset: Dataset, seed: int = 0) -> "ProviderStores":
        """Load votes, preferences, machine potentials, masks and edge maps next to a dataset."""
        root = Path(path)
        ls = dataset.label_space
        logger.info(f"Loading provider stores from {root}")
        stores = cls(label_space=ls)

        machine_dir = root / "machine_potentials"
        for file in sorted(machine_dir.glob("*.json")):
            data = read_json(file)
            try:
                stores.machine[file.stem] = MachineRecord(
                    seg_unary=np.asarray(data["seg_unary"], dtype=float),
                    supseg_unary=np.asarray(data["supseg_unary"], dtype=float),
                    scene_unary=np.asarray(data["scene_unary"], dtype=float),
                )
            except KeyError as e:
                raise DataError(f"missing table {e}", path=str(file)) from e

        votes_file = root / "votes.json"
        if votes_file.exists():
            for inst_id, record in read_json(votes_file).items():
                try:
                    votes = InstanceVotes(
                        segments=np.asarray(record["segments"], dtype=float),
                        supersegments=np.asarray(record["supersegments"], dtype=float),
                        scene=np.asarray(record["scene"], dtype=float),
                    )
                except KeyError as e:
                    raise DataError(f"missing vote table {e}", path=str(votes_file), instance_id=inst_id) from e
                if (votes.segments < 0).any() or (votes.supersegments < 0).any() or (votes.scene < 0).any():
                    raise DataError("negative vote count", path=str(votes_file), instance_id=inst_id)
                stores.votes[inst_id] = votes

        pref_file = root / "preferences.json"
        if pref_file.exists():
            prefs = read_json(pref_file)
            if "classes" in prefs:
                stores.class_preferences = np.asarray(prefs["classes"], dtype=float)
            if "scenes" in prefs:
                stores.scene_preferences = np.asarray(prefs["scenes"], dtype=float)

        stores.masks = MaskLibrary.from_records(load_mask_records(root / "masks", ls), seed=seed)

        for file in sorted((root / "edges").glob("*.json")):
            data = read_json(file)
            h, w = (int(v) for v in data["grid"])
            stores.edges[file.stem] = (decode_rle(data["rle"], h * w, fill=0) != 0).reshape(h, w)

        logger.info(
            f"Stores: {len(stores.machine)} machine records, {len(stores.votes)} vote records, "
            f"{len(stores.edges)} edge maps"
        )
        return stores.with_stats(dataset.train)

    def save(self, path: Path, mask_records: Sequence[MaskRecord] = ()) -> None:
        root = Path(path)
        for inst_id, rec in sorted(self.machine.items()):
            write_json(
                root / "machine_potentials" / f"{inst_id}.json",
                {"seg_unary": rec.seg_unary, "supseg_unary": rec.supseg_unary, "scene_unary": rec.scene_unary},
            )
        write_json(
            root / "votes.json",
            {
                inst_id: {"segments": v.segments, "supersegments": v.supersegments, "scene": v.scene}
                for inst_id, v in sorted(self.votes.items())
            },
        )
        prefs = {}
        if self.class_preferences is not None:
            prefs["classes"] = self.class_preferences
        if self.scene_preferences is not None:
            prefs["scenes"] = self.scene_preferences
        write_json(root / "preferences.json", prefs)
        for inst_id, grid in sorted(self.edges.items()):
            write_json(
                root / "edges" / f"{inst_id}.json",
                {"grid": list(grid.shape), "rle": encode_rle(grid.astype(np.int64).ravel(), skip=0)},
            )
        save_mask_records(mask_records, root / "masks", self.label_space)


# --------------------------------------------------------------------------
# Human votes
# --------------------------------------------------------------------------


def human_unary_from_votes(v: Union[VoteRecord, Sequence[float]], min_area: int, area: int) -> np.ndarray:
    """Normalize vote counts into a class distribution.

    Uniform when the region is smaller than `min_area` or nobody voted.
    """
    counts = np.asarray(v.counts if isinstance(v, VoteRecord) else v, dtype=float)
    if counts.size < 2:
        raise ValueError("need at least 2 classes")
    if (counts < 0).any():
        raise ValueError("negative vote count")
    total = counts.sum()
    if area < min_area or total == 0:
        return np.full(counts.size, 1.0 / counts.size)
    return counts / total


# --------------------------------------------------------------------------
# Occurrence and co-occurrence
# --------------------------------------------------------------------------


def presence_matrix(instances: Sequence[SceneInstance], n_classes: int) -> np.ndarray:
    return np.array([class_presence(inst, n_classes) for inst in instances], dtype=float).reshape(-1, n_classes)


def cooccurrence_from_presence(presence: np.ndarray, alpha: float = ALPHA) -> Tuple[np.ndarray, np.ndarray]:
    """Marginals P(z_i = 1) and joint P(z_i = 1, z_k = 1) with add-alpha smoothing of each 2x2 table.

    The diagonal of the joint holds the marginals.
    """
    presence = np.asarray(presence, dtype=float)
    N = presence.shape[0]
    if N == 0:
        raise ValueError("need at least one training image")
    denom = N + 4 * alpha
    counts = presence.sum(axis=0)
    pair_counts = presence.T @ presence
    marginals = (counts + 2 * alpha) / denom
    joint = (pair_counts + alpha) / denom
    np.fill_diagonal(joint, marginals)
    return marginals, joint


def cooccurrence_from_counts(ds: Dataset, alpha: float = ALPHA) -> Tuple[np.ndarray, np.ndarray]:
    return cooccurrence_from_presence(presence_matrix(ds.train, ds.label_space.C), alpha)


def preference_conditionals(p: PairPreferenceAnswers) -> np.ndarray:
    """P(z_j | z_i) = n(i -> j) / sum_k n(i -> k); self-preferences are ignored."""
    counts = np.asarray(p.counts, dtype=float).copy()
    np.fill_diagonal(counts, 0.0)
    totals = counts.sum(axis=1)
    empty = np.flatnonzero(totals <= 0)
    if empty.size:
        raise ValueError(f"anchor class {int(empty[0])} has no preference answers")
    return counts / totals[:, None]


def cooccurrence_from_preferences(p: PairPreferenceAnswers) -> np.ndarray:
    """Symmetrized joint from preference conditionals and training marginals."""
    joint = preference_conditionals(p) * np.asarray(p.marginals, dtype=float)[:, None]
    joint = (joint + joint.T) / 2.0
    np.fill_diagonal(joint, p.marginals)
    return joint


def presence_table(joint: np.ndarray, i: int, k: int) -> np.ndarray:
    """2x2 distribution over (z_i, z_k) implied by a joint with marginals on its diagonal."""
    p_i, p_k, p_ik = joint[i, i], joint[k, k], joint[i, k]
    table = np.array([[1.0 - p_i - p_k + p_ik, p_k - p_ik], [p_i - p_ik, p_ik]])
    table = np.maximum(table, EPS)
    return table / table.sum()


def mutual_information(table: np.ndarray) -> float:
    rows = table.sum(axis=1, keepdims=True)
    cols = table.sum(axis=0, keepdims=True)
    return float((table * (np.log(table) - np.log(rows) - np.log(cols))).sum())


def pointwise_table(table: np.ndarray) -> np.ndarray:
    """log P(z_i, z_k) - log P(z_i) - log P(z_k) for every cell."""
    rows = table.sum(axis=1, keepdims=True)
    cols = table.sum(axis=0, keepdims=True)
    return np.log(table) - np.log(rows) - np.log(cols)


def chow_liu_tree(joint: np.ndarray) -> List[Tuple[int, int]]:
    """Maximum mutual-information spanning tree over the classes.

    Ties between equal-MI edges resolve towards the lexicographically first
    edge (edges are offered to Kruskal in lexicographic order).

    Args:
        joint: C x C joint presence probabilities, marginals on the diagonal

    Returns:
        Sorted list of C-1 edges (i, k) with i < k
    """
    joint = np.asarray(joint, dtype=float)
    C = joint.shape[0]
    if C < 2:
        raise ValueError("need at least 2 classes")
    graph = nx.Graph()
    graph.add_nodes_from(range(C))
    for i in range(C):
        for k in range(i + 1, C):
            mi = mutual_information(presence_table(joint, i, k))
            if not np.isfinite(mi):
                raise ValueError(f"non-finite mutual information for classes ({i}, {k})")
            graph.add_edge(i, k, weight=round(mi, 12))
    tree = nx.maximum_spanning_tree(graph, algorithm="kruskal")
    return sorted((min(u, v), max(u, v)) for u, v in tree.edges())


def tree_potentials(joint: np.ndarray) -> Tuple[TreeEdge, ...]:
    return tuple(
        TreeEdge(i=i, k=k, log_table=pointwise_table(presence_table(joint, i, k))) for i, k in chow_liu_tree(joint)
    )


def scene_class_from_counts(
    presence: np.ndarray, scenes: np.ndarray, n_scenes: int, alpha: float = ALPHA
) -> np.ndarray:
    """q(k present | s) = (n_{s,k} + alpha) / (N_s + 2 alpha)."""
    table = np.zeros((n_scenes, presence.shape[1]))
    for s in range(n_scenes):
        rows = presence[scenes == s]
        table[s] = (rows.sum(axis=0) + alpha) / (rows.shape[0] + 2 * alpha)
    return table


def scene_class_from_preferences(prefs: np.ndarray, presence: np.ndarray, scenes: np.ndarray) -> np.ndarray:
    """Scale per-scene preference distributions by the mean class count of that scene's training images."""
    prefs = np.asarray(prefs, dtype=float)
    totals = prefs.sum(axis=1, keepdims=True)
    if (totals <= 0).any():
        raise ValueError("every scene needs preference answers")
    cond = prefs / totals
    overall = presence.sum(axis=1).mean() if presence.size else 1.0
    scale = np.array(
        [presence[scenes == s].sum(axis=1).mean() if (scenes == s).any() else overall for s in range(prefs.shape[0])]
    )
    return np.clip(cond * scale[:, None], EPS, 1.0 - EPS)


def training_stats(
    train: Sequence[SceneInstance],
    ls: LabelSpace,
    class_preferences: Optional[np.ndarray] = None,
    scene_preferences: Optional[np.ndarray] = None,
) -> TrainingStats:
    if not train:
        raise DataError("training split is empty")
    presence = presence_matrix(train, ls.C)
    scenes = np.array([inst.gt_scene if inst.gt_scene is not None else -1 for inst in train])
    marginals, joint = cooccurrence_from_presence(presence)

    human_tree = None
    if class_preferences is not None:
        answers = PairPreferenceAnswers(counts=class_preferences, marginals=marginals)
        human_tree = tree_potentials(cooccurrence_from_preferences(answers))
    human_scene_class = None
    if scene_preferences is not None:
        human_scene_class = scene_class_from_preferences(scene_preferences, presence, scenes)

    return TrainingStats(
        marginals=marginals,
        joint=joint,
        machine_tree=tree_potentials(joint),
        human_tree=human_tree,
        machine_scene_class=scene_class_from_counts(presence, scenes, ls.C_l),
        human_scene_class=human_scene_class,
    )


# --------------------------------------------------------------------------
# Ground truth
# --------------------------------------------------------------------------


def one_hot_rows(labels: Sequence[int], n: int) -> np.ndarray:
    """One-hot rows; VOID labels give uniform rows."""
    labels = np.asarray(labels, dtype=np.int64)
    table = np.full((labels.size, n), 1.0 / n)
    known = labels >= 0
    table[known] = 0.0
    table[np.flatnonzero(known), labels[known]] = 1.0
    return table


def gt_detections(
    inst: SceneInstance, ls: LabelSpace, masks: Optional[MaskLibrary] = None
) -> Tuple[DetectionCandidate, ...]:
    """GT boxes of detector classes as candidates with an infinite score (sigma = 1)."""
    candidates = []
    for gt in inst.gt_boxes:
        if gt.class_id not in ls.detector_classes:
            continue
        component = 0
        if masks is not None and masks.has_class(gt.class_id):
            component = masks.pick_component(gt.class_id, gt.box)
        candidates.append(
            DetectionCandidate(class_id=gt.class_id, score=float("inf"), box=gt.box, component_id=component)
        )
    return tuple(candidates)


def gt_shape_masks(inst: SceneInstance, detections: Sequence[DetectionCandidate]) -> Tuple[np.ndarray, ...]:
    """Binary masks of the GT pixels of each candidate's class inside its box."""
    labels = inst.gt_pixel_labels.reshape(inst.grid)  # type: ignore[union-attr]
    return tuple((crop(labels, d.box) == d.class_id).astype(float) for d in detections)


def gt_potentials(inst: SceneInstance, ls: LabelSpace, masks: Optional[MaskLibrary] = None) -> PotentialBundle:
    """Every GT-resolvable component built from the instance's annotation."""
    if not inst.has_gt():
        raise DataError("GT potentials need GT labels and scene", instance_id=inst.id)
    detections = gt_detections(inst, ls, masks)
    gt_components = ("seg_unary", "supseg_unary", "class_unary", "detection", "shape", "scene_unary")
    sources = {name: Source.GT for name in gt_components}
    return PotentialBundle(
        n_classes=ls.C,
        n_scenes=ls.C_l,
        sources=sources,
        seg_unary=one_hot_rows([s.gt_label for s in inst.segments], ls.C),
        supseg_unary=one_hot_rows([s.gt_label for s in inst.supersegments], ls.C),
        class_unary=class_presence(inst, ls.C).astype(float),
        detections=detections,
        shape_masks=gt_shape_masks(inst, detections),
        scene_unary=one_hot_rows([inst.gt_scene], ls.C_l)[0],  # type: ignore[list-item]
    )


# --------------------------------------------------------------------------
# Machine shape priors
# --------------------------------------------------------------------------


def machine_shape_masks(
    inst: SceneInstance, detections: Sequence[DetectionCandidate], stores: ProviderStores, variant: str
) -> Tuple[np.ndarray, ...]:
    masks = []
    edge_grid = stores.edges.get(inst.id)
    for det in detections:
        if variant == "naive":
            masks.append(naive_box_mask(det.box, inst).astype(float))
            continue
        if not stores.masks.has_class(det.class_id):
            logger.warning(f"Instance {inst.id}: no training masks for class {det.class_id}, using the box prior")
            masks.append(naive_box_mask(det.box, inst).astype(float))
            continue
        if variant == "detector":
            masks.append(to_box(stores.masks.component_mask(det.class_id, det.component_id), det.box, binary=False))
            continue
        if edge_grid is None:
            raise UnresolvableComponentError(f"instance {inst.id}: distance-transform prior needs an edge map")
        candidates = [to_box(m, det.box) for m in stores.masks.training[det.class_id]]
        candidates = [m for m in candidates if boundary(m).any()]
        if not candidates:
            masks.append(np.ones((det.box[3] - det.box[1], det.box[2] - det.box[0])))
            continue
        chosen = distance_transform_select(crop(edge_grid.reshape(inst.grid), det.box), candidates)
        masks.append(chosen.mask.astype(float))
    return tuple(masks)


# --------------------------------------------------------------------------
# Assembly
# --------------------------------------------------------------------------


def _unresolvable(inst: SceneInstance, component: str, source: Source, why: str = "") -> UnresolvableComponentError:
    detail = f" ({why})" if why else ""
    return UnresolvableComponentError(f"instance {inst.id}: cannot resolve {component} from {source.value}{detail}")


def _segment_table(
    inst: SceneInstance, component: str, source: Source, cfg: ExperimentConfig, stores: ProviderStores
) -> np.ndarray:
    C = stores.label_space.C
    if source is Source.MACHINE:
        record = stores.machine.get(inst.id)
        if record is None:
            raise _unresolvable(inst, component, source, "no machine potentials")
        table = np.array(record.seg_unary, dtype=float)
        if cfg.small_segment_uniform:
            small = np.array([s.area < cfg.min_area for s in inst.segments])
            table[small] = 1.0 / C
        return table
    votes = stores.votes.get(inst.id)
    if votes is None:
        raise _unresolvable(inst, component, source, "no votes")
    return np.array(
        [human_unary_from_votes(votes.segments[i], cfg.min_area, seg.area) for i, seg in enumerate(inst.segments)]
    )


def _supseg_table(inst: SceneInstance, source: Source, cfg: ExperimentConfig, stores: ProviderStores) -> np.ndarray:
    if source is Source.MACHINE:
        record = stores.machine.get(inst.id)
        if record is None:
            raise _unresolvable(inst, "supseg_unary", source, "no machine potentials")
        return np.array(record.supseg_unary, dtype=float)
    votes = stores.votes.get(inst.id)
    if votes is None:
        raise _unresolvable(inst, "supseg_unary", source, "no votes")
    areas = inst.supersegment_areas()
    return np.array(
        [human_unary_from_votes(votes.supersegments[j], cfg.min_area, int(areas[j])) for j in range(len(areas))]
    )


def _scene_table(inst: SceneInstance, source: Source, stores: ProviderStores) -> np.ndarray:
    if source is Source.MACHINE:
        record = stores.machine.get(inst.id)
        if record is None:
            raise _unresolvable(inst, "scene_unary", source, "no machine potentials")
        return np.array(record.scene_unary, dtype=float)
    votes = stores.votes.get(inst.id)
    if votes is None:
        raise _unresolvable(inst, "scene_unary", source, "no votes")
    return human_unary_from_votes(votes.scene, 0, 1)


def assemble_bundle(inst: SceneInstance, cfg: ExperimentConfig, stores: ProviderStores) -> PotentialBundle:
    """Route every component to its configured source.

    Args:
        inst: Instance the tables are for
        cfg: Per-component sources and options
        stores: Provider data with training statistics

    Returns:
        Bundle whose `sources` equal the configuration (shape is removed along with detection)

    Raises:
        UnresolvableComponentError: A non-removed component cannot be built from its store
    """
    ls = stores.label_space
    comps = cfg.components
    sources: Dict[str, Source] = {}
    for name, allowed in RESOLVABLE.items():
        source = getattr(comps, name)
        if source not in allowed:
            raise _unresolvable(inst, name, source)
        sources[name] = source
    if sources["detection"] is Source.REMOVE:
        sources["shape"] = Source.REMOVE
    stats = stores.stats
    if stats is None:
        raise UnresolvableComponentError("provider stores have no training statistics")

    gt: Optional[PotentialBundle] = None
    gt_components = [name for name, source in sources.items() if source is Source.GT]
    if gt_components:
        try:
            gt = gt_potentials(inst, ls, stores.masks)
        except DataError as e:
            raise _unresolvable(inst, gt_components[0], Source.GT, "no GT labels or scene") from e

    tables: Dict[str, object] = {}
    for name in ("seg_unary", "seg_unary_aux", "supseg_unary", "class_unary", "scene_unary"):
        if sources[name] is Source.GT:
            tables[name] = getattr(gt, "seg_unary" if name == "seg_unary_aux" else name)
    for name in ("seg_unary", "seg_unary_aux"):
        if sources[name] in (Source.MACHINE, Source.HUMAN):
            tables[name] = _segment_table(inst, name, sources[name], cfg, stores)
    if sources["supseg_unary"] in (Source.MACHINE, Source.HUMAN):
        tables["supseg_unary"] = _supseg_table(inst, sources["supseg_unary"], cfg, stores)
    if sources["scene_unary"] in (Source.MACHINE, Source.HUMAN):
        tables["scene_unary"] = _scene_table(inst, sources["scene_unary"], stores)
    if sources["class_unary"] is Source.MACHINE:
        tables["class_unary"] = stats.marginals.copy()

    if sources["class_tree"] is Source.MACHINE:
        tables["class_tree"] = stats.machine_tree
    elif sources["class_tree"] is Source.HUMAN:
        if stats.human_tree is None:
            raise _unresolvable(inst, "class_tree", Source.HUMAN, "no preference answers")
        tables["class_tree"] = stats.human_tree

    if sources["scene_class"] is Source.MACHINE:
        tables["scene_class"] = stats.machine_scene_class
    elif sources["scene_class"] is Source.HUMAN:
        if stats.human_scene_class is None:
            raise _unresolvable(inst, "scene_class", Source.HUMAN, "no scene preference answers")
        tables["scene_class"] = stats.human_scene_class

    detections: Optional[Tuple[DetectionCandidate, ...]] = None
    if sources["detection"] is Source.MACHINE:
        detections = inst.detections
    elif sources["detection"] is Source.HUMAN:
        detections = gt_detections(inst, ls, stores.masks)
    elif sources["detection"] is Source.GT:
        detections = gt.detections  # type: ignore[union-attr]

    shape_masks = None
    if detections is not None and sources["shape"] is Source.MACHINE:
        shape_masks = machine_shape_masks(inst, detections, stores, cfg.shape_prior)
    elif detections is not None and sources["shape"] is Source.GT:
        if sources["detection"] is Source.GT:
            shape_masks = gt.shape_masks  # type: ignore[union-attr]
        else:
            shape_masks = gt_shape_masks(inst, detections)

    logger.debug(
        f"Bundle for {inst.id}: {len(tables)} tables, {0 if detections is None else len(detections)} detections, "
        f"pn={sources['pn'] is Source.MACHINE}"
    )
    return PotentialBundle(
        n_classes=ls.C,
        n_scenes=ls.C_l,
        sources=sources,
        pn=sources["pn"] is Source.MACHINE,
        detections=detections,
        shape_masks=shape_masks,
        **tables,  # type: ignore[arg-type]
    )


def check_rows(table: np.ndarray, atol: float = 1e-9) -> bool:
    """True when every row of a distribution table sums to 1."""
    table = np.atleast_2d(table)
    return bool(np.allclose(table.sum(axis=1), 1.0, atol=atol))

