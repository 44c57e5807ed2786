"""Synthetic scenes and provider stores with contextual (machine-like) and visual (human-like) confusions."""

from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from hscrf.services.dataset import (
    VOID,
    Dataset,
    DetectionCandidate,
    GTBox,
    LabelSpace,
    SceneInstance,
    Segment,
    SuperSegment,
    dataset_summary,
    majority_label,
    save_dataset,
    write_json,
)
from hscrf.services.metrics import symmetric_kl_rows
from hscrf.services.potentials import InstanceVotes, MachineRecord, ProviderStores
from hscrf.services.shape_priors import MaskLibrary, MaskRecord, crop
from hscrf.utils.config import ChannelSpec, GeneratorConfig
from hscrf.utils.errors import ConfigError
from hscrf.utils.logger import get_logger
from hscrf.utils.session import RunSession, derive_rng

logger = get_logger(__name__)

MIN_CONCENTRATION = 0.05


@dataclass(frozen=True, eq=False)
class ConfusionChannel:
    """Per-class confusion rows plus the strength with which they are mixed in."""

    kind: str
    strength: float
    matrix: np.ndarray
    spread: float = 0.0


@dataclass(frozen=True, eq=False)
class GeneratedInstance:
    instance: SceneInstance
    machine: MachineRecord
    votes: InstanceVotes
    edges: np.ndarray
    masks: Tuple[MaskRecord, ...]


@dataclass
class SynthOutput:
    dataset: Dataset
    stores: ProviderStores
    mask_records: List[MaskRecord] = field(default_factory=list)
    report: Dict[str, Any] = field(default_factory=dict)


# --------------------------------------------------------------------------
# Channels
# --------------------------------------------------------------------------


def channel_matrix(kind: str, cfg: GeneratorConfig) -> np.ndarray:
    """Row-stochastic confusion rows: adjacency affinities (contextual) or similarity groups (visual).

    Classes with nothing to be confused with get a one-hot row on themselves.
    """
    C = len(cfg.classes)
    index = {name: i for i, name in enumerate(cfg.classes)}
    M = np.zeros((C, C))
    if kind == "contextual":
        for a, b, weight in cfg.adjacency:
            M[index[a], index[b]] += weight
            M[index[b], index[a]] += weight
    elif kind == "visual":
        for group in cfg.similarity_groups:
            for a in group:
                for b in group:
                    if a != b:
                        M[index[a], index[b]] = 1.0
    else:
        raise ConfigError(f"unknown channel kind {kind!r}")
    np.fill_diagonal(M, 0.0)
    isolated = M.sum(axis=1) == 0
    M[isolated, np.flatnonzero(isolated)] = 1.0
    return M / M.sum(axis=1, keepdims=True)


def make_channel(spec: ChannelSpec, cfg: GeneratorConfig) -> ConfusionChannel:
    return ConfusionChannel(spec.kind, spec.strength, channel_matrix(spec.kind, cfg), spec.spread)


def apply_channel(
    label: int,
    ch: ConfusionChannel,
    rng: np.random.Generator,
    strength: Optional[float] = None,
    alpha: float = 50.0,
) -> np.ndarray:
    """Mix a one-hot row with the channel row, then jitter with a Dirichlet draw on the support.

    Args:
        label: GT class (VOID gives a uniform row)
        ch: Confusion channel
        rng: Random stream
        strength: Mixing weight; defaults to the channel's strength
        alpha: Dirichlet concentration scale

    Returns:
        Distribution over classes summing to 1
    """
    C = ch.matrix.shape[0]
    if label < 0:
        return np.full(C, 1.0 / C)
    s = ch.strength if strength is None else strength
    p = (1.0 - s) * np.eye(C)[label] + s * ch.matrix[label]
    support = np.flatnonzero(p > 0)
    out = np.zeros(C)
    if support.size == 1:
        out[support] = 1.0
        return out
    draw = rng.dirichlet(np.maximum(alpha * p[support], MIN_CONCENTRATION))
    out[support] = draw
    return out / out.sum()


def synth_votes(distribution: np.ndarray, rng: np.random.Generator, n_subjects: int = 10) -> np.ndarray:
    """Multinomial vote counts of `n_subjects` subjects."""
    p = np.asarray(distribution, dtype=float)
    return rng.multinomial(n_subjects, p / p.sum())


def _hardness(rng: np.random.Generator, mean: float, concentration: float) -> float:
    if mean <= 0.0 or mean >= 1.0:
        return float(min(max(mean, 0.0), 1.0))
    return float(rng.beta(mean * concentration, (1.0 - mean) * concentration))


def _spread(rng: np.random.Generator, base: float, ch: ConfusionChannel) -> float:
    if ch.strength == 0.0:
        return 0.0
    return float(np.clip(base + rng.normal(0.0, ch.spread), 0.0, 1.0))


# --------------------------------------------------------------------------
# Layout
# --------------------------------------------------------------------------


def _guillotine(rect: Tuple[int, int, int, int], n: int, rng: np.random.Generator) -> List[Tuple[int, int, int, int]]:
    """Split a rectangle (r0, c0, r1, c1) into up to n regions by repeatedly cutting the largest one."""
    regions = [rect]
    while len(regions) < n:
        areas = [(r1 - r0) * (c1 - c0) for r0, c0, r1, c1 in regions]
        i = int(np.argmax(areas))
        r0, c0, r1, c1 = regions[i]
        h, w = r1 - r0, c1 - c0
        if max(h, w) < 8:
            break
        frac = rng.uniform(0.35, 0.65)
        if w >= h:
            cut = c0 + int(round(w * frac))
            pieces = [(r0, c0, r1, cut), (r0, cut, r1, c1)]
        else:
            cut = r0 + int(round(h * frac))
            pieces = [(r0, c0, cut, c1), (cut, c0, r1, c1)]
        regions[i : i + 1] = pieces
    return regions


def _blob(shape: Tuple[int, int], center: Tuple[float, float], component: int, rng: np.random.Generator) -> np.ndarray:
    """Thing silhouette: a wide ellipse (component 0) or a tall ellipse with a head bump (component 1)."""
    rows, cols = np.mgrid[0 : shape[0], 0 : shape[1]]
    cy, cx = center
    if component == 0:
        ry, rx = rng.uniform(3.0, 5.0), rng.uniform(6.0, 9.0)
        return ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
    ry, rx = rng.uniform(4.5, 6.5), rng.uniform(3.0, 4.5)
    body = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
    head = (rows - (cy - ry)) ** 2 + (cols - (cx + 0.6 * rx)) ** 2 <= 2.2**2
    return body | head


def _shifted(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(mask)
    rows, cols = np.nonzero(mask)
    rows, cols = rows + dy, cols + dx
    keep = (rows >= 0) & (rows < mask.shape[0]) & (cols >= 0) & (cols < mask.shape[1])
    out[rows[keep], cols[keep]] = True
    return out


def _regions(label_map: np.ndarray, block: int) -> List[np.ndarray]:
    """Connected components of (block, label) cells, ordered by their first row-major pixel."""
    H, W = label_map.shape
    n_block_cols = -(-W // block)
    rows, cols = np.mgrid[0:H, 0:W]
    key = ((rows // block) * n_block_cols + cols // block) * (int(label_map.max()) + 2) + (label_map + 1)
    regions = []
    for value in np.unique(key):
        components, n = ndimage.label(key == value)
        for c in range(1, n + 1):
            regions.append(np.flatnonzero(components.ravel() == c))
    regions.sort(key=lambda pixels: int(pixels[0]))
    return regions


def _boxes(label_map: np.ndarray, class_id: int) -> List[Tuple[Tuple[int, int, int, int], np.ndarray]]:
    components, n = ndimage.label(label_map == class_id)
    out = []
    for c, slices in enumerate(ndimage.find_objects(components), start=1):
        if slices is None:
            continue
        rs, cs = slices
        out.append(((cs.start, rs.start, cs.stop, rs.stop), components == c))
    return out


# --------------------------------------------------------------------------
# One instance
# --------------------------------------------------------------------------


def _generate_instance(cfg: GeneratorConfig, job: Tuple[str, int]) -> GeneratedInstance:
    split, index = job
    inst_id = f"{split}-{index:04d}"
    rng = derive_rng(cfg.seed, inst_id)
    H, W = cfg.height, cfg.width
    C = len(cfg.classes)
    names = {name: i for i, name in enumerate(cfg.classes)}
    things = {names[t] for t in cfg.things}
    stuff = [k for k in range(C) if k not in things]

    scene = int(rng.integers(len(cfg.scene_types)))
    probs = cfg.scene_presence[cfg.scene_types[scene]]
    draws = rng.random(C)
    present = [k for k in range(C) if draws[k] < probs.get(cfg.classes[k], 0.0)]
    present_stuff = [k for k in stuff if k in present]
    if not present_stuff:
        present_stuff = [max(stuff, key=lambda k: (probs.get(cfg.classes[k], 0.0), -k))]

    band = names.get(cfg.band_class) if cfg.band_class else None
    band = band if band in present_stuff else None
    ground = [k for k in present_stuff if k != band]

    stuff_map = np.zeros((H, W), dtype=np.int64)
    ground_rect = (0, 0, H, W)
    if band is not None:
        if ground:
            band_rows = int(round(H * rng.uniform(0.25, 0.4)))
            stuff_map[:band_rows] = band
            ground_rect = (band_rows, 0, H, W)
        else:
            stuff_map[:] = band
    if ground:
        order = rng.permutation(ground)
        for (r0, c0, r1, c1), k in zip(_guillotine(ground_rect, len(ground), rng), order):
            stuff_map[r0:r1, c0:c1] = k

    labels = stuff_map.copy()
    objects: List[Tuple[int, int, np.ndarray]] = []
    for t in sorted(k for k in present if k in things):
        host_name = cfg.hosts.get(cfg.classes[t])
        host = names[host_name] if host_name else -1
        if not (stuff_map == host).any():
            counts = np.bincount(stuff_map.ravel(), minlength=C)
            host = int(np.argmax(counts))
        candidates = np.argwhere(stuff_map == host)
        cy, cx = candidates[rng.integers(len(candidates))]
        component = int(rng.integers(cfg.n_components))
        blob = _blob((H, W), (float(cy), float(cx)), component, rng)
        if blob.any():
            labels[blob] = t
            objects.append((t, component, blob))

    seg_map = stuff_map.copy()
    for t, _, blob in objects:
        dy, dx = rng.integers(-cfg.seg_jitter, cfg.seg_jitter + 1, size=2)
        seg_map[_shifted(blob, int(dy), int(dx))] = t

    gt = labels.copy()
    if cfg.void_border:
        b = cfg.void_border
        gt[:b, :] = VOID
        gt[-b:, :] = VOID
        gt[:, :b] = VOID
        gt[:, -b:] = VOID
    gt_flat = gt.ravel()

    seg_pixels = _regions(seg_map, cfg.segment_block)
    sup_pixels = _regions(seg_map, cfg.supersegment_block)
    sup_owner = np.empty(H * W, dtype=np.int64)
    for j, pixels in enumerate(sup_pixels):
        sup_owner[pixels] = j
    segments = tuple(Segment(pixels=p, gt_label=majority_label(gt_flat[p], C)) for p in seg_pixels)
    supersegments = tuple(SuperSegment(gt_label=majority_label(gt_flat[p], C)) for p in sup_pixels)
    seg_parent = {i: int(sup_owner[p[0]]) for i, p in enumerate(seg_pixels)}

    gt_boxes: List[GTBox] = []
    masks: List[MaskRecord] = []
    true_component: List[int] = []
    for t in sorted(things):
        for box, region in _boxes(gt, t):
            overlaps = [int((blob & region).sum()) if k == t else -1 for k, _, blob in objects]
            component = objects[int(np.argmax(overlaps))][1] if overlaps and max(overlaps) > 0 else 0
            gt_boxes.append(GTBox(class_id=t, box=box))
            true_component.append(component)
            if split == "train":
                masks.append(MaskRecord(class_id=t, component=component, mask=crop(gt == t, box).copy()))

    detections: List[DetectionCandidate] = []
    for gt_box, component in zip(gt_boxes, true_component):
        if rng.random() < cfg.miss_rate:
            continue
        jitter = rng.integers(-cfg.box_jitter, cfg.box_jitter + 1, size=4)
        x0, y0, x1, y1 = gt_box.box
        x0 = int(np.clip(x0 + jitter[0], 0, W - 1))
        y0 = int(np.clip(y0 + jitter[1], 0, H - 1))
        x1 = int(np.clip(x1 + jitter[2], x0 + 1, W))
        y1 = int(np.clip(y1 + jitter[3], y0 + 1, H))
        if cfg.n_components > 1 and rng.random() < cfg.component_error:
            component = (component + int(rng.integers(1, cfg.n_components))) % cfg.n_components
        score = float(rng.normal(cfg.tp_score_mean, cfg.score_sd))
        detections.append(DetectionCandidate(gt_box.class_id, score, (x0, y0, x1, y1), component))
    detector_classes = sorted(things)
    for _ in range(int(rng.poisson(cfg.false_positive_rate))):
        c = int(detector_classes[rng.integers(len(detector_classes))])
        bw, bh = min(int(rng.integers(6, 17)), W), min(int(rng.integers(5, 13)), H)
        x0, y0 = int(rng.integers(0, W - bw + 1)), int(rng.integers(0, H - bh + 1))
        component = int(rng.integers(cfg.n_components))
        score = float(rng.normal(cfg.fp_score_mean, cfg.score_sd))
        detections.append(DetectionCandidate(c, score, (x0, y0, x0 + bw, y0 + bh), component))

    edges = np.zeros((H, W), dtype=bool)
    edges[:, :-1] |= seg_map[:, :-1] != seg_map[:, 1:]
    edges[:-1, :] |= seg_map[:-1, :] != seg_map[1:, :]
    edges |= rng.random((H, W)) < cfg.edge_noise

    machine_ch = make_channel(cfg.machine_channel, cfg)
    human_ch = make_channel(cfg.human_channel, cfg)
    kappa, alpha, n_subjects = cfg.hardness_concentration, cfg.jitter_alpha, cfg.n_subjects

    # Contextual mistakes share hardness within a super-segment; visual ones vary per segment.
    sup_hardness = [_hardness(rng, machine_ch.strength, kappa) for _ in supersegments]
    machine_sup = [
        apply_channel(s.gt_label, machine_ch, rng, sup_hardness[j], alpha) for j, s in enumerate(supersegments)
    ]
    machine_seg = []
    for i, s in enumerate(segments):
        h = _spread(rng, sup_hardness[seg_parent[i]], machine_ch)
        machine_seg.append(apply_channel(s.gt_label, machine_ch, rng, h, alpha))
    human_seg = []
    for s in segments:
        h = _spread(rng, _hardness(rng, human_ch.strength, kappa), human_ch)
        human_seg.append(synth_votes(apply_channel(s.gt_label, human_ch, rng, h, alpha), rng, n_subjects))
    human_sup = []
    for s in supersegments:
        h = _hardness(rng, human_ch.strength, kappa)
        human_sup.append(synth_votes(apply_channel(s.gt_label, human_ch, rng, h, alpha), rng, n_subjects))

    scene_ch = ConfusionChannel("scene", 0.0, _uniform_off_diagonal(len(cfg.scene_types)))
    machine_scene = apply_channel(scene, scene_ch, rng, cfg.scene_noise_machine, alpha)
    human_scene = synth_votes(apply_channel(scene, scene_ch, rng, cfg.scene_noise_human, alpha), rng, n_subjects)

    instance = SceneInstance(
        id=inst_id,
        height=H,
        width=W,
        segments=segments,
        supersegments=supersegments,
        seg_parent=seg_parent,
        detections=tuple(detections),
        gt_pixel_labels=gt_flat,
        gt_boxes=tuple(gt_boxes),
        gt_scene=scene,
        split=split,
    )
    return GeneratedInstance(
        instance=instance,
        machine=MachineRecord(
            seg_unary=np.array(machine_seg), supseg_unary=np.array(machine_sup), scene_unary=machine_scene
        ),
        votes=InstanceVotes(
            segments=np.array(human_seg, dtype=float).reshape(len(segments), -1),
            supersegments=np.array(human_sup, dtype=float).reshape(len(supersegments), -1),
            scene=human_scene.astype(float),
        ),
        edges=edges,
        masks=tuple(masks),
    )


def _uniform_off_diagonal(n: int) -> np.ndarray:
    if n == 1:
        return np.ones((1, 1))
    M = np.full((n, n), 1.0 / (n - 1))
    np.fill_diagonal(M, 0.0)
    return M


# --------------------------------------------------------------------------
# Preferences
# --------------------------------------------------------------------------


def true_conditionals(cfg: GeneratorConfig) -> np.ndarray:
    """P(z_j | z_i) under independent per-scene presence with uniformly drawn scenes."""
    C = len(cfg.classes)
    p = np.array([[cfg.scene_presence[s].get(name, 0.0) for name in cfg.classes] for s in cfg.scene_types])
    joint = p.T @ p
    anchor = p.sum(axis=0)
    cond = np.divide(joint, anchor[:, None], out=np.zeros((C, C)), where=anchor[:, None] > 0)
    np.fill_diagonal(cond, 0.0)
    return cond


def _answer(rng: np.random.Generator, scores: np.ndarray, j: int, k: int, noise: float) -> int:
    if scores[j] == scores[k]:
        winner = j if rng.random() < 0.5 else k
    else:
        winner = j if scores[j] > scores[k] else k
    if rng.random() < noise:
        winner = k if winner == j else j
    return winner


def synth_preferences(cfg: GeneratorConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Aggregated pairwise counts from simulated "which pair is more likely together" questions.

    Each class answer increments both n(i -> j) and n(j -> i) for the chosen pair.
    """
    rng = derive_rng(cfg.seed, "preferences")
    C, C_l = len(cfg.classes), len(cfg.scene_types)
    cond = true_conditionals(cfg)
    questions = cfg.preference_subjects * (C - 1)

    class_counts = np.zeros((C, C))
    for i in range(C):
        others = np.array([k for k in range(C) if k != i])
        for _ in range(questions):
            j, k = rng.choice(others, size=2, replace=False) if others.size > 1 else (others[0], others[0])
            winner = _answer(rng, cond[i], int(j), int(k), cfg.preference_noise)
            class_counts[i, winner] += 1
            class_counts[winner, i] += 1

    scene_counts = np.zeros((C_l, C))
    everything = np.arange(C)
    for s, name in enumerate(cfg.scene_types):
        presence = np.array([cfg.scene_presence[name].get(c, 0.0) for c in cfg.classes])
        for _ in range(questions):
            j, k = rng.choice(everything, size=2, replace=False)
            scene_counts[s, _answer(rng, presence, int(j), int(k), cfg.preference_noise)] += 1
    return class_counts, scene_counts


# --------------------------------------------------------------------------
# Dataset
# --------------------------------------------------------------------------


def _argmax_confusion(
    tables: Sequence[np.ndarray], labels: Sequence[int], weights: Sequence[int], C: int
) -> np.ndarray:
    cm = np.zeros((C, C))
    for row, label, w in zip(tables, labels, weights):
        if label >= 0:
            cm[label, int(np.argmax(row))] += w
    return cm


def _channel_report(spec: ChannelSpec, cfg: GeneratorConfig) -> Dict[str, Any]:
    matrix = channel_matrix(spec.kind, cfg)
    return {"kind": spec.kind, "strength": spec.strength, "spread": spec.spread, "matrix": matrix}


def generate_dataset(cfg: GeneratorConfig, session: Optional[RunSession] = None) -> SynthOutput:
    """Generate a full synthetic dataset with machine, vote, preference, mask and edge stores.

    Output depends only on the configuration (per-instance streams are derived
    from the seed and the instance id, so generation order does not matter).
    """
    session = session or RunSession(seed=cfg.seed)
    logger.info(f"Generating {cfg.n_train} train and {cfg.n_test} test scenes (seed {cfg.seed})")
    jobs = [("train", i) for i in range(cfg.n_train)] + [("test", i) for i in range(cfg.n_test)]
    generated = session.parallel_map(partial(_generate_instance, cfg), jobs)

    ls = LabelSpace(
        classes=tuple(cfg.classes),
        scene_types=tuple(cfg.scene_types),
        is_thing=tuple(name in cfg.things for name in cfg.classes),
        detector_classes=tuple(sorted(cfg.classes.index(t) for t in cfg.things)),
    )
    instances = [g.instance for g in generated]
    dataset = Dataset(
        label_space=ls,
        train=tuple(i for i in instances if i.split == "train"),
        test=tuple(i for i in instances if i.split == "test"),
    )
    class_counts, scene_counts = synth_preferences(cfg)
    stores = ProviderStores(
        label_space=ls,
        machine={g.instance.id: g.machine for g in generated},
        votes={g.instance.id: g.votes for g in generated},
        class_preferences=class_counts,
        scene_preferences=scene_counts,
        edges={g.instance.id: g.edges for g in generated},
    )
    mask_records = [rec for g in generated for rec in g.masks]

    if dataset.train:
        stores.masks = MaskLibrary.from_records(mask_records, seed=cfg.seed)
        stores.with_stats(dataset.train)

    C = ls.C
    seg_labels = [s.gt_label for g in generated for s in g.instance.segments]
    seg_areas = [s.area for g in generated for s in g.instance.segments]
    machine_cm = _argmax_confusion([r for g in generated for r in g.machine.seg_unary], seg_labels, seg_areas, C)
    human_cm = _argmax_confusion([r for g in generated for r in g.votes.segments], seg_labels, seg_areas, C)
    report = {
        "seed": cfg.seed,
        "summary": dataset_summary(dataset),
        "channels": {
            "machine": _channel_report(cfg.machine_channel, cfg),
            "human": _channel_report(cfg.human_channel, cfg),
        },
        "realized": {"machine_segments": machine_cm, "human_segments": human_cm},
        "symmetric_kl": symmetric_kl_rows(machine_cm, human_cm),
    }
    logger.info(f"Generated {len(instances)} scenes; machine/human confusion distance {report['symmetric_kl']:.3f}")
    return SynthOutput(dataset=dataset, stores=stores, mask_records=mask_records, report=report)


def write_synth(output: SynthOutput, path: Path) -> None:
    root = Path(path)
    save_dataset(output.dataset, root)
    output.stores.save(root, output.mask_records)
    write_json(root / "gen-report.json", output.report)
    logger.info(f"Wrote synthetic dataset to {root}")
