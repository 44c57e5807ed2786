"""Shape priors for detection boxes, oracle selectors, GT snapping and mask accuracy."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from sklearn.cluster import KMeans

from hscrf.services.dataset import (
    Box,
    LabelSpace,
    SceneInstance,
    box_contains,
    decode_rle,
    encode_rle,
    read_json,
    write_json,
)
from hscrf.utils.errors import DataError
from hscrf.utils.logger import get_logger

logger = get_logger(__name__)

RASTER = (10, 10)
_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


# --------------------------------------------------------------------------
# Rasters
# --------------------------------------------------------------------------


def _area_weights(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic matrix averaging input cells into output cells by overlap length."""
    edges_out = np.arange(n_out + 1) * (n_in / n_out)
    lo = np.maximum(edges_out[:-1, None], np.arange(n_in)[None, :])
    hi = np.minimum(edges_out[1:, None], np.arange(1, n_in + 1)[None, :])
    overlap = np.clip(hi - lo, 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def resample_mask(mask: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Exact area-mean resampling of a 2-D mask to `shape` (works both up and down)."""
    mask = np.asarray(mask, dtype=float)
    if mask.ndim != 2 or mask.size == 0:
        raise ValueError(f"expected a non-empty 2-D mask, got shape {mask.shape}")
    rows = _area_weights(shape[0], mask.shape[0])
    cols = _area_weights(shape[1], mask.shape[1])
    return rows @ mask @ cols.T


def to_raster(mask: np.ndarray) -> np.ndarray:
    return resample_mask(mask, RASTER)


def to_box(mask: np.ndarray, box: Box, binary: bool = True) -> np.ndarray:
    """Stretch a raster mask over a box; binarized at 0.5 unless `binary` is False."""
    x0, y0, x1, y1 = box
    soft = resample_mask(mask, (y1 - y0, x1 - x0))
    return soft >= 0.5 if binary else soft


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground cells 4-adjacent to a background cell (outside the raster counts as background)."""
    fg = np.asarray(mask, dtype=bool)
    return fg & ~ndimage.binary_erosion(fg, structure=_FOUR_CONNECTED, border_value=0)


# --------------------------------------------------------------------------
# Priors
# --------------------------------------------------------------------------


def average_component_mask(masks: Sequence[np.ndarray]) -> np.ndarray:
    """Per-cell mean of binary masks already on a common raster."""
    if len(masks) == 0:
        raise ValueError("cannot average an empty mask list")
    stack = np.stack([np.asarray(m, dtype=float) for m in masks])
    return stack.mean(axis=0)


def cluster_masks(masks: Sequence[np.ndarray], K: int, seed: int = 0) -> List[np.ndarray]:
    """K-means over rasterized masks; each cluster is represented by its member closest to the center.

    Args:
        masks: Binary masks of any size (rasterized to 10x10 for clustering)
        K: Number of clusters
        seed: K-means random state

    Returns:
        K representative masks drawn from the input set, in cluster order
    """
    if K <= 0:
        raise ValueError("K must be positive")
    if len(masks) < K:
        raise ValueError(f"need at least K={K} masks, got {len(masks)}")
    if K == len(masks):
        return [np.asarray(m) for m in masks]

    vectors = np.stack([to_raster(m).ravel() for m in masks])
    kmeans = KMeans(n_clusters=K, n_init=10, random_state=seed).fit(vectors)
    representatives = []
    for c in range(K):
        members = np.flatnonzero(kmeans.labels_ == c)
        dists = np.linalg.norm(vectors[members] - kmeans.cluster_centers_[c], axis=1)
        representatives.append(np.asarray(masks[int(members[np.argmin(dists)])]))
    return representatives


class Selection(NamedTuple):
    index: int
    mask: np.ndarray
    score: float


def distance_transform_select(edges: np.ndarray, candidates: Sequence[np.ndarray]) -> Selection:
    """Pick the candidate whose boundary lies closest to the edge map.

    Score is the mean Euclidean distance-transform value over the candidate's
    boundary cells; the lowest score wins, ties to the lowest index. With no
    edge pixels every score is infinite and the first candidate is returned.
    """
    if len(candidates) == 0:
        raise ValueError("no candidate masks")
    edges = np.asarray(edges, dtype=bool)
    if edges.any():
        dist = ndimage.distance_transform_edt(~edges)
    else:
        dist = np.full(edges.shape, np.inf)

    scores = []
    for i, cand in enumerate(candidates):
        cand = np.asarray(cand, dtype=bool)
        if cand.shape != edges.shape:
            raise ValueError(f"candidate {i} shape {cand.shape} != edge map shape {edges.shape}")
        cells = boundary(cand)
        if not cells.any():
            raise ValueError(f"candidate {i} has an empty boundary")
        scores.append(float(dist[cells].mean()))
    best = int(np.argmin(scores))
    return Selection(best, np.asarray(candidates[best], dtype=bool), scores[best])


def naive_box_prior(box: Box, inst: SceneInstance) -> np.ndarray:
    """1 for segments lying entirely inside the box (border pixels count as inside), else 0."""
    flags = np.zeros(len(inst.segments), dtype=np.int64)
    for i, seg in enumerate(inst.segments):
        rows, cols = np.divmod(seg.pixels, inst.width)
        flags[i] = int(box_contains(box, rows, cols).all())
    return flags


def naive_box_mask(box: Box, inst: SceneInstance) -> np.ndarray:
    """Box-sized mask painting the segments selected by the naive prior."""
    inside = np.flatnonzero(naive_box_prior(box, inst))
    grid = np.zeros(inst.n_pixels, dtype=bool)
    for i in inside:
        grid[inst.segments[i].pixels] = True
    return crop(grid.reshape(inst.grid), box)


def snap_mask_to_segments(gt_mask: np.ndarray, segment_ids: np.ndarray) -> np.ndarray:
    """Segment-constant projection of a mask: a segment is on iff strictly more than half its pixels are.

    Args:
        gt_mask: Binary mask over the box
        segment_ids: Same shape, segment index per pixel (negative = no segment)

    Returns:
        Snapped binary mask; pixels without a segment are off
    """
    gt_mask = np.asarray(gt_mask, dtype=bool)
    ids = np.asarray(segment_ids)
    if ids.shape != gt_mask.shape:
        raise ValueError("segment map and mask must share a shape")
    covered = ids >= 0
    if not covered.any():
        return np.zeros_like(gt_mask)
    n = int(ids.max()) + 1
    total = np.bincount(ids[covered], minlength=n)
    fg = np.bincount(ids[covered], weights=gt_mask[covered].astype(float), minlength=n)
    on = 2 * fg > total
    snapped = np.zeros_like(gt_mask)
    snapped[covered] = on[ids[covered]]
    return snapped


# --------------------------------------------------------------------------
# Accuracy
# --------------------------------------------------------------------------


class MaskRates(NamedTuple):
    tpr: float
    tnr: float
    value: float
    degenerate: bool


def mask_rates(pred: np.ndarray, gt: np.ndarray) -> MaskRates:
    """True-positive/true-negative rates and their mean over in-box pixels.

    When the GT mask is all foreground (or all background) only one rate is
    defined; it is returned as the value and the result is flagged degenerate.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if gt.size == 0:
        raise ValueError("empty mask")
    n_fg = int(gt.sum())
    n_bg = gt.size - n_fg
    tpr = float((pred & gt).sum() / n_fg) if n_fg else float("nan")
    tnr = float((~pred & ~gt).sum() / n_bg) if n_bg else float("nan")
    if n_fg and n_bg:
        return MaskRates(tpr, tnr, (tpr + tnr) / 2.0, False)
    return MaskRates(tpr, tnr, tpr if n_fg else tnr, True)


def normalized_mask_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    return mask_rates(pred, gt).value


def pixel_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return float((pred == gt).mean())


def oracle_best(candidates: Sequence[np.ndarray], gt: np.ndarray) -> Tuple[int, float]:
    """Index and accuracy of the most accurate candidate (ties to the lowest index)."""
    if len(candidates) == 0:
        raise ValueError("no candidate masks")
    scores = [normalized_mask_accuracy(c, gt) for c in candidates]
    best = int(np.argmax(scores))
    return best, scores[best]


def crop(grid: np.ndarray, box: Box) -> np.ndarray:
    x0, y0, x1, y1 = box
    return grid[y0:y1, x0:x1]


# --------------------------------------------------------------------------
# Mask library
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MaskRecord:
    class_id: int
    component: int
    mask: np.ndarray  # binary, cropped to the object's box
    source: str = "train"


@dataclass
class MaskLibrary:
    """Training masks per class plus component averages and cluster representatives."""

    training: Dict[int, List[np.ndarray]] = field(default_factory=dict)
    components: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)
    clusters: Dict[int, List[np.ndarray]] = field(default_factory=dict)
    aspects: Dict[Tuple[int, int], float] = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: Sequence[MaskRecord], seed: int = 0) -> "MaskLibrary":
        library = cls()
        grouped: Dict[Tuple[int, int], List[np.ndarray]] = {}
        for rec in records:
            library.training.setdefault(rec.class_id, []).append(np.asarray(rec.mask, dtype=bool))
            grouped.setdefault((rec.class_id, rec.component), []).append(np.asarray(rec.mask, dtype=bool))
        for key in sorted(grouped):
            masks = grouped[key]
            library.components[key] = average_component_mask([to_raster(m) for m in masks])
            library.aspects[key] = float(np.mean([np.log(m.shape[0] / m.shape[1]) for m in masks]))
        for class_id in sorted(library.training):
            K = library.component_count(class_id)
            masks = library.training[class_id]
            library.clusters[class_id] = cluster_masks(masks, min(K, len(masks)), seed=seed)
        logger.debug(
            f"Mask library: {len(records)} masks, {len(library.components)} components, "
            f"{len(library.clusters)} clustered classes"
        )
        return library

    def component_count(self, class_id: int) -> int:
        return sum(1 for c, _ in self.components if c == class_id)

    def has_class(self, class_id: int) -> bool:
        return class_id in self.training

    def component_ids(self, class_id: int) -> List[int]:
        return sorted(k for c, k in self.components if c == class_id)

    def pick_component(self, class_id: int, box: Box) -> int:
        """Component whose mean training aspect ratio is closest to the box's (ties to the lowest id)."""
        ids = self.component_ids(class_id)
        if not ids:
            raise KeyError(f"no masks for class {class_id}")
        x0, y0, x1, y1 = box
        aspect = np.log((y1 - y0) / (x1 - x0))
        gaps = [abs(self.aspects[(class_id, k)] - aspect) for k in ids]
        return ids[int(np.argmin(gaps))]

    def component_mask(self, class_id: int, component: int) -> np.ndarray:
        """Soft average raster for a detector component, falling back to the nearest listed id."""
        key = (class_id, component)
        if key in self.components:
            return self.components[key]
        ids = self.component_ids(class_id)
        if not ids:
            raise KeyError(f"no masks for class {class_id}")
        return self.components[(class_id, min(ids, key=lambda k: (abs(k - component), k)))]


def save_mask_records(records: Sequence[MaskRecord], root: Path, ls: LabelSpace) -> None:
    counters: Dict[int, int] = {}
    for rec in records:
        k = counters.get(rec.class_id, 0)
        counters[rec.class_id] = k + 1
        write_json(
            Path(root) / ls.classes[rec.class_id] / f"{k}.json",
            {
                "component": rec.component,
                "shape": list(rec.mask.shape),
                "rle": encode_rle(rec.mask.astype(np.int64).ravel(), skip=0),
                "source": rec.source,
            },
        )


def load_mask_records(root: Path, ls: LabelSpace) -> List[MaskRecord]:
    records: List[MaskRecord] = []
    root = Path(root)
    if not root.is_dir():
        return records
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if class_dir.name not in ls.classes:
            raise DataError("mask directory names an unknown class", path=str(class_dir))
        files = sorted(class_dir.glob("*.json"), key=lambda p: (len(p.stem), p.stem))
        for file in files:
            data = read_json(file)
            try:
                h, w = (int(v) for v in data["shape"])
                mask = decode_rle(data["rle"], h * w, fill=0).reshape(h, w) != 0
                records.append(
                    MaskRecord(
                        class_id=ls.index(class_dir.name),
                        component=int(data.get("component", 0)),
                        mask=mask,
                        source=str(data.get("source", "train")),
                    )
                )
            except (KeyError, TypeError, ValueError) as e:
                raise DataError(f"malformed mask record: {e!r}", path=str(file)) from e
    return records


# --------------------------------------------------------------------------
# Prior comparison table
# --------------------------------------------------------------------------

SHAPE_ROWS = (
    "Detector",
    "TrainingMask-oracle",
    "Cluster-oracle",
    "Detector-auto",
    "DistTr",
    "Naive",
    "GT-snap",
)


@dataclass(frozen=True)
class ShapeRow:
    prior: str
    normalized: float
    pixel: float
    objects: int


def _candidates_in_box(rasters: Sequence[np.ndarray], box: Box) -> List[np.ndarray]:
    return [to_box(r, box) for r in rasters]


def shape_table(
    instances: Sequence[SceneInstance],
    ls: LabelSpace,
    library: MaskLibrary,
    edges: Optional[Dict[str, np.ndarray]] = None,
) -> List[ShapeRow]:
    """Compare every shape prior on the GT objects of `instances`.

    Each GT box of a detector class is one object; accuracies are averaged
    over objects and computed only from pixels inside the box.
    """
    edges = edges or {}
    normalized: Dict[str, List[float]] = {name: [] for name in SHAPE_ROWS}
    plain: Dict[str, List[float]] = {name: [] for name in SHAPE_ROWS}

    for inst in instances:
        if inst.gt_pixel_labels is None:
            raise DataError("shape comparison needs GT pixel labels", instance_id=inst.id)
        labels = inst.gt_pixel_labels.reshape(inst.grid)
        owner = inst.segment_owner().reshape(inst.grid)
        edge_grid = edges.get(inst.id)
        for gt_box in inst.gt_boxes:
            c, box = gt_box.class_id, gt_box.box
            if c not in ls.detector_classes or not library.has_class(c):
                continue
            gt_mask = crop(labels, box) == c

            chosen: Dict[str, np.ndarray] = {}
            comp_ids = library.component_ids(c)
            comp_masks = _candidates_in_box([library.components[(c, k)] for k in comp_ids], box)
            chosen["Detector"] = comp_masks[oracle_best(comp_masks, gt_mask)[0]]
            train_masks = _candidates_in_box(library.training[c], box)
            chosen["TrainingMask-oracle"] = train_masks[oracle_best(train_masks, gt_mask)[0]]
            cluster_masks_in_box = _candidates_in_box(library.clusters[c], box)
            chosen["Cluster-oracle"] = cluster_masks_in_box[oracle_best(cluster_masks_in_box, gt_mask)[0]]
            chosen["Detector-auto"] = to_box(library.component_mask(c, library.pick_component(c, box)), box)
            usable = [m for m in train_masks if boundary(m).any()]
            if edge_grid is not None and usable:
                chosen["DistTr"] = distance_transform_select(crop(edge_grid.reshape(inst.grid), box), usable).mask
            else:
                chosen["DistTr"] = usable[0] if usable else train_masks[0]
            chosen["Naive"] = naive_box_mask(box, inst)
            chosen["GT-snap"] = snap_mask_to_segments(gt_mask, crop(owner, box))

            for name in SHAPE_ROWS:
                normalized[name].append(normalized_mask_accuracy(chosen[name], gt_mask))
                plain[name].append(pixel_accuracy(chosen[name], gt_mask))

    rows = []
    for name in SHAPE_ROWS:
        n = len(normalized[name])
        rows.append(
            ShapeRow(
                prior=name,
                normalized=float(np.mean(normalized[name])) if n else float("nan"),
                pixel=float(np.mean(plain[name])) if n else float("nan"),
                objects=n,
            )
        )
    logger.info(f"Shape comparison over {rows[0].objects} objects")
    return rows
