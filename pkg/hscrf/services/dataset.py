"""Dataset data model, on-disk format (UTF-8 JSON + run-length encodings) and validation."""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from hscrf.utils.errors import DataError
from hscrf.utils.logger import get_logger

logger = get_logger(__name__)

VOID = -1

Box = Tuple[int, int, int, int]


# --------------------------------------------------------------------------
# Types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelSpace:
    classes: Tuple[str, ...]
    scene_types: Tuple[str, ...]
    is_thing: Tuple[bool, ...]
    detector_classes: Tuple[int, ...]

    @property
    def C(self) -> int:
        return len(self.classes)

    @property
    def C_l(self) -> int:
        return len(self.scene_types)

    def index(self, name: str) -> int:
        return self.classes.index(name)

    def violations(self) -> List[str]:
        problems = []
        if len(set(self.classes)) != len(self.classes):
            problems.append("class names are not unique")
        if self.C < 2:
            problems.append("need at least 2 classes")
        if self.C_l < 1:
            problems.append("need at least 1 scene type")
        if len(self.is_thing) != self.C:
            problems.append("is_thing must have one flag per class")
        if any(not 0 <= k < self.C for k in self.detector_classes):
            problems.append("detector_classes must be a subset of classes")
        return problems

    def to_dict(self) -> Dict[str, Any]:
        return {
            "classes": list(self.classes),
            "scene_types": list(self.scene_types),
            "is_thing": list(self.is_thing),
            "detector_classes": [self.classes[k] for k in self.detector_classes],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LabelSpace":
        classes = tuple(data["classes"])
        detector = []
        for name in data.get("detector_classes", []):
            if name not in classes:
                raise ValueError(f"detector class {name!r} is not a class")
            detector.append(classes.index(name))
        return cls(
            classes=classes,
            scene_types=tuple(data["scene_types"]),
            is_thing=tuple(bool(v) for v in data["is_thing"]),
            detector_classes=tuple(sorted(detector)),
        )


@dataclass(frozen=True, eq=False)
class Segment:
    pixels: np.ndarray  # sorted flat row-major indices
    gt_label: int = VOID

    @property
    def area(self) -> int:
        return int(self.pixels.size)


@dataclass(frozen=True)
class SuperSegment:
    gt_label: int = VOID


@dataclass(frozen=True)
class DetectionCandidate:
    class_id: int
    score: float
    box: Box
    component_id: int = 0

    @property
    def sigma(self) -> float:
        """Logistic of the detector score; +inf (GT surrogate) maps to 1."""
        return float(expit(self.score))


@dataclass(frozen=True)
class GTBox:
    class_id: int
    box: Box


@dataclass(frozen=True, eq=False)
class SceneInstance:
    id: str
    height: int
    width: int
    segments: Tuple[Segment, ...]
    supersegments: Tuple[SuperSegment, ...]
    seg_parent: Mapping[int, int]
    detections: Tuple[DetectionCandidate, ...] = ()
    gt_pixel_labels: Optional[np.ndarray] = None  # flat, VOID = -1
    gt_boxes: Tuple[GTBox, ...] = ()
    gt_scene: Optional[int] = None
    split: str = "train"

    @property
    def grid(self) -> Tuple[int, int]:
        return self.height, self.width

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def parent(self, seg: int) -> int:
        return self.seg_parent[seg]

    def parents(self) -> np.ndarray:
        return np.array([self.seg_parent[i] for i in range(len(self.segments))], dtype=np.int64)

    def has_gt(self) -> bool:
        return self.gt_pixel_labels is not None and self.gt_scene is not None

    def segment_owner(self) -> np.ndarray:
        """Flat map pixel -> segment index (-1 where no segment)."""
        owner = np.full(self.n_pixels, -1, dtype=np.int64)
        for i, seg in enumerate(self.segments):
            owner[seg.pixels] = i
        return owner

    def supersegment_areas(self) -> np.ndarray:
        areas = np.zeros(len(self.supersegments), dtype=np.int64)
        for i, seg in enumerate(self.segments):
            areas[self.seg_parent[i]] += seg.area
        return areas


@dataclass(frozen=True)
class Dataset:
    label_space: LabelSpace
    train: Tuple[SceneInstance, ...]
    test: Tuple[SceneInstance, ...]

    @property
    def instances(self) -> Tuple[SceneInstance, ...]:
        return self.train + self.test

    def by_id(self) -> Dict[str, SceneInstance]:
        return {inst.id: inst for inst in self.instances}


# --------------------------------------------------------------------------
# Geometry and label helpers
# --------------------------------------------------------------------------


def box_area(box: Box) -> int:
    x0, y0, x1, y1 = box
    return max(0, x1 - x0) * max(0, y1 - y0)


def box_iou(a: Box, b: Box) -> float:
    """Intersection over union of two half-open pixel boxes."""
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = box_area(a) + box_area(b) - inter
    return inter / union if union > 0 else 0.0


def box_contains(box: Box, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Per-pixel membership in a box; pixels on the box border count as inside."""
    x0, y0, x1, y1 = box
    return (cols >= x0) & (cols < x1) & (rows >= y0) & (rows < y1)


def majority_label(labels: np.ndarray, n_classes: int) -> int:
    """Most frequent non-VOID label; ties go to the lowest class index."""
    valid = labels[labels >= 0]
    if valid.size == 0:
        return VOID
    return int(np.bincount(valid, minlength=n_classes).argmax())


def class_presence(inst: SceneInstance, n_classes: int) -> np.ndarray:
    if inst.gt_pixel_labels is None:
        raise DataError("instance has no GT pixel labels", instance_id=inst.id)
    labels = inst.gt_pixel_labels[inst.gt_pixel_labels >= 0]
    return np.bincount(labels, minlength=n_classes)[:n_classes] > 0


def paint_segments(inst: SceneInstance, labels: Sequence[int]) -> np.ndarray:
    """Paint one label per segment onto the flat pixel grid (uncovered pixels stay VOID)."""
    painted = np.full(inst.n_pixels, VOID, dtype=np.int64)
    for seg, label in zip(inst.segments, labels):
        painted[seg.pixels] = int(label)
    return painted


def coverage_stats(inst: SceneInstance, min_area: int) -> Tuple[float, int]:
    """Fraction of non-void pixels covered by segments of at least `min_area` pixels.

    Segment area counts void pixels too; only the numerator/denominator exclude them.

    Args:
        inst: Instance to summarize
        min_area: Area threshold in pixels

    Returns:
        (covered fraction of non-void pixels, number of segments at or above the threshold)
    """
    if min_area < 0:
        raise ValueError("min_area must be >= 0")
    big = [seg for seg in inst.segments if seg.area >= min_area]
    if inst.gt_pixel_labels is None:
        non_void = np.ones(inst.n_pixels, dtype=bool)
    else:
        non_void = inst.gt_pixel_labels >= 0
    total = int(non_void.sum())
    if total == 0:
        return 0.0, len(big)
    covered = sum(int(non_void[seg.pixels].sum()) for seg in big)
    return covered / total, len(big)


# --------------------------------------------------------------------------
# Run-length encoding
# --------------------------------------------------------------------------


def encode_rle(values: np.ndarray, skip: Optional[int] = VOID) -> List[List[int]]:
    """Row-major runs `[start, length, value]` of a flat array, omitting runs equal to `skip`."""
    flat = np.asarray(values).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [flat.size]))
    return [
        [int(s), int(e - s), int(flat[s])]
        for s, e in zip(starts, ends)
        if skip is None or flat[s] != skip
    ]


def decode_rle(runs: Iterable[Sequence[int]], size: int, fill: int = VOID) -> np.ndarray:
    out = np.full(size, fill, dtype=np.int64)
    for run in runs:
        start, length, value = (int(v) for v in run)
        if start < 0 or length <= 0 or start + length > size:
            raise ValueError(f"run {list(run)} outside grid of {size} pixels")
        out[start : start + length] = value
    return out


def pixels_to_rle(pixels: np.ndarray, size: int) -> List[List[int]]:
    membership = np.zeros(size, dtype=np.int64)
    membership[pixels] = 1
    return encode_rle(membership, skip=0)


def rle_to_pixels(runs: Iterable[Sequence[int]], size: int) -> np.ndarray:
    return np.flatnonzero(decode_rle(runs, size, fill=0) != 0)


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------


def _box_violation(box: Box, height: int, width: int) -> Optional[str]:
    x0, y0, x1, y1 = box
    if not (x0 < x1 and y0 < y1):
        return "requires x0 < x1 and y0 < y1"
    if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
        return "outside grid bounds"
    return None


def validate_instance(inst: SceneInstance, ls: LabelSpace) -> List[str]:
    """Check every SceneInstance invariant.

    Args:
        inst: Instance to check
        ls: Label space the instance refers to

    Returns:
        Human-readable violations; empty iff the instance is well formed
    """
    problems: List[str] = []
    size = inst.n_pixels
    if inst.height <= 0 or inst.width <= 0:
        return [f"grid {inst.grid} is empty"]

    owner = np.full(size, -1, dtype=np.int64)
    reported = set()
    for i, seg in enumerate(inst.segments):
        if seg.area == 0:
            problems.append(f"segment {i} has an empty pixel set")
            continue
        if seg.pixels.min() < 0 or seg.pixels.max() >= size:
            problems.append(f"segment {i} has pixels outside the grid")
            continue
        taken = owner[seg.pixels]
        for j in np.unique(taken[taken >= 0]):
            if (int(j), i) not in reported:
                reported.add((int(j), i))
                shared = int(seg.pixels[np.flatnonzero(taken == j)[0]])
                row, col = divmod(shared, inst.width)
                problems.append(f"segments {int(j)} and {i} share pixel ({row},{col})")
        owner[seg.pixels[taken < 0]] = i
        if inst.gt_pixel_labels is not None:
            expected = majority_label(inst.gt_pixel_labels[seg.pixels], ls.C)
            if seg.gt_label != expected:
                problems.append(f"segment {i} gt_label {seg.gt_label} != pixel majority {expected}")

    for i in range(len(inst.segments)):
        parent = inst.seg_parent.get(i)
        if parent is None:
            problems.append(f"segment {i} has no parent")
        elif not 0 <= parent < len(inst.supersegments):
            problems.append(f"segment {i} has invalid parent {parent}")
    extra = set(inst.seg_parent) - set(range(len(inst.segments)))
    if extra:
        problems.append(f"seg_parent names unknown segments {sorted(extra)}")

    for i, sup in enumerate(inst.supersegments):
        if not VOID <= sup.gt_label < ls.C:
            problems.append(f"super-segment {i} has invalid gt_label {sup.gt_label}")

    for i, det in enumerate(inst.detections):
        if det.class_id not in ls.detector_classes:
            problems.append(f"detection {i} class {det.class_id} is not a detector class")
        issue = _box_violation(det.box, inst.height, inst.width)
        if issue:
            problems.append(f"detection {i} box {det.box} {issue}")

    for i, gt in enumerate(inst.gt_boxes):
        if not 0 <= gt.class_id < ls.C:
            problems.append(f"gt box {i} has invalid class {gt.class_id}")
        issue = _box_violation(gt.box, inst.height, inst.width)
        if issue:
            problems.append(f"gt box {i} box {gt.box} {issue}")

    if inst.gt_pixel_labels is not None:
        labels = inst.gt_pixel_labels
        if labels.size != size:
            problems.append(f"gt_pixel_labels has {labels.size} pixels, grid has {size}")
        elif labels.min() < VOID or labels.max() >= ls.C:
            problems.append("gt_pixel_labels contains labels outside the label space")
    if inst.gt_scene is not None and not 0 <= inst.gt_scene < ls.C_l:
        problems.append(f"gt_scene {inst.gt_scene} outside scene types")
    if inst.split not in ("train", "test"):
        problems.append(f"unknown split {inst.split!r}")
    return problems


# --------------------------------------------------------------------------
# JSON (de)serialization
# --------------------------------------------------------------------------


def _canonical(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _canonical(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(f"{float(obj):.12g}") if np.isfinite(obj) else None
    return obj


def canonical_dumps(obj: Any) -> str:
    """Canonical JSON: sorted keys, compact separators, 12 significant digits for floats."""
    return json.dumps(_canonical(obj), sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def write_json(path: Path, obj: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_dumps(obj), encoding="utf-8")


def read_json(path: Path) -> Any:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise DataError("file not found", path=str(path)) from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise DataError(f"parse error: {e.msg}", path=str(path), line=e.lineno) from e


def instance_to_dict(inst: SceneInstance) -> Dict[str, Any]:
    size = inst.n_pixels
    data: Dict[str, Any] = {
        "id": inst.id,
        "split": inst.split,
        "grid": [inst.height, inst.width],
        "segments": [{"rle": pixels_to_rle(s.pixels, size), "gt_label": s.gt_label} for s in inst.segments],
        "supersegments": [{"gt_label": s.gt_label} for s in inst.supersegments],
        "seg_parent": {str(k): v for k, v in sorted(inst.seg_parent.items())},
        "detections": [
            {"class": d.class_id, "score": d.score, "box": list(d.box), "component": d.component_id}
            for d in inst.detections
        ],
        "gt_boxes": [{"class": g.class_id, "box": list(g.box)} for g in inst.gt_boxes],
        "gt_scene": inst.gt_scene,
    }
    if inst.gt_pixel_labels is not None:
        data["gt_pixel_labels"] = encode_rle(inst.gt_pixel_labels)
    return data


def instance_from_dict(data: Mapping[str, Any], path: str = "") -> SceneInstance:
    inst_id = str(data.get("id", ""))
    try:
        height, width = (int(v) for v in data["grid"])
        size = height * width
        labels = data.get("gt_pixel_labels")
        return SceneInstance(
            id=inst_id,
            height=height,
            width=width,
            segments=tuple(
                Segment(pixels=rle_to_pixels(s["rle"], size), gt_label=int(s.get("gt_label", VOID)))
                for s in data["segments"]
            ),
            supersegments=tuple(SuperSegment(gt_label=int(s.get("gt_label", VOID))) for s in data["supersegments"]),
            seg_parent={int(k): int(v) for k, v in data["seg_parent"].items()},
            detections=tuple(
                DetectionCandidate(
                    class_id=int(d["class"]),
                    score=float(d["score"]),
                    box=tuple(int(v) for v in d["box"]),  # type: ignore[arg-type]
                    component_id=int(d.get("component", 0)),
                )
                for d in data.get("detections", [])
            ),
            gt_pixel_labels=None if labels is None else decode_rle(labels, size),
            gt_boxes=tuple(
                GTBox(class_id=int(g["class"]), box=tuple(int(v) for v in g["box"]))  # type: ignore[arg-type]
                for g in data.get("gt_boxes", [])
            ),
            gt_scene=None if data.get("gt_scene") is None else int(data["gt_scene"]),
            split=str(data.get("split", "train")),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed instance record: {e!r}", path=path, instance_id=inst_id) from e


def load_dataset(path: Path) -> Dataset:
    """Load and fully validate a dataset directory.

    Args:
        path: Directory with `labelspace.json` and `instances/<id>.json`

    Returns:
        Validated Dataset split by each record's `split` field

    Raises:
        DataError: On parse errors (file + line) or the first invariant violation
    """
    root = Path(path)
    logger.info(f"Loading dataset from {root}")
    ls_path = root / "labelspace.json"
    try:
        ls = LabelSpace.from_dict(read_json(ls_path))
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed label space: {e!r}", path=str(ls_path)) from e
    problems = ls.violations()
    if problems:
        raise DataError("; ".join(problems), path=str(ls_path))

    files = sorted((root / "instances").glob("*.json"))
    if not files:
        raise DataError("no instance records found", path=str(root / "instances"))

    train: List[SceneInstance] = []
    test: List[SceneInstance] = []
    seen = set()
    for file in files:
        inst = instance_from_dict(read_json(file), path=str(file))
        if inst.id in seen:
            raise DataError("duplicate instance id", path=str(file), instance_id=inst.id)
        seen.add(inst.id)
        violations = validate_instance(inst, ls)
        if violations:
            logger.error(f"Instance {inst.id} failed validation: {violations}")
            raise DataError(violations[0], path=str(file), instance_id=inst.id)
        (train if inst.split == "train" else test).append(inst)

    logger.info(f"Loaded {len(train)} train and {len(test)} test instances (C={ls.C}, C_l={ls.C_l})")
    return Dataset(label_space=ls, train=tuple(train), test=tuple(test))


def save_dataset(ds: Dataset, path: Path) -> None:
    root = Path(path)
    logger.info(f"Saving dataset to {root}")
    write_json(root / "labelspace.json", ds.label_space.to_dict())
    for inst in ds.instances:
        write_json(root / "instances" / f"{inst.id}.json", instance_to_dict(inst))


def dataset_summary(ds: Dataset, min_area: int = 0) -> Dict[str, Any]:
    instances = ds.instances
    coverage = [coverage_stats(inst, min_area)[0] for inst in instances]
    return {
        "train": len(ds.train),
        "test": len(ds.test),
        "classes": ds.label_space.C,
        "scene_types": ds.label_space.C_l,
        "mean_segments": float(np.mean([len(i.segments) for i in instances])) if instances else 0.0,
        "mean_supersegments": float(np.mean([len(i.supersegments) for i in instances])) if instances else 0.0,
        "mean_detections": float(np.mean([len(i.detections) for i in instances])) if instances else 0.0,
        "mean_coverage": float(np.mean(coverage)) if coverage else 0.0,
    }


@dataclass(frozen=True)
class InstanceBuilder:
    """Convenience constructor for hand-written instances (tests, converters).

    Segments are given as 2-D boolean masks or flat index arrays; GT labels of
    segments and super-segments are derived from the pixel labels.
    """

    label_space: LabelSpace
    height: int
    width: int
    gt_labels: np.ndarray = field(repr=False)

    def build(
        self,
        inst_id: str,
        segment_masks: Sequence[np.ndarray],
        seg_parent: Sequence[int],
        detections: Sequence[DetectionCandidate] = (),
        gt_boxes: Sequence[GTBox] = (),
        gt_scene: Optional[int] = 0,
        split: str = "train",
    ) -> SceneInstance:
        flat_labels = np.asarray(self.gt_labels, dtype=np.int64).ravel()
        C = self.label_space.C
        segments = []
        for mask in segment_masks:
            mask = np.asarray(mask)
            pixels = np.flatnonzero(mask.ravel()) if mask.dtype == bool else np.sort(mask.astype(np.int64))
            segments.append(Segment(pixels=pixels, gt_label=majority_label(flat_labels[pixels], C)))
        n_sup = max(seg_parent) + 1 if len(seg_parent) else 0
        sup_labels = []
        for j in range(n_sup):
            members = [segments[i].pixels for i, p in enumerate(seg_parent) if p == j]
            pix = np.concatenate(members) if members else np.zeros(0, dtype=np.int64)
            sup_labels.append(SuperSegment(gt_label=majority_label(flat_labels[pix], C)))
        return SceneInstance(
            id=inst_id,
            height=self.height,
            width=self.width,
            segments=tuple(segments),
            supersegments=tuple(sup_labels),
            seg_parent={i: int(p) for i, p in enumerate(seg_parent)},
            detections=tuple(detections),
            gt_pixel_labels=flat_labels,
            gt_boxes=tuple(gt_boxes),
            gt_scene=gt_scene,
            split=split,
        )
