"""Experiment driver: per-configuration learning, inference and evaluation."""

import time
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from hscrf.services.dataset import Box, Dataset, LabelSpace, SceneInstance, read_json, write_json
from hscrf.services.factor_graph import N_TEMPLATES, FactorGraph, VariableKind, build_graph, is_connected
from hscrf.services.inference import detection_confidence, run_map
from hscrf.services.learning import build_examples, config_clamps, fit_weights, weights_digest, weights_to_dict
from hscrf.services.metrics import (
    DetResult,
    GTObject,
    confusion_from_labels,
    detection_ap,
    global_recall,
    oracle_combination,
    per_class_recall,
    scene_accuracy,
    segment_pixel_accuracy,
    symmetric_kl_rows,
    thing_stuff_recall,
)
from hscrf.services.potentials import RESOLVABLE, PotentialBundle, ProviderStores, assemble_bundle
from hscrf.utils.config import ComponentSources, ExperimentConfig, Source
from hscrf.utils.errors import DataError, DisconnectedGraphError, HscrfError
from hscrf.utils.logger import get_logger
from hscrf.utils.session import RunSession

logger = get_logger(__name__)

REPORT_HEADER = ("config", "avg_recall", "global_recall", "mAP", "scene_acc", "seconds")


@dataclass(frozen=True)
class ReportRow:
    config: str
    avg_recall: float
    global_recall: float
    mean_ap: float
    scene_acc: float
    weights_digest: str = ""
    seconds: Optional[float] = None
    thing_recall: float = float("nan")
    stuff_recall: float = float("nan")

    def csv_values(self) -> List[str]:
        seconds = "" if self.seconds is None else f"{self.seconds:.2f}"
        return [
            self.config,
            f"{self.avg_recall:.6f}",
            f"{self.global_recall:.6f}",
            f"{self.mean_ap:.6f}",
            f"{self.scene_acc:.6f}",
            seconds,
        ]


@dataclass(frozen=True)
class InstancePrediction:
    instance_id: str
    segments: Tuple[int, ...]
    scene: int
    detections: Tuple[DetResult, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "segments": list(self.segments),
            "scene": self.scene,
            "detections": [
                {"class": d.class_id, "box": list(d.box), "confidence": d.confidence} for d in self.detections
            ],
        }


@dataclass
class ExperimentResult:
    row: ReportRow
    weights: np.ndarray
    predictions: List[InstancePrediction] = field(default_factory=list)
    history: List[float] = field(default_factory=list)


@dataclass
class SuiteResult:
    rows: List[ReportRow] = field(default_factory=list)
    failures: List[Tuple[str, str]] = field(default_factory=list)  # (config label, reason)


# --------------------------------------------------------------------------
# Single experiment
# --------------------------------------------------------------------------


def _test_graphs(
    cfg: ExperimentConfig, instances: Sequence[SceneInstance], stores: ProviderStores
) -> List[Tuple[SceneInstance, PotentialBundle, FactorGraph]]:
    out = []
    for inst in instances:
        bundle = assemble_bundle(inst, cfg, stores)
        graph = build_graph(inst, bundle)
        out.append((inst, bundle, graph.with_clamps(config_clamps(graph, inst, bundle, cfg))))
    return out


def check_connectivity(cfg: ExperimentConfig, graphs: Sequence[Tuple[str, FactorGraph]]) -> None:
    """Reject configurations whose CRF falls apart, unless the config explicitly allows it."""
    if cfg.allow_disconnected:
        return
    for inst_id, g in graphs:
        if not is_connected(g):
            removed = ", ".join(cfg.components.removed()) or "nothing"
            raise DisconnectedGraphError(
                f"config '{cfg.label}' (removed: {removed}): removing the corresponding potential would "
                f"result in the CRF being disconnected (instance {inst_id})"
            )


def _predict(
    weights: np.ndarray, cfg: ExperimentConfig, item: Tuple[SceneInstance, PotentialBundle, FactorGraph]
) -> InstancePrediction:
    inst, bundle, graph = item
    g = graph.with_weights(weights)
    opts = cfg.learn
    result = run_map(g, method="loopy", damping=opts.damping, max_iters=opts.max_iters, tol=opts.tol)
    a = result.assignment
    segments = tuple(int(v) for v in a[g.indices(VariableKind.SEGMENT)])
    scene = int(a[g.var(VariableKind.SCENE)])

    if bundle.detections is not None:
        confidence = detection_confidence(g, result)
        detections = tuple(
            DetResult(inst.id, d.class_id, d.box, float(c)) for d, c in zip(bundle.detections, confidence)
        )
    else:
        # No detection variables: report the raw candidates
        detections = tuple(DetResult(inst.id, d.class_id, d.box, d.sigma) for d in inst.detections)
    return InstancePrediction(inst.id, segments, scene, detections)


def evaluate_predictions(
    predictions: Sequence[InstancePrediction], instances: Sequence[SceneInstance], ls: LabelSpace
) -> Dict[str, float]:
    """Segmentation recall, detection AP and scene accuracy of predictions against GT."""
    by_id = {inst.id: inst for inst in instances}
    cm = np.zeros((ls.C, ls.C), dtype=np.int64)
    dets: List[DetResult] = []
    gts: List[GTObject] = []
    scene_pred, scene_gt = [], []
    for pred in predictions:
        inst = by_id.get(pred.instance_id)
        if inst is None:
            raise DataError(f"prediction for unknown instance {pred.instance_id}")
        if len(pred.segments) != len(inst.segments):
            raise DataError("segment count mismatch", instance_id=inst.id)
        cm += confusion_from_labels(inst, pred.segments, ls.C)
        dets.extend(pred.detections)
        gts.extend(GTObject(inst.id, g.class_id, g.box) for g in inst.gt_boxes if g.class_id in ls.detector_classes)
        if inst.gt_scene is not None:
            scene_pred.append(pred.scene)
            scene_gt.append(inst.gt_scene)

    _, avg = per_class_recall(cm)
    things, stuff = thing_stuff_recall(cm, ls.is_thing)
    _, mean_ap = detection_ap(dets, gts)
    return {
        "avg_recall": avg,
        "global_recall": global_recall(cm),
        "thing_recall": things,
        "stuff_recall": stuff,
        "mAP": mean_ap,
        "scene_acc": scene_accuracy(scene_pred, scene_gt) if scene_pred else float("nan"),
    }


def execute_experiment(
    cfg: ExperimentConfig,
    dataset: Dataset,
    stores: ProviderStores,
    session: Optional[RunSession] = None,
    timing: bool = False,
) -> ExperimentResult:
    """Learn on train under `cfg`, infer on test and evaluate all three tasks.

    Raises:
        DisconnectedGraphError: The configuration disconnects the CRF
        UnresolvableComponentError: A component has no data for its source
        LearningError: Learning diverged
    """
    session = session or RunSession()
    start = time.perf_counter()
    logger.info(f"Running config '{cfg.label}' ({cfg.canonical_hash()})")

    examples = build_examples(dataset.train, cfg, stores) if not cfg.learn.skip else []
    test_items = _test_graphs(cfg, dataset.test, stores)
    check_connectivity(cfg, [(ex.instance_id, ex.graph) for ex in examples] + [(i.id, g) for i, _, g in test_items])

    history: List[float] = []
    if cfg.learn.skip or not examples:
        present = np.zeros(N_TEMPLATES, dtype=bool)
        for _, _, g in test_items:
            present |= g.templates_present()
        weights = present.astype(float)
        logger.info("Learning skipped; using unit weights")
    else:
        learned = fit_weights(examples, cfg.learn, session)
        weights, history = learned.weights, learned.history

    predictions = session.parallel_map(partial(_predict, weights, cfg), test_items)
    metrics = evaluate_predictions(predictions, dataset.test, stores.label_space)
    seconds = time.perf_counter() - start if timing else None
    row = ReportRow(
        config=cfg.label,
        avg_recall=metrics["avg_recall"],
        global_recall=metrics["global_recall"],
        mean_ap=metrics["mAP"],
        scene_acc=metrics["scene_acc"],
        weights_digest=weights_digest(weights),
        seconds=seconds,
        thing_recall=metrics["thing_recall"],
        stuff_recall=metrics["stuff_recall"],
    )
    logger.info(
        f"'{cfg.label}': avg recall {row.avg_recall:.4f}, global {row.global_recall:.4f}, "
        f"mAP {row.mean_ap:.4f}, scene {row.scene_acc:.4f}"
    )
    return ExperimentResult(row=row, weights=weights, predictions=predictions, history=history)


def run_experiment(
    cfg: ExperimentConfig,
    dataset: Dataset,
    stores: ProviderStores,
    session: Optional[RunSession] = None,
    timing: bool = False,
) -> ReportRow:
    return execute_experiment(cfg, dataset, stores, session, timing).row


def save_experiment(result: ExperimentResult, out_dir: Path) -> None:
    root = Path(out_dir)
    write_json(root / "weights.json", weights_to_dict(result.weights))
    write_json(
        root / "predictions.json",
        {"config": result.row.config, "instances": {p.instance_id: p.to_dict() for p in result.predictions}},
    )
    if result.history:
        write_json(root / "learning.json", {"objective": result.history})


def _box(values: Sequence[Any]) -> Box:
    x0, y0, x1, y1 = (int(v) for v in values)
    return (x0, y0, x1, y1)


def load_predictions(path: Path) -> List[InstancePrediction]:
    data = read_json(Path(path))
    try:
        return [
            InstancePrediction(
                instance_id=inst_id,
                segments=tuple(int(v) for v in record["segments"]),
                scene=int(record["scene"]),
                detections=tuple(
                    DetResult(inst_id, int(d["class"]), _box(d["box"]), float(d["confidence"]))
                    for d in record.get("detections", [])
                ),
            )
            for inst_id, record in sorted(data["instances"].items())
        ]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed predictions file: {e}", path=str(path)) from e


def compare_predictions(
    pred_a: Sequence[InstancePrediction],
    pred_b: Sequence[InstancePrediction],
    instances: Sequence[SceneInstance],
    C: int,
) -> Dict[str, float]:
    """Confusion distance and oracle combination of two prediction sets over the same instances."""
    by_id = {inst.id: inst for inst in instances}
    b_by_id = {p.instance_id: p for p in pred_b}
    cm_a = np.zeros((C, C), dtype=np.int64)
    cm_b = np.zeros((C, C), dtype=np.int64)
    labels_a, labels_b, truth, areas = [], [], [], []
    for pa in pred_a:
        pb = b_by_id.get(pa.instance_id)
        inst = by_id.get(pa.instance_id)
        if pb is None or inst is None:
            continue
        cm_a += confusion_from_labels(inst, pa.segments, C)
        cm_b += confusion_from_labels(inst, pb.segments, C)
        labels_a.extend(pa.segments)
        labels_b.extend(pb.segments)
        truth.extend(s.gt_label for s in inst.segments)
        areas.extend(s.area for s in inst.segments)
    if not truth:
        raise DataError("the two prediction files share no instances")
    return {
        "symmetric_kl": symmetric_kl_rows(cm_a, cm_b),
        "accuracy_a": segment_pixel_accuracy(labels_a, truth, areas),
        "accuracy_b": segment_pixel_accuracy(labels_b, truth, areas),
        "oracle": oracle_combination(labels_a, labels_b, truth, areas),
    }


# --------------------------------------------------------------------------
# Suites
# --------------------------------------------------------------------------


def baseline_config(template: ExperimentConfig) -> ExperimentConfig:
    return template.model_copy(
        update={
            "label": "machine",
            "components": ComponentSources(),
            "clamp_classes": False,
            "clamp_scene": False,
            "clamp_detections": False,
        }
    )


def _run_safe(
    dataset: Dataset, stores: ProviderStores, session: RunSession, timing: bool, cfg: ExperimentConfig
) -> Tuple[Optional[ReportRow], str]:
    try:
        return run_experiment(cfg, dataset, stores, session, timing), ""
    except HscrfError as e:
        logger.warning(f"Config '{cfg.label}' failed: {e}")
        return None, str(e)


def run_ablation_suite(
    grid: Sequence[ExperimentConfig],
    dataset: Dataset,
    stores: ProviderStores,
    session: Optional[RunSession] = None,
    timing: bool = False,
) -> SuiteResult:
    """One row per distinct config; failing configs are collected instead of aborting the suite.

    The all-machine baseline is always part of the suite (added first when
    missing). With jobs > 1 and several configs, configs run in parallel and
    each one runs its instances serially.
    """
    if not grid:
        raise ValueError("ablation grid is empty")
    session = session or RunSession()
    configs: List[ExperimentConfig] = []
    seen: Dict[str, str] = {}
    for cfg in grid:
        key = cfg.canonical_hash()
        if key in seen:
            logger.info(f"Skipping '{cfg.label}': same configuration as '{seen[key]}'")
            continue
        seen[key] = cfg.label
        configs.append(cfg)
    if not any(cfg.is_all_machine() for cfg in configs):
        configs.insert(0, baseline_config(configs[0]))

    logger.info(f"Ablation suite: {len(configs)} configs")
    if session.jobs > 1 and len(configs) > 1:
        outcomes = session.parallel_map(partial(_run_safe, dataset, stores, session.serial(), timing), configs)
    else:
        outcomes = [_run_safe(dataset, stores, session, timing, cfg) for cfg in configs]

    result = SuiteResult()
    for cfg, (row, reason) in zip(configs, outcomes):
        if row is None:
            result.failures.append((cfg.label, reason))
        else:
            result.rows.append(row)
    return result


def component_sweep(component: str, base: ExperimentConfig) -> List[ExperimentConfig]:
    """One config per source the component can take, everything else left at `base`."""
    if component not in RESOLVABLE:
        raise ValueError(f"unknown component {component!r}")
    return [
        base.with_components(label=f"{component}={source.value}", **{component: source})
        for source in RESOLVABLE[component]
    ]


def complementarity_grid(base: Optional[ExperimentConfig] = None) -> List[ExperimentConfig]:
    """Human/machine segment and super-segment hybrids, each with and without the cross-level coupling."""
    base = base or ExperimentConfig()
    H, M = Source.HUMAN, Source.MACHINE
    rows = [
        ("H S, H SS", {"seg_unary": H, "supseg_unary": H}),
        ("M S, M SS", {"seg_unary": M, "supseg_unary": M}),
        ("H S, M SS", {"seg_unary": H, "supseg_unary": M}),
        ("M S, H SS", {"seg_unary": M, "supseg_unary": H}),
        ("H S+M S, M SS", {"seg_unary": H, "seg_unary_aux": M, "supseg_unary": M}),
        ("H S+M S, H SS", {"seg_unary": H, "seg_unary_aux": M, "supseg_unary": H}),
    ]
    grid = []
    for label, sources in rows:
        grid.append(base.with_components(label=label, **sources))
        unlinked = base.with_components(label=f"{label} (no pn)", pn=Source.REMOVE, **sources)
        grid.append(unlinked.model_copy(update={"allow_disconnected": True}))
    return grid


def default_journey(base: Optional[ExperimentConfig] = None) -> List[ExperimentConfig]:
    """Segmentation ladder from all-machine to GT segments, each step adding to the previous one."""
    base = base or ExperimentConfig()
    steps = [
        ("machine", {}),
        ("+GT detection", {"detection": Source.GT}),
        ("+GT class presence", {"class_unary": Source.GT}),
        ("+GT shape", {"shape": Source.GT}),
        ("+GT segments", {"seg_unary": Source.GT}),
    ]
    ladder = []
    current = base.with_components(label="machine")
    for label, sources in steps:
        current = current.with_components(label=label, **sources)
        ladder.append(current)
    return ladder


@dataclass(frozen=True)
class JourneyStep:
    row: ReportRow
    deltas: Mapping[str, float]


def journey(
    sequence: Sequence[ExperimentConfig],
    dataset: Dataset,
    stores: ProviderStores,
    session: Optional[RunSession] = None,
    timing: bool = False,
) -> List[JourneyStep]:
    """Rows in sequence order with metric deltas to the previous step (zero for the first)."""
    if not sequence:
        raise ValueError("journey sequence is empty")
    steps: List[JourneyStep] = []
    previous: Optional[ReportRow] = None
    for cfg in sequence:
        row = run_experiment(cfg, dataset, stores, session, timing)
        deltas = {
            name: 0.0 if previous is None else getattr(row, name) - getattr(previous, name)
            for name in ("avg_recall", "global_recall", "mean_ap", "scene_acc")
        }
        steps.append(JourneyStep(row, deltas))
        previous = row
    return steps
