"""Discriminative learning of template weights (structured hinge, projected subgradient)."""

import hashlib
import json
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from hscrf.services.dataset import SceneInstance, box_iou, class_presence, read_json, write_json
from hscrf.services.factor_graph import (
    N_TEMPLATES,
    TEMPLATE_NAMES,
    FactorGraph,
    VariableKind,
    build_graph,
    template_features,
)
from hscrf.services.inference import InferenceResult, run_map
from hscrf.services.potentials import PotentialBundle, ProviderStores, assemble_bundle
from hscrf.utils.config import ExperimentConfig, LearnOptions, LossWeights
from hscrf.utils.errors import DataError, LearningError
from hscrf.utils.logger import get_logger
from hscrf.utils.session import RunSession, derive_rng

logger = get_logger(__name__)

KIND_WEIGHT = {
    VariableKind.SEGMENT: "segment",
    VariableKind.SUPERSEGMENT: "supersegment",
    VariableKind.DETECTION: "detection",
    VariableKind.CLASS_PRESENCE: "class_presence",
    VariableKind.SCENE: "scene",
}


@dataclass(frozen=True, eq=False)
class TrainingExample:
    instance_id: str
    graph: FactorGraph
    gt: np.ndarray
    loss_mask: np.ndarray  # variables that count towards the loss


@dataclass
class LearnResult:
    weights: np.ndarray
    objective: float
    history: List[float] = field(default_factory=list)  # best-so-far objective per evaluation


# --------------------------------------------------------------------------
# GT assignment and loss
# --------------------------------------------------------------------------


def detection_truth(inst: SceneInstance, bundle: PotentialBundle) -> np.ndarray:
    """b_i = 1 iff candidate i overlaps a same-class GT box with IoU >= 0.5."""
    if bundle.detections is None:
        return np.zeros(0, dtype=np.int64)
    return np.array(
        [
            int(any(g.class_id == d.class_id and box_iou(d.box, g.box) >= 0.5 for g in inst.gt_boxes))
            for d in bundle.detections
        ],
        dtype=np.int64,
    )


def gt_assignment(g: FactorGraph, inst: SceneInstance, bundle: PotentialBundle) -> Tuple[np.ndarray, np.ndarray]:
    """Latent-free GT labelling of every variable and the mask of variables with a defined label.

    Segments without a GT label take their super-segment's label and are left
    out of the loss; so are super-segments without one.
    """
    if not inst.has_gt():
        raise DataError("learning needs GT labels and scene", instance_id=inst.id)
    a = np.zeros(g.n_vars, dtype=np.int64)
    mask = np.ones(g.n_vars, dtype=bool)

    for j, sup in enumerate(inst.supersegments):
        v = g.var(VariableKind.SUPERSEGMENT, j)
        a[v] = max(sup.gt_label, 0)
        mask[v] = sup.gt_label >= 0
    for i, seg in enumerate(inst.segments):
        v = g.var(VariableKind.SEGMENT, i)
        if seg.gt_label >= 0:
            a[v] = seg.gt_label
        else:
            a[v] = a[g.var(VariableKind.SUPERSEGMENT, inst.parent(i))]
            mask[v] = False
    truth = detection_truth(inst, bundle)
    for i, value in enumerate(truth):
        a[g.var(VariableKind.DETECTION, i)] = value
    presence = class_presence(inst, bundle.n_classes)
    for k in range(bundle.n_classes):
        a[g.var(VariableKind.CLASS_PRESENCE, k)] = int(presence[k])
    a[g.var(VariableKind.SCENE)] = int(inst.gt_scene)  # type: ignore[arg-type]
    return a, mask


def config_clamps(
    g: FactorGraph, inst: SceneInstance, bundle: PotentialBundle, cfg: ExperimentConfig
) -> Dict[int, int]:
    """Evidence clamps requested by the configuration: class presence, scene and detections fixed to GT."""
    if not (cfg.clamp_classes or cfg.clamp_scene or cfg.clamp_detections):
        return {}
    gt, _ = gt_assignment(g, inst, bundle)
    kinds = set()
    if cfg.clamp_classes:
        kinds.add(VariableKind.CLASS_PRESENCE)
    if cfg.clamp_scene:
        kinds.add(VariableKind.SCENE)
    if cfg.clamp_detections:
        kinds.add(VariableKind.DETECTION)
    return {v: int(gt[v]) for v, var in enumerate(g.variables) if var.kind in kinds}


def _kind_weights(g: FactorGraph, weights: LossWeights, mask: Optional[np.ndarray]) -> np.ndarray:
    w = np.array([getattr(weights, KIND_WEIGHT[v.kind]) for v in g.variables], dtype=float)
    if mask is not None:
        w = w * mask
    return w


def hamming_loss(
    a: Sequence[int],
    gt: Sequence[int],
    g: FactorGraph,
    weights: LossWeights = LossWeights(),
    mask: Optional[np.ndarray] = None,
) -> float:
    """Weighted count of variables whose label differs from GT."""
    a_arr, gt_arr = np.asarray(a), np.asarray(gt)
    if a_arr.shape != gt_arr.shape:
        raise ValueError("assignments cover different variable sets")
    return float(np.sum(_kind_weights(g, weights, mask) * (a_arr != gt_arr)))


def loss_bonus(
    g: FactorGraph, gt: Sequence[int], weights: LossWeights, mask: Optional[np.ndarray] = None
) -> np.ndarray:
    """Per-variable unary reward on every non-GT label, equal to that variable's loss weight."""
    domains = g.domains
    D = int(domains.max()) if g.n_vars else 1
    w = _kind_weights(g, weights, mask)
    bonus = np.repeat(w[:, None], D, axis=1)
    bonus[np.arange(g.n_vars), np.asarray(gt, dtype=np.int64)] = 0.0
    bonus[np.arange(D)[None, :] >= domains[:, None]] = 0.0
    return bonus


def loss_augmented_map(
    g: FactorGraph,
    gt: Sequence[int],
    weights: LossWeights = LossWeights(),
    mask: Optional[np.ndarray] = None,
    method: str = "loopy",
    opts: LearnOptions = LearnOptions(),
) -> InferenceResult:
    """argmax over assignments of score + Hamming loss; the returned score is the plain score."""
    bonus = loss_bonus(g, gt, weights, mask)
    return run_map(g, method=method, damping=opts.damping, max_iters=opts.max_iters, tol=opts.tol, bonus=bonus)


# --------------------------------------------------------------------------
# Learning
# --------------------------------------------------------------------------


def build_examples(
    instances: Sequence[SceneInstance], cfg: ExperimentConfig, stores: ProviderStores
) -> List[TrainingExample]:
    examples = []
    for inst in instances:
        bundle = assemble_bundle(inst, cfg, stores)
        graph = build_graph(inst, bundle)
        graph = graph.with_clamps(config_clamps(graph, inst, bundle, cfg))
        gt, mask = gt_assignment(graph, inst, bundle)
        examples.append(TrainingExample(inst.id, graph, gt, mask))
    return examples


def _instance_step(weights: np.ndarray, opts: LearnOptions, example: TrainingExample) -> Tuple[float, np.ndarray]:
    """Structured hinge value and subgradient of one example at `weights`."""
    g = example.graph.with_weights(weights)
    result = loss_augmented_map(g, example.gt, opts.loss_weights, example.loss_mask, opts=opts)
    phi_hat = template_features(g, result.assignment)
    phi_gt = template_features(g, example.gt)
    loss = hamming_loss(result.assignment, example.gt, g, opts.loss_weights, example.loss_mask)
    hinge = float(weights @ phi_hat + loss - weights @ phi_gt)
    if hinge <= 0.0:
        return 0.0, np.zeros(N_TEMPLATES)
    return hinge, phi_hat - phi_gt


def evaluate_objective(
    weights: np.ndarray, batch: Sequence[TrainingExample], opts: LearnOptions, session: RunSession
) -> Tuple[float, np.ndarray]:
    steps = session.parallel_map(partial(_instance_step, weights, opts), batch)
    hinge = float(np.mean([h for h, _ in steps]))
    grad = np.mean([s for _, s in steps], axis=0)
    objective = 0.5 * opts.lam * float(weights @ weights) + hinge
    if not np.isfinite(objective) or not np.isfinite(grad).all():
        logger.error(f"Learning diverged: objective={objective}, weights={weights.tolist()}")
        raise LearningError(f"objective became non-finite (weights {weights.tolist()})")
    return objective, opts.lam * weights + grad


def subgradient_step(w: np.ndarray, grad: np.ndarray, t: int, eta0: float, present: np.ndarray) -> np.ndarray:
    """One projected step of length at most eta0 / sqrt(t).

    The subgradient is rescaled to unit norm when longer, so the step does not
    grow with the number of variables in the training graphs.
    """
    norm = float(np.linalg.norm(grad))
    if norm > 1.0:
        grad = grad / norm
    return np.where(present, np.maximum(0.0, w - eta0 / np.sqrt(t) * grad), 0.0)


def fit_weights(
    examples: Sequence[TrainingExample], opts: LearnOptions, session: Optional[RunSession] = None
) -> LearnResult:
    """Projected subgradient descent on the L2-regularized structured hinge.

    The full training objective is evaluated before every epoch and once after
    the last one; the weights with the lowest value are returned together with
    that value. Templates without factors in any example stay at 0.

    Raises:
        LearningError: The objective or weights became non-finite
    """
    if not examples:
        raise LearningError("no training examples")
    session = session or RunSession()
    present = np.zeros(N_TEMPLATES, dtype=bool)
    for ex in examples:
        present |= ex.graph.templates_present()
    w = np.where(present, opts.init_weight, 0.0)

    full_batch = opts.batch_size is None or opts.batch_size >= len(examples)
    best_w, best_obj = w.copy(), np.inf
    history: List[float] = []
    t = 0
    for epoch in range(opts.epochs + 1):
        objective, grad = evaluate_objective(w, examples, opts, session)
        if objective < best_obj:
            best_obj, best_w = objective, w.copy()
        history.append(float(best_obj))
        logger.debug(f"Epoch {epoch}: objective={objective:.6f}, best={best_obj:.6f}")
        if epoch == opts.epochs:
            break

        if full_batch:
            t += 1
            w = subgradient_step(w, grad, t, opts.eta0, present)
            continue
        order = derive_rng(opts.seed, "epoch", epoch + 1).permutation(len(examples))
        size = int(opts.batch_size)  # type: ignore[arg-type]
        for s in range(0, len(order), size):
            _, grad = evaluate_objective(w, [examples[i] for i in order[s : s + size]], opts, session)
            t += 1
            w = subgradient_step(w, grad, t, opts.eta0, present)

    logger.info(f"Learned weights: {dict(zip(TEMPLATE_NAMES, np.round(best_w, 4).tolist()))}")
    return LearnResult(weights=best_w, objective=float(best_obj), history=history)



def learn_weights(
    train: Sequence[SceneInstance],
    cfg: ExperimentConfig,
    stores: ProviderStores,
    session: Optional[RunSession] = None,
) -> LearnResult:
    """Build training graphs under `cfg` and fit weights (cold start every call)."""
    if not train:
        raise LearningError("training split is empty")
    logger.info(f"Learning weights for '{cfg.label}' on {len(train)} instances")
    return fit_weights(build_examples(train, cfg, stores), cfg.learn, session)


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------


def weights_to_dict(w: Sequence[float]) -> Dict[str, float]:
    return {name: float(value) for name, value in zip(TEMPLATE_NAMES, w)}


def weights_digest(w: Sequence[float]) -> str:
    blob = json.dumps([round(float(v), 10) for v in w], separators=(",", ":"))
    return hashlib.sha1(blob.encode("utf-8")).hexdigest()[:12]


def save_weights(w: Sequence[float], path: Path) -> None:
    write_json(Path(path), weights_to_dict(w))


def load_weights(path: Path) -> np.ndarray:
    data = read_json(Path(path))
    unknown = set(data) - set(TEMPLATE_NAMES)
    if unknown:
        raise DataError(f"unknown templates {sorted(unknown)}", path=str(path))
    return np.array([float(data.get(name, 0.0)) for name in TEMPLATE_NAMES])
