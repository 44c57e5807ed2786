"""CRF variables, factor templates and graph construction from a potential bundle."""

from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from functools import lru_cache
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
import scipy.sparse as sp

from hscrf.services.dataset import SceneInstance
from hscrf.services.potentials import EPS, PotentialBundle
from hscrf.utils.errors import GraphBuildError
from hscrf.utils.logger import get_logger

logger = get_logger(__name__)


class VariableKind(str, Enum):
    SEGMENT = "segment"
    SUPERSEGMENT = "supersegment"
    DETECTION = "detection"
    CLASS_PRESENCE = "class_presence"
    SCENE = "scene"


class Template(IntEnum):
    """Factor templates; the value is the index into the weight vector."""

    SEG_UNARY = 0
    SEG_UNARY_AUX = 1
    SUPSEG_UNARY = 2
    PN = 3
    CLASS_UNARY = 4
    CLASS_TREE = 5
    DET_UNARY = 6
    DET_CLASS = 7
    SHAPE = 8
    SUPSEG_CLASS = 9
    SCENE_UNARY = 10
    SCENE_CLASS = 11


TEMPLATE_NAMES: Tuple[str, ...] = tuple(t.name.lower() for t in Template)
N_TEMPLATES = len(Template)


def default_weights(value: float = 1.0) -> np.ndarray:
    return np.full(N_TEMPLATES, float(value))


def log_floor(p: Any) -> np.ndarray:
    return np.log(np.maximum(np.asarray(p, dtype=float), EPS))


@dataclass(frozen=True)
class Variable:
    kind: VariableKind
    domain: int
    index: int  # position within its kind


@dataclass(frozen=True, eq=False)
class Factor:
    template: Template
    scope: Tuple[int, ...]
    base: np.ndarray  # unweighted log-score table, one axis per scope variable


@dataclass(frozen=True, eq=False)
class FactorGraph:
    """Immutable CRF: variables, factors (base tables) and template weights.

    A factor's log-score is `weights[template] * base`.
    """

    variables: Tuple[Variable, ...]
    factors: Tuple[Factor, ...]
    weights: np.ndarray
    clamps: Mapping[int, int] = field(default_factory=dict)
    offsets: Mapping[VariableKind, int] = field(default_factory=dict)

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    @property
    def domains(self) -> np.ndarray:
        return np.array([v.domain for v in self.variables], dtype=np.int64)

    def var(self, kind: VariableKind, index: int = 0) -> int:
        return self.offsets[kind] + index

    def indices(self, kind: VariableKind) -> np.ndarray:
        return np.array([i for i, v in enumerate(self.variables) if v.kind is kind], dtype=np.int64)

    def table(self, factor: Factor) -> np.ndarray:
        return self.weights[factor.template] * factor.base

    def templates_present(self) -> np.ndarray:
        present = np.zeros(N_TEMPLATES, dtype=bool)
        for f in self.factors:
            present[f.template] = True
        return present

    def with_weights(self, weights: Sequence[float]) -> "FactorGraph":
        w = np.asarray(weights, dtype=float)
        if w.shape != (N_TEMPLATES,):
            raise GraphBuildError(f"expected {N_TEMPLATES} weights, got shape {w.shape}")
        return replace(self, weights=w)

    def with_clamps(self, clamps: Mapping[int, int]) -> "FactorGraph":
        _check_clamps(self.variables, clamps)
        return replace(self, clamps=dict(clamps))

    @classmethod
    def from_tables(
        cls,
        domains: Sequence[int],
        tables: Sequence[Tuple[Sequence[int], np.ndarray]],
        clamps: Optional[Mapping[int, int]] = None,
    ) -> "FactorGraph":
        """Generic graph over plain variables with unit weights (unary/pairwise tables as given)."""
        variables = tuple(Variable(VariableKind.SEGMENT, int(d), i) for i, d in enumerate(domains))
        factors = []
        for scope, table in tables:
            scope = tuple(int(v) for v in scope)
            template = Template.SEG_UNARY if len(scope) == 1 else Template.PN
            factors.append(Factor(template, scope, np.asarray(table, dtype=float)))
        _check_factors(variables, factors)
        _check_clamps(variables, clamps or {})
        return cls(variables, tuple(factors), default_weights(), dict(clamps or {}), {VariableKind.SEGMENT: 0})


@dataclass(frozen=True, eq=False)
class GraphArrays:
    """Zero-padded base tables of a graph stacked per arity, plus its traversal structure.

    Depends only on variables and factors, so graphs that differ in weights or
    clamps share one instance.
    """

    D: int
    unary_vars: np.ndarray
    unary_templates: np.ndarray
    unary_base: np.ndarray  # n_unary x D
    pair_a: np.ndarray
    pair_b: np.ndarray
    pair_templates: np.ndarray
    pair_base: np.ndarray  # n_pair x D x D
    pair_valid: np.ndarray  # label pairs inside both domains
    incidence_a: sp.csr_matrix  # n_vars x n_pair, variable is the first scope entry
    incidence_b: sp.csr_matrix
    incident: Tuple[Tuple[Tuple[int, int], ...], ...]  # per variable: (pair factor, side)
    bfs_order: Tuple[int, ...]


@lru_cache(maxsize=512)
def _stack_arrays(variables: Tuple[Variable, ...], factors: Tuple[Factor, ...]) -> GraphArrays:
    n = len(variables)
    domains = np.array([v.domain for v in variables], dtype=np.int64)
    D = int(domains.max()) if n else 1
    unary = [f for f in factors if len(f.scope) == 1]
    pairs = [f for f in factors if len(f.scope) == 2]

    unary_base = np.zeros((len(unary), D))
    for i, f in enumerate(unary):
        unary_base[i, : f.base.shape[0]] = f.base
    pair_base = np.zeros((len(pairs), D, D))
    for i, f in enumerate(pairs):
        pair_base[i, : f.base.shape[0], : f.base.shape[1]] = f.base
    pair_a = np.array([f.scope[0] for f in pairs], dtype=np.int64)
    pair_b = np.array([f.scope[1] for f in pairs], dtype=np.int64)
    labels = np.arange(D)
    pair_valid = (labels[None, :, None] < domains[pair_a][:, None, None]) & (
        labels[None, None, :] < domains[pair_b][:, None, None]
    )

    ones = np.ones(len(pairs))
    columns = np.arange(len(pairs))
    incident: List[List[Tuple[int, int]]] = [[] for _ in range(n)]
    for f in range(len(pairs)):
        incident[pair_a[f]].append((f, 0))
        incident[pair_b[f]].append((f, 1))

    graph = nx.Graph()
    graph.add_nodes_from(range(n))
    graph.add_edges_from(zip(pair_a.tolist(), pair_b.tolist()))
    order: List[int] = []
    for component in sorted(nx.connected_components(graph), key=min):
        root = min(component)
        order.append(root)
        order.extend(v for _, v in nx.bfs_edges(graph, root, sort_neighbors=sorted))

    return GraphArrays(
        D=D,
        unary_vars=np.array([f.scope[0] for f in unary], dtype=np.int64),
        unary_templates=np.array([int(f.template) for f in unary], dtype=np.int64),
        unary_base=unary_base,
        pair_a=pair_a,
        pair_b=pair_b,
        pair_templates=np.array([int(f.template) for f in pairs], dtype=np.int64),
        pair_base=pair_base,
        pair_valid=pair_valid,
        incidence_a=sp.csr_matrix((ones, (pair_a, columns)), shape=(n, len(pairs))),
        incidence_b=sp.csr_matrix((ones, (pair_b, columns)), shape=(n, len(pairs))),
        incident=tuple(tuple(items) for items in incident),
        bfs_order=tuple(order),
    )


def graph_arrays(g: FactorGraph) -> GraphArrays:
    return _stack_arrays(tuple(g.variables), tuple(g.factors))


def _check_factors(variables: Sequence[Variable], factors: Sequence[Factor]) -> None:
    for f in factors:
        if not 1 <= len(f.scope) <= 2 or len(set(f.scope)) != len(f.scope):
            raise GraphBuildError(f"{f.template.name} scope {f.scope} must hold 1 or 2 distinct variables")
        if any(not 0 <= v < len(variables) for v in f.scope):
            raise GraphBuildError(f"{f.template.name} scope {f.scope} references unknown variables")
        expected = tuple(variables[v].domain for v in f.scope)
        if f.base.shape != expected:
            raise GraphBuildError(f"{f.template.name} table shape {f.base.shape} != domains {expected}")
        if not np.isfinite(f.base).all():
            raise GraphBuildError(f"{f.template.name} table has non-finite entries")


def _check_clamps(variables: Sequence[Variable], clamps: Mapping[int, int]) -> None:
    for v, label in clamps.items():
        if not 0 <= v < len(variables) or not 0 <= label < variables[v].domain:
            raise GraphBuildError(f"clamp {v}={label} outside the graph")


def _shape_scores(inst: SceneInstance, box: Tuple[int, int, int, int], mask: np.ndarray) -> Dict[int, float]:
    """Mask mass over each overlapping segment's in-box pixels divided by the segment's area."""
    x0, y0, x1, y1 = box
    scores = {}
    for i, seg in enumerate(inst.segments):
        rows, cols = np.divmod(seg.pixels, inst.width)
        inside = (cols >= x0) & (cols < x1) & (rows >= y0) & (rows < y1)
        if inside.any():
            scores[i] = float(mask[rows[inside] - y0, cols[inside] - x0].sum() / seg.area)
    return scores


def build_graph(
    inst: SceneInstance,
    bundle: PotentialBundle,
    w: Optional[Sequence[float]] = None,
    clamps: Optional[Mapping[int, int]] = None,
) -> FactorGraph:
    """Build the CRF of one instance.

    Variables are laid out as segments, super-segments, detections, class
    presence and scene, in that order. Removed components contribute no factors.

    Args:
        inst: Instance (segments, parents, boxes)
        bundle: Potential tables; None entries are Removed
        w: One weight per template (defaults to all ones)
        clamps: Fixed labels by variable index

    Returns:
        The immutable factor graph

    Raises:
        GraphBuildError: Table shapes disagree with the instance or weights are malformed
    """
    C, C_l = bundle.n_classes, bundle.n_scenes
    n_seg, n_ss, n_det = len(inst.segments), len(inst.supersegments), bundle.n_detections
    weights = default_weights() if w is None else np.asarray(w, dtype=float)
    if weights.shape != (N_TEMPLATES,) or not np.isfinite(weights).all():
        raise GraphBuildError(f"expected {N_TEMPLATES} finite weights")

    offsets = {
        VariableKind.SEGMENT: 0,
        VariableKind.SUPERSEGMENT: n_seg,
        VariableKind.DETECTION: n_seg + n_ss,
        VariableKind.CLASS_PRESENCE: n_seg + n_ss + n_det,
        VariableKind.SCENE: n_seg + n_ss + n_det + C,
    }
    variables = (
        [Variable(VariableKind.SEGMENT, C, i) for i in range(n_seg)]
        + [Variable(VariableKind.SUPERSEGMENT, C, j) for j in range(n_ss)]
        + [Variable(VariableKind.DETECTION, 2, i) for i in range(n_det)]
        + [Variable(VariableKind.CLASS_PRESENCE, 2, k) for k in range(C)]
        + [Variable(VariableKind.SCENE, C_l, 0)]
    )
    x = lambda i: offsets[VariableKind.SEGMENT] + i  # noqa: E731
    y = lambda j: offsets[VariableKind.SUPERSEGMENT] + j  # noqa: E731
    b = lambda i: offsets[VariableKind.DETECTION] + i  # noqa: E731
    z = lambda k: offsets[VariableKind.CLASS_PRESENCE] + k  # noqa: E731
    s = offsets[VariableKind.SCENE]

    factors: List[Factor] = []
    for template, table in ((Template.SEG_UNARY, bundle.seg_unary), (Template.SEG_UNARY_AUX, bundle.seg_unary_aux)):
        if table is not None:
            if np.shape(table) != (n_seg, C):
                raise GraphBuildError(f"{inst.id}: {template.name} table shape {np.shape(table)} != {(n_seg, C)}")
            logs = log_floor(table)
            factors.extend(Factor(template, (x(i),), logs[i]) for i in range(n_seg))

    if bundle.supseg_unary is not None:
        if np.shape(bundle.supseg_unary) != (n_ss, C):
            raise GraphBuildError(
                f"{inst.id}: super-segment table shape {np.shape(bundle.supseg_unary)} != {(n_ss, C)}"
            )
        logs = log_floor(bundle.supseg_unary)
        factors.extend(Factor(Template.SUPSEG_UNARY, (y(j),), logs[j]) for j in range(n_ss))

    if bundle.pn:
        agree = np.eye(C)
        factors.extend(Factor(Template.PN, (x(i), y(inst.parent(i))), agree) for i in range(n_seg))

    if bundle.class_unary is not None:
        p = np.asarray(bundle.class_unary, dtype=float)
        factors.extend(Factor(Template.CLASS_UNARY, (z(k),), log_floor([1.0 - p[k], p[k]])) for k in range(C))

    if bundle.class_tree is not None:
        factors.extend(
            Factor(Template.CLASS_TREE, (z(e.i), z(e.k)), np.asarray(e.log_table)) for e in bundle.class_tree
        )

    if bundle.detections is not None:
        conflict = np.zeros((2, 2))
        conflict[1, 0] = -1.0
        for i, det in enumerate(bundle.detections):
            factors.append(Factor(Template.DET_UNARY, (b(i),), np.array([0.0, det.sigma])))
            factors.append(Factor(Template.DET_CLASS, (b(i), z(det.class_id)), conflict))
        if bundle.shape_masks is not None:
            for i, (det, mask) in enumerate(zip(bundle.detections, bundle.shape_masks)):
                for seg, m in _shape_scores(inst, det.box, mask).items():
                    table = np.zeros((2, C))
                    table[1, det.class_id] = 2.0 * m - 1.0
                    factors.append(Factor(Template.SHAPE, (b(i), x(seg)), table))

    # Structural: a super-segment labelled k requires class k to be present.
    for j in range(n_ss):
        for k in range(C):
            table = np.zeros((C, 2))
            table[k, 0] = -1.0
            factors.append(Factor(Template.SUPSEG_CLASS, (y(j), z(k)), table))

    if bundle.scene_unary is not None:
        factors.append(Factor(Template.SCENE_UNARY, (s,), log_floor(bundle.scene_unary)))

    if bundle.scene_class is not None:
        q = np.asarray(bundle.scene_class, dtype=float)
        for k in range(C):
            table = log_floor(np.stack([1.0 - q[:, k], q[:, k]], axis=1))
            factors.append(Factor(Template.SCENE_CLASS, (s, z(k)), table))

    _check_factors(variables, factors)
    _check_clamps(variables, clamps or {})
    logger.debug(f"Built graph for {inst.id}: {len(variables)} variables, {len(factors)} factors")
    return FactorGraph(tuple(variables), tuple(factors), weights, dict(clamps or {}), offsets)


# --------------------------------------------------------------------------
# Scoring
# --------------------------------------------------------------------------


def _check_assignment(g: FactorGraph, a: Sequence[int]) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    if a.shape != (g.n_vars,):
        raise ValueError(f"assignment has {a.size} labels, graph has {g.n_vars} variables")
    bad = np.flatnonzero((a < 0) | (a >= g.domains))
    if bad.size:
        raise ValueError(f"label {int(a[bad[0]])} outside domain of variable {int(bad[0])}")
    return a


def _entries(g: FactorGraph, a: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Base-table entry of every factor at `a`, with the factor's template."""
    arr = graph_arrays(g)
    unary = arr.unary_base[np.arange(arr.unary_vars.size), a[arr.unary_vars]]
    pair = arr.pair_base[np.arange(arr.pair_a.size), a[arr.pair_a], a[arr.pair_b]]
    return np.concatenate([unary, pair]), np.concatenate([arr.unary_templates, arr.pair_templates])


def template_features(g: FactorGraph, a: Sequence[int]) -> np.ndarray:
    """Per-template sum of base-table entries at `a`."""
    entries, templates = _entries(g, _check_assignment(g, a))
    return np.bincount(templates, weights=entries, minlength=N_TEMPLATES).astype(float)


def score(g: FactorGraph, a: Sequence[int]) -> float:
    """Total weighted log-score of an assignment."""
    entries, templates = _entries(g, _check_assignment(g, a))
    return float(g.weights[templates] @ entries)


# --------------------------------------------------------------------------
# Structure
# --------------------------------------------------------------------------


def to_networkx(g: FactorGraph) -> nx.Graph:
    graph = nx.Graph()
    graph.add_nodes_from(range(g.n_vars))
    graph.add_edges_from(f.scope for f in g.factors if len(f.scope) == 2)
    return graph


def is_connected(g: FactorGraph) -> bool:
    return g.n_vars == 0 or nx.is_connected(to_networkx(g))


def graph_to_dict(g: FactorGraph) -> Dict[str, Any]:
    """JSON-ready dump with stable ordering (variables by index, factors in build order)."""
    return {
        "variables": [{"kind": v.kind.value, "index": v.index, "domain": v.domain} for v in g.variables],
        "factors": [
            {"template": TEMPLATE_NAMES[f.template], "scope": list(f.scope), "table": g.table(f).tolist()}
            for f in g.factors
        ],
        "weights": dict(zip(TEMPLATE_NAMES, g.weights.tolist())),
        "clamps": {str(k): v for k, v in sorted(g.clamps.items())},
    }
