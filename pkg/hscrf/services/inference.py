"""MAP inference: exhaustive enumeration for small graphs and damped max-sum message passing."""

from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np
from scipy.special import expit

from hscrf.services.factor_graph import FactorGraph, GraphArrays, VariableKind, graph_arrays, score
from hscrf.utils.errors import GraphTooLarge
from hscrf.utils.logger import get_logger

logger = get_logger(__name__)

MAX_EXACT_STATES = 10**7
NEG = -1e9


@dataclass(frozen=True, eq=False)
class InferenceResult:
    assignment: np.ndarray
    score: float
    converged: bool
    iterations: int
    beliefs: Optional[np.ndarray] = None  # max-marginals (n_vars x max domain), loopy only

    def to_dict(self) -> Dict[str, Any]:
        return {
            "assignment": self.assignment.tolist(),
            "score": self.score,
            "converged": self.converged,
            "iterations": self.iterations,
        }


def _unary_potentials(g: FactorGraph, bonus: Optional[np.ndarray]) -> np.ndarray:
    """Padded (n_vars x D) sum of weighted unary tables, bonus and clamps; NEG marks impossible labels."""
    arr = graph_arrays(g)
    domains = g.domains
    D = arr.D
    U = np.zeros((g.n_vars, D))
    np.add.at(U, arr.unary_vars, g.weights[arr.unary_templates][:, None] * arr.unary_base)
    invalid = np.arange(D)[None, :] >= domains[:, None]
    U[invalid] = NEG
    if bonus is not None:
        bonus = np.asarray(bonus, dtype=float)
        U[:, : bonus.shape[1]] += np.where(invalid[:, : bonus.shape[1]], 0.0, bonus)
    for v, label in g.clamps.items():
        keep = U[v, label]
        U[v, :] = NEG
        U[v, label] = keep
    return U


def map_exact(g: FactorGraph, bonus: Optional[np.ndarray] = None) -> InferenceResult:
    """Globally optimal assignment by enumerating the joint state space.

    Ties go to the lexicographically smallest assignment. `bonus` adds an
    (n_vars x D) per-label reward during the search only; the reported score is
    the plain graph score.

    Raises:
        GraphTooLarge: More than 10^7 joint states after clamping
    """
    n = g.n_vars
    if n == 0:
        return InferenceResult(np.zeros(0, dtype=np.int64), 0.0, True, 0)
    labels = [
        np.array([g.clamps[v]]) if v in g.clamps else np.arange(var.domain) for v, var in enumerate(g.variables)
    ]
    sizes = [len(lab) for lab in labels]
    states = int(np.prod(sizes, dtype=object))
    if states > MAX_EXACT_STATES:
        raise GraphTooLarge(f"{states} joint states exceed the enumeration limit of {MAX_EXACT_STATES}")

    total = np.zeros(sizes)
    extra = None if bonus is None else np.asarray(bonus, dtype=float)
    for v in range(n):
        if extra is not None:
            shape = [1] * n
            shape[v] = sizes[v]
            total += extra[v, labels[v]].reshape(shape)
    for f in g.factors:
        table = g.table(f)
        shape = [1] * n
        if len(f.scope) == 1:
            (u,) = f.scope
            shape[u] = sizes[u]
            total += table[labels[u]].reshape(shape)
        else:
            u, v = f.scope
            sub = table[np.ix_(labels[u], labels[v])]
            if u > v:
                u, v, sub = v, u, sub.T
            shape[u], shape[v] = sizes[u], sizes[v]
            total += sub.reshape(shape)

    flat = int(np.argmax(total))
    index = np.unravel_index(flat, sizes)
    assignment = np.array([labels[v][i] for v, i in enumerate(index)], dtype=np.int64)
    return InferenceResult(assignment, score(g, assignment), True, 0)


def _pairwise_tables(g: FactorGraph, arr: GraphArrays) -> np.ndarray:
    weighted = g.weights[arr.pair_templates][:, None, None] * arr.pair_base
    return np.where(arr.pair_valid, weighted, NEG)


def _beliefs(U: np.ndarray, arr: GraphArrays, m_a: np.ndarray, m_b: np.ndarray) -> np.ndarray:
    return U + arr.incidence_a @ m_a + arr.incidence_b @ m_b


def _normalize(m: np.ndarray, valid: np.ndarray) -> np.ndarray:
    top = np.where(valid, m, -np.inf).max(axis=1, keepdims=True)
    return np.maximum(np.where(valid, m - top, NEG), NEG)


def _decode(
    g: FactorGraph,
    arr: GraphArrays,
    bel: np.ndarray,
    T: np.ndarray,
    m_a: np.ndarray,
    m_b: np.ndarray,
) -> np.ndarray:
    """Sequential decoding in breadth-first order, conditioning each variable on decoded neighbours.

    Exact on trees; on loopy graphs it gives a consistent starting point for the polish.
    """
    fa, fb = arr.pair_a, arr.pair_b
    domains = g.domains
    a = np.full(g.n_vars, -1, dtype=np.int64)
    for v in arr.bfs_order:
        local = bel[v].copy()
        for f, side in arr.incident[v]:
            other = fb[f] if side == 0 else fa[f]
            if a[other] < 0:
                continue
            if side == 0:
                local += T[f, :, a[other]] - m_a[f]
            else:
                local += T[f, a[other], :] - m_b[f]
        a[v] = int(np.argmax(local[: domains[v]]))
    return a


def _polish(g: FactorGraph, arr: GraphArrays, a: np.ndarray, U: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Iterated conditional modes: per-variable best response in index order, ties keep the current label."""
    fa, fb = arr.pair_a, arr.pair_b
    domains = g.domains
    a = a.copy()
    for _ in range(100):
        changed = False
        for v in range(g.n_vars):
            if v in g.clamps:
                continue
            local = U[v, : domains[v]].copy()
            for f, side in arr.incident[v]:
                if side == 0:
                    local += T[f, : domains[v], a[fb[f]]]
                else:
                    local += T[f, a[fa[f]], : domains[v]]
            best = int(np.argmax(local))
            if local[best] > local[a[v]] + 1e-12:
                a[v] = best
                changed = True
        if not changed:
            break
    return a


def map_loopy(
    g: FactorGraph,
    damping: float = 0.5,
    max_iters: int = 200,
    tol: float = 1e-5,
    bonus: Optional[np.ndarray] = None,
) -> InferenceResult:
    """Damped synchronous max-sum over all pairwise factors at once.

    Messages are updated in parallel each iteration; `converged` is true iff
    the largest message change fell below `tol`. Beliefs are decoded
    breadth-first and then polished by coordinate ascent.
    """
    if not 0.0 <= damping < 1.0:
        raise ValueError("damping must be in [0, 1)")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    n = g.n_vars
    if n == 0:
        return InferenceResult(np.zeros(0, dtype=np.int64), 0.0, True, 0, np.zeros((0, 1)))

    arr = graph_arrays(g)
    domains = g.domains
    fa, fb = arr.pair_a, arr.pair_b
    U = _unary_potentials(g, bonus)
    T = _pairwise_tables(g, arr)
    labels = np.arange(arr.D)[None, :]
    valid_a = labels < domains[fa][:, None]
    valid_b = labels < domains[fb][:, None]
    m_a = np.zeros((fa.size, arr.D))
    m_b = np.zeros((fb.size, arr.D))

    converged = fa.size == 0
    iterations = 0
    while not converged and iterations < max_iters:
        iterations += 1
        bel = _beliefs(U, arr, m_a, m_b)
        q_a = bel[fa] - m_a
        q_b = bel[fb] - m_b
        new_b = _normalize((T + q_a[:, :, None]).max(axis=1), valid_b)
        new_a = _normalize((T + q_b[:, None, :]).max(axis=2), valid_a)
        new_a = damping * m_a + (1.0 - damping) * new_a
        new_b = damping * m_b + (1.0 - damping) * new_b
        delta = max(
            float(np.abs(new_a - m_a)[valid_a].max(initial=0.0)),
            float(np.abs(new_b - m_b)[valid_b].max(initial=0.0)),
        )
        m_a, m_b = new_a, new_b
        converged = delta < tol

    bel = _beliefs(U, arr, m_a, m_b)
    a = _decode(g, arr, bel, T, m_a, m_b)
    a = _polish(g, arr, a, U, T)
    if not converged:
        logger.debug(f"Max-sum stopped after {iterations} iterations without converging")
    return InferenceResult(a, score(g, a), converged, iterations, bel)


def detection_confidence(g: FactorGraph, result: InferenceResult) -> np.ndarray:
    """sigma(belief[b=1] - belief[b=0]) per detection variable, in detection order."""
    idx = g.indices(VariableKind.DETECTION)
    if idx.size == 0:
        return np.zeros(0)
    if result.beliefs is None:
        return result.assignment[idx].astype(float)
    bel = result.beliefs[idx]
    return expit(bel[:, 1] - bel[:, 0])


def run_map(
    g: FactorGraph,
    method: str = "loopy",
    damping: float = 0.5,
    max_iters: int = 200,
    tol: float = 1e-5,
    bonus: Optional[np.ndarray] = None,
) -> InferenceResult:
    logger.debug(f"MAP ({method}) over {g.n_vars} variables and {len(g.factors)} factors")
    if method == "exact":
        return map_exact(g, bonus=bonus)
    if method == "loopy":
        return map_loopy(g, damping=damping, max_iters=max_iters, tol=tol, bonus=bonus)
    raise ValueError(f"unknown inference method {method!r}")
