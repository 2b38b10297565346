"""Interaction graphs, virtual-hub augmentation and effective resistance."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import ContractError, DisconnectedError

EIG_CUTOFF = 1e-10


@dataclass
class InteractionGraph:
    """Directed graph over real agents; ``mask[i, j]`` iff ``(i, j)`` is an edge.

    In message passing, node ``i`` aggregates over ``{j : mask[i, j]}``.
    """

    n_real: int
    edges: list = field(default_factory=list)

    def __post_init__(self):
        self.edges = sorted({(int(i), int(j)) for i, j in self.edges})
        for i, j in self.edges:
            if i == j:
                raise ContractError(f"self-loop at node {i}")
            if not (0 <= i < self.n_real and 0 <= j < self.n_real):
                raise ContractError(f"edge ({i}, {j}) out of range for {self.n_real} nodes")

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros((self.n_real, self.n_real), dtype=bool)
        for i, j in self.edges:
            m[i, j] = True
        return m

    @property
    def n_nodes(self) -> int:
        return self.n_real

    def undirected_edges(self) -> set:
        return {(min(i, j), max(i, j)) for i, j in self.edges}

    @classmethod
    def from_mask(cls, mask) -> "InteractionGraph":
        mask = np.asarray(mask, dtype=bool)
        ii, jj = np.nonzero(mask)
        return cls(mask.shape[0], list(zip(ii.tolist(), jj.tolist())))

    @classmethod
    def chain(cls, n) -> "InteractionGraph":
        return cls(n, [(i, i + 1) for i in range(n - 1)])


@dataclass
class AugmentedGraph:
    """Base graph plus ``n_virtual`` hubs, each linked both ways to every real node.

    Virtual nodes are numbered ``n_real .. n_real + n_virtual - 1``.
    """

    base: InteractionGraph
    n_virtual: int

    @property
    def n_real(self) -> int:
        return self.base.n_real

    @property
    def n_nodes(self) -> int:
        return self.base.n_real + self.n_virtual

    @property
    def virtual_edges(self) -> list:
        out = []
        for v in range(self.n_real, self.n_nodes):
            for i in range(self.n_real):
                out.append((i, v))
                out.append((v, i))
        return out

    @property
    def edges(self) -> list:
        return list(self.base.edges) + self.virtual_edges

    def undirected_edges(self) -> set:
        return {(min(i, j), max(i, j)) for i, j in self.edges}


def augment_with_virtual(graph: InteractionGraph, n_virtual: int) -> AugmentedGraph:
    if n_virtual < 1:
        raise ContractError(f"need at least one virtual node, got {n_virtual}")
    return AugmentedGraph(graph, int(n_virtual))


def knn_graph(embeddings, k: int) -> InteractionGraph:
    """Each node links to its ``min(k, N-1)`` most cosine-similar other nodes.

    Ties go to the lower index. Pairs involving a zero-norm embedding have
    similarity -inf and never become edges.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ContractError(f"embeddings must be N x D with N >= 1, got {x.shape}")
    if k < 0:
        raise ContractError(f"k must be non-negative, got {k}")
    n = x.shape[0]
    norms = np.sqrt((x * x).sum(axis=1))
    ok = norms > 0.0
    unit = np.where(ok[:, None], x / np.where(ok, norms, 1.0)[:, None], 0.0)
    # elementwise product then sum: each pair's value is independent of row order
    sim = (unit[:, None, :] * unit[None, :, :]).sum(axis=-1)
    sim[~ok, :] = -np.inf
    sim[:, ~ok] = -np.inf
    np.fill_diagonal(sim, -np.inf)

    kk = min(k, n - 1)
    edges = []
    idx = np.arange(n)
    for i in range(n):
        order = np.lexsort((idx, -sim[i]))
        for j in order[:kk]:
            if np.isfinite(sim[i, j]):
                edges.append((i, int(j)))
    return InteractionGraph(n, edges)


def laplacian(graph) -> np.ndarray:
    """``D - A`` over the symmetrized unit-weight adjacency."""
    n = graph.n_nodes
    A = np.zeros((n, n))
    for i, j in graph.undirected_edges():
        A[i, j] = A[j, i] = 1.0
    return np.diag(A.sum(axis=1)) - A


def laplacian_pinv(L: np.ndarray) -> np.ndarray:
    """Moore-Penrose pseudoinverse via eigendecomposition, dropping eigenvalues below 1e-10."""
    w, U = np.linalg.eigh(L)
    keep = w > EIG_CUTOFF
    return (U[:, keep] / w[keep]) @ U[:, keep].T


def components(graph) -> np.ndarray:
    A = np.abs(laplacian(graph)) > 0
    np.fill_diagonal(A, False)
    _, labels = connected_components(A, directed=False)
    return labels


def resistance_matrix(graph) -> np.ndarray:
    """All-pairs effective resistance; ``inf`` between different components."""
    P = laplacian_pinv(laplacian(graph))
    d = np.diag(P)
    R = d[:, None] + d[None, :] - 2.0 * P
    np.fill_diagonal(R, 0.0)
    labels = components(graph)
    R[labels[:, None] != labels[None, :]] = np.inf
    return R


def effective_resistance(graph, i: int, j: int) -> float:
    if i == j:
        return 0.0
    labels = components(graph)
    if labels[i] != labels[j]:
        raise DisconnectedError(f"nodes {i} and {j} lie in different components")
    P = laplacian_pinv(laplacian(graph))
    return float(P[i, i] + P[j, j] - 2.0 * P[i, j])


@dataclass(frozen=True)
class ResistanceRow:
    i: int
    j: int
    r_before: float | None
    r_after: float | None
    reduction_pct: float | None


def resistance_report(graph: InteractionGraph, n_virtual: int, allow_disconnected=False) -> list[ResistanceRow]:
    """Resistance of every unordered real pair before and after adding ``n_virtual`` hubs.

    A disconnected base graph raises unless ``allow_disconnected``, in which
    case the undefined entries are ``None``.
    """
    n = graph.n_real
    if n < 2:
        return []
    before = resistance_matrix(graph)
    after = resistance_matrix(augment_with_virtual(graph, n_virtual))
    rows = []
    for i in range(n):
        for j in range(i + 1, n):
            rb, ra = before[i, j], after[i, j]
            if not np.isfinite(rb) and not allow_disconnected:
                raise DisconnectedError(f"nodes {i} and {j} lie in different components")
            rb = float(rb) if np.isfinite(rb) else None
            ra = float(ra) if np.isfinite(ra) else None
            red = 100.0 * (rb - ra) / rb if rb is not None and ra is not None else None
            rows.append(ResistanceRow(i, j, rb, ra, red))
    return rows


REPORT_COLUMNS = ["i", "j", "r_before", "r_after", "reduction_pct"]


def _fmt(v):
    return "" if v is None else repr(float(v))


def report_to_csv(rows, prefix: dict | None = None) -> str:
    """CSV text for a resistance report; ``prefix`` adds leading constant columns."""
    prefix = prefix or {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(prefix) + REPORT_COLUMNS)
    for r in rows:
        w.writerow(list(prefix.values()) + [r.i, r.j, _fmt(r.r_before), _fmt(r.r_after), _fmt(r.reduction_pct)])
    return buf.getvalue()
