"""Directed weighted interaction graphs and their Laplacians.

Edge ``(i, j)`` means that agent ``i`` listens to agent ``j``, i.e. ``j`` is in
the neighbourhood of ``i``.  Nodes are 0-based inside the library and 1-based in
every external format (config files, CSV headers).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from numpy.typing import NDArray

from .exceptions import GraphError

__all__ = [
    "DirectedWeightedGraph",
    "is_quasi_strongly_connected",
    "find_centers",
    "is_strongly_connected",
    "laplacian",
    "left_null_vector",
    "complete_graph",
    "chain_graph",
    "random_qsc_graph",
    "observer_graph",
]

NULL_RANK_TOL = 1e-10


@dataclass(frozen=True)
class DirectedWeightedGraph:
    """Immutable directed graph with strictly positive edge weights.

    Parameters
    ----------
    n : int
        Number of nodes, labelled ``0 .. n-1``.
    weights : mapping
        ``(i, j) -> a_ij``; the keys form the edge set.
    """

    n: int
    weights: Mapping[tuple[int, int], float]
    _adj: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n < 1:
            raise GraphError(f"graph needs at least one node, got n={self.n}")
        clean = {}
        for (i, j), w in self.weights.items():
            i, j, w = int(i), int(j), float(w)
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise GraphError(f"edge ({i + 1}, {j + 1}) out of range for n={self.n}")
            if i == j:
                raise GraphError(f"self-loop at node {i + 1}")
            if not (w > 0 and np.isfinite(w)):
                raise GraphError(f"weight of edge ({i + 1}, {j + 1}) must be positive, got {w}")
            clean[(i, j)] = w
        adj = [[] for _ in range(self.n)]
        for i, j in clean:
            adj[i].append(j)
        object.__setattr__(self, "weights", dict(sorted(clean.items())))
        object.__setattr__(self, "_adj", tuple(tuple(sorted(a)) for a in adj))

    @classmethod
    def from_edges(cls, n: int, edges: Iterable, one_based: bool = True):
        """Build from ``(i, j, a_ij)`` triples (``(i, j)`` pairs get weight 1)."""
        off = 1 if one_based else 0
        weights = {}
        for e in edges:
            if len(e) == 2:
                i, j, w = e[0], e[1], 1.0
            elif len(e) == 3:
                i, j, w = e
            else:
                raise GraphError(f"edge entry must be [i, j] or [i, j, a_ij], got {e!r}")
            key = (int(i) - off, int(j) - off)
            if key in weights:
                raise GraphError(f"duplicate edge ({key[0] + 1}, {key[1] + 1})")
            weights[key] = w
        return cls(int(n), weights)

    def to_edges(self, one_based: bool = True) -> list[list]:
        off = 1 if one_based else 0
        return [[i + off, j + off, w] for (i, j), w in self.weights.items()]

    @property
    def edges(self) -> list[tuple[int, int]]:
        return list(self.weights)

    def neighbors(self, i: int) -> tuple[int, ...]:
        """Neighbourhood of ``i`` in ascending index order."""
        return self._adj[i]

    def weight(self, i: int, j: int) -> float:
        return self.weights.get((i, j), 0.0)

    def relabel(self, perm) -> "DirectedWeightedGraph":
        """Return the graph with node ``i`` renamed to ``perm[i]``."""
        return DirectedWeightedGraph(
            self.n, {(int(perm[i]), int(perm[j])): w for (i, j), w in self.weights.items()}
        )


def _reverse_reach(g: DirectedWeightedGraph, c: int) -> set[int]:
    """Nodes that have a directed path to ``c``."""
    radj = [[] for _ in range(g.n)]
    for i, j in g.weights:
        radj[j].append(i)
    seen = {c}
    queue = deque([c])
    while queue:
        v = queue.popleft()
        for u in radj[v]:
            if u not in seen:
                seen.add(u)
                queue.append(u)
    return seen


def find_centers(g: DirectedWeightedGraph) -> list[int]:
    """All nodes reachable by a directed path from every other node."""
    return [c for c in range(g.n) if len(_reverse_reach(g, c)) == g.n]


def is_quasi_strongly_connected(g: DirectedWeightedGraph) -> bool:
    """True iff the graph has a center (equivalently a rooted spanning tree)."""
    return any(len(_reverse_reach(g, c)) == g.n for c in range(g.n))


def is_strongly_connected(g: DirectedWeightedGraph) -> bool:
    return len(find_centers(g)) == g.n


def laplacian(g: DirectedWeightedGraph) -> NDArray[np.float64]:
    """Weighted Laplacian: out-weight sums on the diagonal, ``-a_ij`` off it."""
    L = np.zeros((g.n, g.n))
    for (i, j), w in g.weights.items():
        L[i, j] = -w
    for i in range(g.n):
        # ascending neighbour order keeps the diagonal sum reproducible
        L[i, i] = sum(g.weights[(i, j)] for j in g.neighbors(i))
    return L


def left_null_vector(L: NDArray[np.float64]) -> NDArray[np.float64]:
    """Non-negative ``w`` with ``w @ L = 0`` and ``sum(w) = 1``.

    Raises
    ------
    GraphError
        If the left null space is not one-dimensional.
    """
    L = np.asarray(L, dtype=float)
    n = L.shape[0]
    if L.shape != (n, n):
        raise GraphError(f"Laplacian must be square, got shape {L.shape}")
    if n == 1:
        return np.ones(1)
    _, s, vh = np.linalg.svd(L.T)
    smax = s[0]
    null_dim = int(np.sum(s <= NULL_RANK_TOL * smax)) if smax > 0 else n
    if null_dim != 1:
        raise GraphError(
            f"left null space has dimension {null_dim}; graph is not quasi-strongly connected"
        )
    w = vh[-1]
    w = w / w.sum()
    if w.min() < -1e-9:
        raise GraphError("left null vector has mixed signs; not a graph Laplacian")
    w = np.maximum(w, 0.0)
    return w / w.sum()


def complete_graph(n: int, weight: float = 1.0) -> DirectedWeightedGraph:
    return DirectedWeightedGraph(
        n, {(i, j): weight for i in range(n) for j in range(n) if i != j}
    )


def chain_graph(n: int, weight: float = 1.0) -> DirectedWeightedGraph:
    """``1 -> 2 -> ... -> n``; node ``n`` is the unique center."""
    return DirectedWeightedGraph(n, {(i, i + 1): weight for i in range(n - 1)})


def random_qsc_graph(
    n: int,
    rng: np.random.Generator,
    p: float = 0.5,
    weight_range: tuple[float, float] = (0.0, 1.0),
    max_retries: int = 1000,
) -> DirectedWeightedGraph:
    """Erdős-Rényi digraph redrawn until it is quasi-strongly connected.

    Weights are uniform on the open interval ``weight_range``.
    """
    lo, hi = weight_range
    if not (0 <= lo < hi):
        raise GraphError(f"invalid weight range {weight_range}")
    if not (0 < p <= 1):
        raise GraphError(f"edge probability must lie in (0, 1], got {p}")
    for _ in range(max_retries):
        mask = rng.random((n, n)) < p
        weights = {}
        for i in range(n):
            for j in range(n):
                if i != j and mask[i, j]:
                    w = rng.uniform(lo, hi)
                    while w <= 0:
                        w = rng.uniform(lo, hi)
                    weights[(i, j)] = w
        g = DirectedWeightedGraph(n, weights)
        if is_quasi_strongly_connected(g):
            return g
    raise GraphError(f"no quasi-strongly connected graph after {max_retries} draws")


def observer_graph(rng: np.random.Generator, n: int = 5) -> DirectedWeightedGraph:
    """Default experiment topology, quasi-strongly but not strongly connected.

    Agent 1 listens to every other agent and nobody listens to agent 1; agents
    ``2..n`` form a complete digraph.  Weights are uniform on (0, 1).
    """
    if n < 3:
        raise GraphError("observer topology needs n >= 3")
    pairs = [(0, j) for j in range(1, n)]
    pairs += [(i, j) for i in range(1, n) for j in range(1, n) if i != j]
    weights = {}
    for e in pairs:
        w = rng.uniform(0.0, 1.0)
        while w <= 0:
            w = rng.uniform(0.0, 1.0)
        weights[e] = w
    return DirectedWeightedGraph(n, weights)
