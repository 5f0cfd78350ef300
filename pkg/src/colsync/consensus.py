"""Linear consensus protocol on d x k matrices.

``dZ_i/dt = sum_j a_ij (Z_j - Z_i)``, i.e. ``dZ/dt = -(L kron I_d) Z`` for the
stacked state.  The closed loop of the controller is the positive-diagonal QR
factorization of this flow, so it serves as an exact oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import expm

from .graph import DirectedWeightedGraph, laplacian, left_null_vector

__all__ = [
    "ConsensusState",
    "consensus_derivative",
    "consensus_derivative_stacked",
    "consensus_exact",
    "consensus_limit",
    "hull_diameter",
    "slowest_rate",
    "long_horizon",
    "full_rank_mask",
]


@dataclass
class ConsensusState:
    """Stacked consensus variables ``Z`` of shape (n, d, k)."""

    Z: NDArray

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=float)
        if self.Z.ndim != 3:
            raise ValueError(f"Z must have shape (n, d, k), got {self.Z.shape}")

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    @property
    def d(self) -> int:
        return self.Z.shape[1]

    @property
    def k(self) -> int:
        return self.Z.shape[2]

    def copy(self) -> "ConsensusState":
        return ConsensusState(self.Z.copy())


def full_rank_mask(state: ConsensusState, rtol: float = 1e-10) -> NDArray:
    """Per-agent flag: does ``Z_i`` have full column rank?"""
    s = np.linalg.svd(state.Z, compute_uv=False)
    return s[:, -1] > rtol * np.maximum(s[:, 0], np.finfo(float).tiny)


def consensus_derivative(state: ConsensusState, g: DirectedWeightedGraph) -> NDArray:
    """Neighbour-sum form, accumulated in ascending neighbour order."""
    if g.n != state.n:
        raise ValueError(f"graph has {g.n} nodes but state has {state.n} agents")
    Z = state.Z
    dZ = np.zeros_like(Z)
    for i in range(state.n):
        for j in g.neighbors(i):
            dZ[i] += g.weights[(i, j)] * (Z[j] - Z[i])
    return dZ


def consensus_derivative_stacked(state: ConsensusState, g: DirectedWeightedGraph) -> NDArray:
    """``-(L kron I_d)`` applied to the (n d) x k stacked state."""
    n, d, k = state.Z.shape
    A = np.kron(laplacian(g), np.eye(d))
    return -(A @ state.Z.reshape(n * d, k)).reshape(n, d, k)


def consensus_exact(Z0: ConsensusState, g: DirectedWeightedGraph, t: float) -> ConsensusState:
    """Closed-form solution at time ``t``.

    Only the n x n matrix ``exp(-L t)`` is formed; the Kronecker factor
    ``I_d`` acts blockwise.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    if t == 0:
        return Z0.copy()
    A = expm(-laplacian(g) * t)
    return ConsensusState(np.einsum("ij,jab->iab", A, Z0.Z))


def slowest_rate(g: DirectedWeightedGraph) -> float:
    """Smallest real part among the nonzero Laplacian eigenvalues."""
    ev = np.linalg.eigvals(laplacian(g))
    re = np.sort(ev.real)
    scale = max(1.0, np.abs(ev).max())
    nz = re[re > 1e-10 * scale]
    if nz.size == 0:
        raise ValueError("Laplacian has no nonzero eigenvalue")
    return float(nz[0])


def long_horizon(g: DirectedWeightedGraph) -> float:
    """Time after which the consensus transient is below ``e^-50``."""
    return 50.0 / slowest_rate(g)


def consensus_limit(Z0: ConsensusState, g: DirectedWeightedGraph) -> NDArray:
    """Common limit ``sum_i w_i Z_i(0)`` with ``w`` the left null vector of ``L``."""
    w = left_null_vector(laplacian(g))
    return np.einsum("i,iab->ab", w, Z0.Z)


def hull_diameter(state: ConsensusState) -> float:
    """Largest pairwise Frobenius distance between the ``Z_i``."""
    Z = state.Z
    n = Z.shape[0]
    best = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            best = max(best, float(np.linalg.norm(Z[i] - Z[j])))
    return best
