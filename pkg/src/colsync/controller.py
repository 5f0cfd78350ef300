"""Closed-loop vector field of the QR-based column-synchronization controller.

Every agent ``i`` holds a rotation ``Q_i`` (d x d) and an auxiliary upper
triangular ``R_i`` (k x k).  It only sees the relative columns
``Q_ij = Q_i^T Q_j[:, :k]`` and the neighbours' ``R_j``.  The controller is

    V_i   = sum_j a_ij (Q_ij R_j R_i^{-1} - E)        E = [I_k, 0]^T
    U_i   = [low(V_i), 0] - [low(V_i), 0]^T           (d x d, skew)
    U_ik  = low(V_i) - E low(V_i)^T E                 (first k columns of U_i)
    dR_i  = up((V_i - U_ik) R_i)
    dQ_i  = Q_i U_i
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import solve_triangular

from .exceptions import SingularR
from .graph import DirectedWeightedGraph
from .matops import ORTH_TOL, is_rotation, low, orthogonality_defect, up

__all__ = [
    "SINGULAR_R_TOL",
    "AgentState",
    "SwarmState",
    "ControlOutput",
    "relative_rotation_cols",
    "relative_r",
    "compute_V",
    "compute_U_full",
    "compute_U_k",
    "compute_R_dot",
    "agent_control",
    "closed_loop_derivative",
    "check_r_invertible",
    "ClosedLoopField",
]

SINGULAR_R_TOL = 1e-10


@dataclass(frozen=True)
class AgentState:
    Q: NDArray
    R: NDArray


@dataclass
class SwarmState:
    """Stacked agent states.

    Attributes
    ----------
    Q : ndarray, shape (n, d, d)
        Rotations of the agents.
    R : ndarray, shape (n, k, k)
        Upper triangular auxiliary variables with positive diagonals.
    """

    Q: NDArray
    R: NDArray

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        if self.Q.ndim != 3 or self.Q.shape[1] != self.Q.shape[2]:
            raise ValueError(f"Q must have shape (n, d, d), got {self.Q.shape}")
        if self.R.ndim != 3 or self.R.shape[1] != self.R.shape[2]:
            raise ValueError(f"R must have shape (n, k, k), got {self.R.shape}")
        if self.R.shape[0] != self.Q.shape[0]:
            raise ValueError("Q and R disagree on the number of agents")
        n, d, k = self.n, self.d, self.k
        if d < 2 or not 1 <= k <= d - 1:
            raise ValueError(f"need d >= 2 and 1 <= k <= d-1, got d={d}, k={k}")

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def d(self) -> int:
        return self.Q.shape[1]

    @property
    def k(self) -> int:
        return self.R.shape[1]

    @property
    def agents(self) -> list[AgentState]:
        return [AgentState(self.Q[i], self.R[i]) for i in range(self.n)]

    def __getitem__(self, i) -> AgentState:
        return AgentState(self.Q[i], self.R[i])

    @classmethod
    def from_agents(cls, agents) -> "SwarmState":
        agents = list(agents)
        return cls(np.stack([a.Q for a in agents]), np.stack([a.R for a in agents]))

    def Qk(self) -> NDArray:
        """The synchronized columns, shape (n, d, k)."""
        return self.Q[:, :, : self.k]

    def Z(self) -> NDArray:
        """Products ``Q_i[:, :k] R_i``, shape (n, d, k)."""
        return self.Qk() @ self.R

    def copy(self) -> "SwarmState":
        return SwarmState(self.Q.copy(), self.R.copy())

    def validate(self, orth_tol: float = ORTH_TOL) -> None:
        """Raise ``ValueError`` (or ``SingularR``) if any invariant is violated."""
        for i in range(self.n):
            if not is_rotation(self.Q[i], orth_tol):
                raise ValueError(
                    f"Q of agent {i + 1} is not in SO(d) "
                    f"(defect {orthogonality_defect(self.Q[i]):.2e})"
                )
            if np.any(np.tril(self.R[i], -1)):
                raise ValueError(f"R of agent {i + 1} is not upper triangular")
        check_r_invertible(self.R)


@dataclass(frozen=True)
class ControlOutput:
    V: NDArray
    U_full: NDArray
    U_k: NDArray
    R_dot: NDArray


def check_r_invertible(R: NDArray, time: float | None = None) -> None:
    """Raise ``SingularR`` for the first agent whose diagonal is (near) degenerate."""
    diag = np.diagonal(R, axis1=1, axis2=2)
    for i, di in enumerate(diag):
        dmax = di.max()
        if dmax <= 0 or di.min() <= SINGULAR_R_TOL * dmax:
            raise SingularR(i, time, f"diag={di}")


def relative_rotation_cols(Qi: NDArray, Qj: NDArray, k: int) -> NDArray:
    """``Q_i^T Q_j[:, :k]``: agent j's first k columns seen from frame i."""
    return Qi.T @ Qj[:, :k]


def _right_solve(B: NDArray, R: NDArray) -> NDArray:
    """``B R^{-1}`` for upper triangular ``R`` without forming the inverse."""
    return solve_triangular(R, B.T, trans="T", lower=False, check_finite=False).T


def relative_r(Ri: NDArray, Rj: NDArray) -> NDArray:
    """``R_j R_i^{-1}`` by triangular solve."""
    d = np.diag(Ri)
    if d.max() <= 0 or d.min() <= SINGULAR_R_TOL * d.max():
        raise SingularR(None, None, "relative_r received a singular R_i")
    return np.triu(_right_solve(Rj, Ri))


def _selector(d: int, k: int) -> NDArray:
    return np.eye(d, k)


def compute_V(i: int, swarm: SwarmState, g: DirectedWeightedGraph) -> NDArray:
    """Feedback term of agent ``i`` from relative information only.

    Uses linearity of the neighbour sum: the ``R_i^{-1}`` factor is applied
    once to ``sum_j a_ij Q_ij R_j`` (accumulated in ascending ``j``).
    """
    d, k = swarm.d, swarm.k
    nbrs = g.neighbors(i)
    if not nbrs:
        return np.zeros((d, k))
    Qi, Ri = swarm.Q[i], swarm.R[i]
    di = np.diag(Ri)
    if di.max() <= 0 or di.min() <= SINGULAR_R_TOL * di.max():
        raise SingularR(i)
    acc = np.zeros((d, k))
    deg = 0.0
    for j in nbrs:
        a = g.weights[(i, j)]
        dj = np.diag(swarm.R[j])
        if dj.max() <= 0 or dj.min() <= SINGULAR_R_TOL * dj.max():
            raise SingularR(j)
        acc += a * (relative_rotation_cols(Qi, swarm.Q[j], k) @ swarm.R[j])
        deg += a
    V = _right_solve(acc, Ri)
    V[:k, :k] -= deg * np.eye(k)
    return V


def compute_U_full(V: NDArray) -> NDArray:
    """Skew-symmetric ``[low(V), 0] - [low(V), 0]^T``."""
    d, k = V.shape
    P = np.zeros((d, d))
    P[:, :k] = low(V)
    return P - P.T


def compute_U_k(V: NDArray) -> NDArray:
    """``low(V) - E low(V)^T E``; equals the first k columns of ``compute_U_full``."""
    d, k = V.shape
    Lv = low(V)
    E = _selector(d, k)
    return Lv - E @ (Lv.T @ E)


def compute_R_dot(V: NDArray, U_k: NDArray, R: NDArray) -> NDArray:
    return up((V - U_k) @ R)


def agent_control(i: int, swarm: SwarmState, g: DirectedWeightedGraph) -> ControlOutput:
    V = compute_V(i, swarm, g)
    U_full = compute_U_full(V)
    U_k = compute_U_k(V)
    return ControlOutput(V, U_full, U_k, compute_R_dot(V, U_k, swarm.R[i]))


def closed_loop_derivative(
    swarm: SwarmState, g: DirectedWeightedGraph
) -> tuple[NDArray, NDArray]:
    """Time derivatives ``(dQ, dR)`` of the whole swarm, shapes (n,d,d), (n,k,k)."""
    if g.n != swarm.n:
        raise ValueError(f"graph has {g.n} nodes but swarm has {swarm.n} agents")
    dQ = np.empty_like(swarm.Q)
    dR = np.empty_like(swarm.R)
    for i in range(swarm.n):
        c = agent_control(i, swarm, g)
        dQ[i] = swarm.Q[i] @ c.U_full
        dR[i] = c.R_dot
    return dQ, dR


class ClosedLoopField:
    """Batched evaluation of the closed loop over all agents at once.

    Mathematically identical to :func:`closed_loop_derivative`; the neighbour
    sums become one weighted product with the adjacency matrix and the
    triangular solves are vectorized across agents.  Used by the integrator.
    """

    def __init__(self, g: DirectedWeightedGraph, d: int, k: int):
        self.g = g
        self.n, self.d, self.k = g.n, d, k
        W = np.zeros((g.n, g.n))
        for (i, j), w in g.weights.items():
            W[i, j] = w
        self.W = W
        self.deg = np.array([sum(g.weights[(i, j)] for j in g.neighbors(i)) for i in range(g.n)])
        self.has_nbrs = self.deg > 0
        self._low_mask = np.tril(np.ones((d, k)), -1)

    def controls(self, Q: NDArray, R: NDArray, time: float | None = None):
        """Return ``(V, U_full, R_dot)`` with shapes (n,d,k), (n,d,d), (n,k,k)."""
        n, d, k = self.n, self.d, self.k
        diag = np.diagonal(R, axis1=1, axis2=2)
        dmax = diag.max(axis=1)
        bad = (dmax <= 0) | (diag.min(axis=1) <= SINGULAR_R_TOL * dmax)
        if np.any(bad):
            raise SingularR(int(np.argmax(bad)), time)
        Z = Q[:, :, :k] @ R
        S = np.einsum("ij,jab->iab", self.W, Z)
        B = Q.transpose(0, 2, 1) @ S
        # V R = B, solved column by column (R upper triangular)
        V = np.empty_like(B)
        for c in range(k):
            rhs = B[:, :, c] - np.einsum("nam,nm->na", V[:, :, :c], R[:, :c, c])
            V[:, :, c] = rhs / R[:, c, c][:, None]
        V[:, :k, :k] -= self.deg[:, None, None] * np.eye(k)
        V[~self.has_nbrs] = 0.0
        P = np.zeros((n, d, d))
        P[:, :, :k] = V * self._low_mask
        U = P - P.transpose(0, 2, 1)
        R_dot = np.triu(((V - U[:, :, :k]) @ R)[:, :k, :])
        return V, U, R_dot

    def __call__(self, Q: NDArray, R: NDArray, time: float | None = None):
        _, U, R_dot = self.controls(Q, R, time)
        return Q @ U, R_dot
