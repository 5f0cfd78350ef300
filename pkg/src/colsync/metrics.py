"""Synchronization diagnostics and convergence detection.

Agent 1 (index 0) is the reference: the synchronization errors are
``||Q_i(t, c) - Q_1(t, c)||_F`` and ``||R_i(t, c) - R_1(t, c)||_F`` where
``(t, c)`` selects the first ``c`` columns (upper-left c x c block for R).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .consensus import hull_diameter
from .controller import ClosedLoopField
from .integrator import TrajectoryRecord

__all__ = ["SyncReport", "compute_report", "detect_convergence", "DEFAULT_TOL", "DEFAULT_DWELL"]

DEFAULT_TOL = 1e-6
DEFAULT_DWELL = 1.0


@dataclass
class SyncReport:
    """Per-snapshot diagnostic series.

    ``q_sync_error[c]`` and ``r_sync_error[c]`` have shape (m, n) for m
    snapshots; ``c`` ranges over ``1..d`` for Q and ``1..k`` for R.  Closed
    loop reports also carry ``u_norm`` (``||U_i(t,k)||_F``) and ``rdot_norm``
    (``||dR_i/dt||_F``).  Consensus reports only carry ``z_diameter``.
    """

    kind: str
    times: NDArray
    k: int | None = None
    q_sync_error: dict[int, NDArray] = field(default_factory=dict)
    r_sync_error: dict[int, NDArray] = field(default_factory=dict)
    u_norm: NDArray | None = None
    rdot_norm: NDArray | None = None
    z_diameter: NDArray | None = None
    converged_at: float | None = None
    limit_Q_cols: NDArray | None = None

    @property
    def q_error(self) -> NDArray:
        """Synchronization error of the controlled columns, shape (m, n)."""
        return self.q_sync_error[self.k]

    @property
    def r_error(self) -> NDArray:
        return self.r_sync_error[self.k]

    def final_errors(self) -> dict[str, float]:
        if self.kind != "closed_loop":
            return {"z_diameter": float(self.z_diameter[-1])}
        out = {f"q_sync_error_k{c}": float(v[-1].max()) for c, v in self.q_sync_error.items()}
        out.update({f"r_sync_error_k{c}": float(v[-1].max()) for c, v in self.r_sync_error.items()})
        out["u_norm"] = float(self.u_norm[-1].max())
        out["rdot_norm"] = float(self.rdot_norm[-1].max())
        return out


def compute_report(
    traj: TrajectoryRecord, tol: float = DEFAULT_TOL, dwell: float = DEFAULT_DWELL
) -> SyncReport:
    times = np.asarray(traj.times)
    if traj.kind == "consensus":
        diam = np.array([hull_diameter(s) for s in traj.snapshots])
        return SyncReport("consensus", times, z_diameter=diam)
    if traj.kind != "closed_loop":
        raise ValueError(f"unknown trajectory kind {traj.kind!r}")

    Q = traj.Q()  # (m, n, d, d)
    R = traj.R()  # (m, n, k, k)
    d, k = Q.shape[2], R.shape[2]
    q_err = {
        c: np.linalg.norm(Q[:, :, :, :c] - Q[:, :1, :, :c], axis=(2, 3)) for c in range(1, d + 1)
    }
    r_err = {
        c: np.linalg.norm(R[:, :, :c, :c] - R[:, :1, :c, :c], axis=(2, 3)) for c in range(1, k + 1)
    }
    f = ClosedLoopField(traj.graph, d, k)
    u_norm = np.empty(Q.shape[:2])
    rdot_norm = np.empty(Q.shape[:2])
    for s in range(len(times)):
        _, U, R_dot = f.controls(Q[s], R[s])
        u_norm[s] = np.linalg.norm(U[:, :, :k], axis=(1, 2))
        rdot_norm[s] = np.linalg.norm(R_dot, axis=(1, 2))
    report = SyncReport("closed_loop", times, k, q_err, r_err, u_norm, rdot_norm)
    report.converged_at = detect_convergence(report, tol, dwell)
    if report.converged_at is not None:
        report.limit_Q_cols = Q[-1, :, :, :k].mean(axis=0)
    return report


def detect_convergence(report: SyncReport, tol: float = DEFAULT_TOL, dwell: float = DEFAULT_DWELL):
    """Earliest snapshot time after which the controlled-column error stays <= tol.

    The error must stay below ``tol`` at every later recorded time and the
    remaining record must span at least ``dwell``.  Returns ``None`` otherwise.
    """
    if not (tol > 0 and dwell > 0):
        raise ValueError("tol and dwell must be positive")
    if report.kind != "closed_loop":
        return None
    worst = report.q_error.max(axis=1)
    times = report.times
    above = np.nonzero(worst > tol)[0]
    start = 0 if above.size == 0 else above[-1] + 1
    if start >= len(times):
        return None
    t_star = float(times[start])
    if times[-1] - t_star < dwell:
        return None
    return t_star
