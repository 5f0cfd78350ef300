"""Adaptive Dormand-Prince 5(4) integration of the closed loop and the consensus flow.

Flattened closed-loop layout, agents in index order; per agent the d*d entries
of ``Q_i`` in column-major order followed by the k(k+1)/2 upper-triangle
entries of ``R_i`` in row-major order.  The strictly lower part of ``R_i`` is
never stored, so it stays exactly zero.  Consensus states store each ``Z_i``
column-major.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .consensus import ConsensusState, consensus_derivative
from .controller import ClosedLoopField, SwarmState, check_r_invertible
from .exceptions import ConfigError, RankDeficient, SingularR, StepSizeUnderflow
from .graph import DirectedWeightedGraph, is_quasi_strongly_connected
from .matops import complete_to_rotation, map_h, orthogonality_defect, project_to_so

__all__ = [
    "IntegratorConfig",
    "Event",
    "TrajectoryRecord",
    "EquivalenceResult",
    "dopri5",
    "pack_swarm",
    "unpack_swarm",
    "pack_consensus",
    "unpack_consensus",
    "integrate_closed_loop",
    "integrate_consensus",
    "equivalence_run",
    "swarm_from_consensus",
]

log = logging.getLogger(__name__)

# Dormand & Prince (1980) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# difference between the 5th- and embedded 4th-order weights
_E = np.array(
    [71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]
)

_SAFE = 0.9
_FAC_MIN = 0.2
_FAC_MAX = 10.0
_BETA = 0.04
_EXPO = 0.2 - 0.75 * _BETA


@dataclass
class IntegratorConfig:
    t_final: float = 10.0
    rel_tol: float = 1e-6
    abs_tol: float = 1e-9
    h_init: float = 1e-3
    h_min: float = 1e-12
    h_max: float | None = None  # None -> t_final / 10
    reproject_threshold: float = 1e-9
    record_stride: int = 1

    def __post_init__(self):
        self.validate()

    @property
    def h_max_eff(self) -> float:
        return self.h_max if self.h_max is not None else self.t_final / 10.0

    def validate(self) -> None:
        if not self.t_final > 0:
            raise ConfigError("t_final must be positive")
        for name in ("rel_tol", "abs_tol", "h_init", "h_min", "reproject_threshold"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.h_max is not None and not self.h_max > 0:
            raise ConfigError("h_max must be positive")
        if not (self.h_min < self.h_init <= self.h_max_eff):
            raise ConfigError("need h_min < h_init <= h_max")
        if int(self.record_stride) != self.record_stride or self.record_stride < 1:
            raise ConfigError("record_stride must be a positive integer")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    agent: int | None = None


@dataclass
class TrajectoryRecord:
    """Snapshots of one integration run.

    ``snapshots`` holds ``SwarmState`` objects for ``kind == "closed_loop"`` and
    ``ConsensusState`` objects for ``kind == "consensus"``.
    """

    kind: str
    times: NDArray
    snapshots: list
    graph: DirectedWeightedGraph
    events: list[Event] = field(default_factory=list)
    halted: bool = False
    n_accepted: int = 0
    n_rejected: int = 0
    n_evals: int = 0

    @property
    def final(self):
        return self.snapshots[-1]

    def __len__(self):
        return len(self.times)

    def Q(self) -> NDArray:
        return np.stack([s.Q for s in self.snapshots])

    def R(self) -> NDArray:
        return np.stack([s.R for s in self.snapshots])

    def Z(self) -> NDArray:
        return np.stack([s.Z() if self.kind == "closed_loop" else s.Z for s in self.snapshots])


def _rms(x):
    return float(np.sqrt(np.mean(x * x)))


def dopri5(
    fun: Callable[[float, NDArray], NDArray],
    y0: NDArray,
    cfg: IntegratorConfig,
    t_grid: NDArray | None = None,
    post_step: Callable[[float, NDArray], NDArray] | None = None,
    check: Callable[[float, NDArray], None] | None = None,
    on_stage_error: type[Exception] | tuple = (),
):
    """Integrate ``y' = fun(t, y)`` from 0 to ``cfg.t_final``.

    Returns ``(times, states, stats, exc)`` where ``exc`` is the exception
    raised by ``check`` (or by ``fun`` at the minimum step size) that halted
    the run, or ``None``.  Without ``t_grid``, every ``record_stride``-th
    accepted state is kept together with the first and last one; with a grid,
    steps are clipped so that exactly the grid times are recorded.
    """
    t_end = float(cfg.t_final)
    if t_grid is not None:
        stops = np.asarray(t_grid, dtype=float)
        if stops[0] != 0.0 or np.any(np.diff(stops) <= 0) or stops[-1] > t_end:
            raise ValueError("t_grid must start at 0, increase strictly and end by t_final")
        if stops[-1] < t_end:
            t_end = float(stops[-1])
        stop_iter = iter(stops[1:])
        next_stop = next(stop_iter, None)
    else:
        next_stop = t_end

    t = 0.0
    y = np.array(y0, dtype=float)
    times, states = [t], [y.copy()]
    h = min(cfg.h_init, cfg.h_max_eff)
    facold = 1e-4
    last_rejected = False
    stats = {"n_accepted": 0, "n_rejected": 0, "n_evals": 0}
    K = np.empty((7, y.size))
    k1_valid = False

    while t < t_end:
        if not k1_valid:
            K[0] = fun(t, y)
            stats["n_evals"] += 1
            k1_valid = True
        target = next_stop if next_stop is not None else t_end
        remaining = target - t
        h_step = min(h, remaining)
        # avoid leaving a sliver before the stop
        if remaining - h_step <= 1e-10 * max(1.0, abs(target)):
            h_step = remaining
        hits_stop = h_step == remaining
        try:
            for s in range(1, 7):
                ys = y + h_step * (np.asarray(_A[s]) @ K[:s])
                K[s] = fun(t + _C[s] * h_step, ys)
                stats["n_evals"] += 1
        except on_stage_error as exc:
            # stage landed outside the domain; treat as a rejected step
            h = 0.5 * h_step
            last_rejected = True
            stats["n_rejected"] += 1
            if h < cfg.h_min:
                if isinstance(exc, SingularR) and exc.time is None:
                    exc.time = t
                return np.array(times), states, stats, exc
            continue
        y_new = y + h_step * (_B @ K)
        err_vec = h_step * (_E @ K)
        scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(y), np.abs(y_new))
        err = _rms(err_vec / scale)

        fac11 = err**_EXPO
        if err <= 1.0:
            fac = fac11 / facold**_BETA
            fac = max(1.0 / _FAC_MAX, min(1.0 / _FAC_MIN, fac / _SAFE))
            h_new = h_step / fac
            if last_rejected:
                h_new = min(h_new, h_step)
            facold = max(err, 1e-4)
            last_rejected = False
            t = target if hits_stop else t + h_step
            y = y_new
            # FSAL: the last stage is f(t_new, y_new) unless post_step changes y
            K[0] = K[6]
            k1_valid = True
            if post_step is not None:
                y_post = post_step(t, y)
                if y_post is not y:
                    y = y_post
                    k1_valid = False
            stats["n_accepted"] += 1
            exc = None
            if check is not None:
                try:
                    check(t, y)
                except Exception as e:  # noqa: BLE001 - surfaced to caller
                    exc = e
            at_stop = hits_stop and t_grid is not None
            if (
                at_stop
                or (t_grid is None and (stats["n_accepted"] % cfg.record_stride == 0 or t >= t_end))
                or exc is not None
            ):
                times.append(t)
                states.append(y.copy())
            if exc is not None:
                return np.array(times), states, stats, exc
            if at_stop:
                next_stop = next(stop_iter, None)
            h = min(h_new, cfg.h_max_eff)
            if h < cfg.h_min and t < t_end:
                raise StepSizeUnderflow(t, h)
        else:
            h = h_step / min(1.0 / _FAC_MIN, fac11 / _SAFE)
            last_rejected = True
            stats["n_rejected"] += 1
            if h < cfg.h_min:
                raise StepSizeUnderflow(t, h)
    return np.array(times), states, stats, None


def _tri(k):
    return np.triu_indices(k)


def pack_swarm(swarm: SwarmState) -> NDArray:
    n, d, k = swarm.n, swarm.d, swarm.k
    iu = _tri(k)
    q = swarm.Q.transpose(0, 2, 1).reshape(n, d * d)
    r = swarm.R[:, iu[0], iu[1]]
    return np.concatenate([q, r], axis=1).ravel()


def unpack_swarm(y: NDArray, n: int, d: int, k: int) -> SwarmState:
    iu = _tri(k)
    block = y.reshape(n, d * d + len(iu[0]))
    Q = block[:, : d * d].reshape(n, d, d).transpose(0, 2, 1)
    R = np.zeros((n, k, k))
    R[:, iu[0], iu[1]] = block[:, d * d :]
    return SwarmState(Q, R)


def pack_consensus(state: ConsensusState) -> NDArray:
    n, d, k = state.Z.shape
    return state.Z.transpose(0, 2, 1).reshape(n, d * k).ravel()


def unpack_consensus(y: NDArray, n: int, d: int, k: int) -> ConsensusState:
    return ConsensusState(y.reshape(n, k, d).transpose(0, 2, 1))


def integrate_closed_loop(
    swarm0: SwarmState,
    g: DirectedWeightedGraph,
    cfg: IntegratorConfig,
    t_grid: NDArray | None = None,
) -> TrajectoryRecord:
    """Simulate the closed loop with post-step reprojection onto SO(d).

    A ``SingularR`` condition halts the run and is reported as an event rather
    than raised.  ``StepSizeUnderflow`` is raised.
    """
    swarm0.validate()
    if not is_quasi_strongly_connected(g):
        log.warning("interaction graph is not quasi-strongly connected")
    n, d, k = swarm0.n, swarm0.d, swarm0.k
    qsize = d * d
    stride = qsize + k * (k + 1) // 2
    thr = cfg.reproject_threshold

    field_ = ClosedLoopField(g, d, k)
    iu = _tri(k)

    def fun(t, y):
        block = y.reshape(n, stride)
        Q = block[:, :qsize].reshape(n, d, d).transpose(0, 2, 1)
        R = np.zeros((n, k, k))
        R[:, iu[0], iu[1]] = block[:, qsize:]
        dQ, dR = field_(Q, R)
        out = np.empty((n, stride))
        out[:, :qsize] = dQ.transpose(0, 2, 1).reshape(n, qsize)
        out[:, qsize:] = dR[:, iu[0], iu[1]]
        return out.ravel()

    def post_step(t, y):
        block = y.reshape(n, stride)
        out = None
        for i in range(n):
            Qi = block[i, :qsize].reshape(d, d).T
            if orthogonality_defect(Qi) > thr:
                if out is None:
                    out = y.copy()
                    ob = out.reshape(n, stride)
                ob[i, :qsize] = project_to_so(Qi).T.ravel()
        return y if out is None else out

    def check(t, y):
        check_r_invertible(unpack_swarm(y, n, d, k).R, t)

    times, states, stats, exc = dopri5(
        fun, pack_swarm(swarm0), cfg, t_grid, post_step, check, on_stage_error=SingularR
    )
    events = []
    if exc is not None:
        if not isinstance(exc, SingularR):
            raise exc
        events.append(Event(float(exc.time if exc.time is not None else times[-1]), "SingularR", exc.agent))
    return TrajectoryRecord(
        "closed_loop",
        times,
        [unpack_swarm(s, n, d, k) for s in states],
        g,
        events,
        halted=exc is not None,
        **stats,
    )


def integrate_consensus(
    Z0: ConsensusState,
    g: DirectedWeightedGraph,
    cfg: IntegratorConfig,
    t_grid: NDArray | None = None,
) -> TrajectoryRecord:
    n, d, k = Z0.Z.shape
    if g.n != n:
        raise ValueError(f"graph has {g.n} nodes but state has {n} agents")

    def fun(t, y):
        return pack_consensus(ConsensusState(consensus_derivative(unpack_consensus(y, n, d, k), g)))

    times, states, stats, exc = dopri5(fun, pack_consensus(Z0), cfg, t_grid)
    if exc is not None:
        raise exc
    return TrajectoryRecord(
        "consensus", times, [unpack_consensus(s, n, d, k) for s in states], g, **stats
    )


def swarm_from_consensus(Z0: ConsensusState, rng: np.random.Generator | None = None) -> SwarmState:
    """Per agent: ``(Q, R) = h(Z_i)`` with ``Q`` completed to a rotation."""
    if rng is None:
        rng = np.random.default_rng(0)
    Qs, Rs = [], []
    for i, Zi in enumerate(Z0.Z):
        try:
            Qk, R = map_h(Zi)
        except RankDeficient as exc:
            raise RankDeficient(f"Z_{i + 1}(0) is rank deficient") from exc
        Qs.append(complete_to_rotation(Qk, rng))
        Rs.append(R)
    return SwarmState(np.stack(Qs), np.stack(Rs))


@dataclass
class EquivalenceResult:
    closed_loop: TrajectoryRecord
    consensus: TrajectoryRecord
    times: NDArray
    deviation: NDArray
    budget: float

    @property
    def max_deviation(self) -> float:
        return float(self.deviation.max())


def equivalence_run(
    Z0: ConsensusState,
    g: DirectedWeightedGraph,
    cfg: IntegratorConfig,
    t_grid: NDArray | None = None,
    rng: np.random.Generator | None = None,
) -> EquivalenceResult:
    """Integrate the closed loop from ``h(Z0)`` and the consensus flow from ``Z0``.

    Both runs share ``t_grid`` (default: 201 equispaced points).  The deviation
    series is ``max_i ||Q_i[:, :k] R_i - Z_i||_F`` on that grid.
    """
    if t_grid is None:
        t_grid = np.linspace(0.0, cfg.t_final, 201)
    swarm0 = swarm_from_consensus(Z0, rng)
    cl = integrate_closed_loop(swarm0, g, cfg, t_grid)
    cs = integrate_consensus(Z0, g, cfg, t_grid)
    m = min(len(cl), len(cs))
    dev = np.array(
        [
            np.linalg.norm(cl.snapshots[s].Z() - cs.snapshots[s].Z, axis=(1, 2)).max()
            for s in range(m)
        ]
    )
    scale = max(1.0, float(np.linalg.norm(Z0.Z, axis=(1, 2)).max()))
    return EquivalenceResult(cl, cs, cl.times[:m], dev, 100.0 * cfg.rel_tol * scale)
