"""Experiment configuration, initialization and orchestration with file output.

Random streams: ``SeedSequence(seed).spawn(n + 1)``; child ``i < n`` draws the
initial state of agent ``i + 1`` and child ``n`` draws the graph.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .consensus import ConsensusState, consensus_limit
from .controller import SwarmState
from .exceptions import ConfigError, GraphError, RankDeficient, SingularR, StepSizeUnderflow
from .graph import (
    DirectedWeightedGraph,
    chain_graph,
    complete_graph,
    is_quasi_strongly_connected,
    random_qsc_graph,
    observer_graph,
)
from .integrator import (
    IntegratorConfig,
    TrajectoryRecord,
    equivalence_run,
    integrate_closed_loop,
    integrate_consensus,
)
from .matops import qr_positive
from .metrics import DEFAULT_DWELL, DEFAULT_TOL, compute_report

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    "MODES",
    "INITS",
    "GENERATORS",
    "DEFAULT_SEED",
    "GraphSpec",
    "ExperimentConfig",
    "load_config",
    "load_graph_file",
    "agent_rngs",
    "init_gaussian_qr",
    "init_identity",
    "init_from_file",
    "build_graph",
    "run",
    "run_single",
    "read_trajectory_csv",
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_SINGULAR",
    "EXIT_INTEGRATOR",
]

log = logging.getLogger(__name__)

MODES = ("closed_loop", "consensus", "equivalence", "monte_carlo")
INITS = ("gaussian_qr", "identity", "from_file")
GENERATORS = ("observer", "complete", "chain", "random_qsc")
DEFAULT_SEED = 0

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SINGULAR = 3
EXIT_INTEGRATOR = 4

_FMT = "%.17g"


@dataclass
class GraphSpec:
    """Either a named generator or an explicit 1-based edge list."""

    generator: str | None = "observer"
    p: float = 0.5
    weight_range: tuple[float, float] = (0.0, 1.0)
    weight: float = 1.0
    edges: list | None = None

    def __post_init__(self):
        self.weight_range = tuple(float(x) for x in self.weight_range)
        if self.edges is not None:
            self.edges = [list(e) for e in self.edges]
            self.generator = None
        elif self.generator not in GENERATORS:
            raise ConfigError(f"unknown graph generator {self.generator!r}; choose from {GENERATORS}")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["weight_range"] = list(self.weight_range)
        return out


@dataclass
class ExperimentConfig:
    mode: str = "closed_loop"
    n: int = 5
    d: int = 3
    k: int = 2
    graph: GraphSpec = field(default_factory=GraphSpec)
    seed: int = DEFAULT_SEED
    num_seeds: int = 1
    init: str = "gaussian_qr"
    init_file: str | None = None
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    output_dir: str = "colsync_out"
    workers: int | None = None
    conv_tol: float = DEFAULT_TOL
    conv_dwell: float = DEFAULT_DWELL

    def __post_init__(self):
        if isinstance(self.graph, dict):
            self.graph = GraphSpec(**self.graph)
        if isinstance(self.integrator, dict):
            self.integrator = IntegratorConfig(**self.integrator)
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.init not in INITS:
            raise ConfigError(f"init must be one of {INITS}, got {self.init!r}")
        if self.init == "from_file" and not self.init_file:
            raise ConfigError("init = from_file requires init_file")
        if self.d < 2:
            raise ConfigError(f"need d >= 2, got {self.d}")
        if not 1 <= self.k <= self.d - 1:
            raise ConfigError(f"need 1 <= k <= d-1, got k={self.k}, d={self.d}")
        if self.n < 1:
            raise ConfigError(f"need n >= 1, got {self.n}")
        if self.num_seeds < 1:
            raise ConfigError("num_seeds must be positive")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be positive")
        self.integrator.validate()

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["graph"] = self.graph.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        try:
            if isinstance(data.get("graph"), str):
                data["graph"] = graph_spec_from_arg(data["graph"])
            elif isinstance(data.get("graph"), dict):
                data["graph"] = GraphSpec(**data["graph"])
            if isinstance(data.get("integrator"), dict):
                data["integrator"] = IntegratorConfig(**data["integrator"])
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    """Read a TOML config file (see README for the grammar)."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def load_graph_file(path: str | os.PathLike) -> GraphSpec:
    """Graph file: TOML with ``n`` (optional) and ``edges = [[i, j, a_ij], ...]``."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read graph file {path}: {exc}") from exc
    data = data.get("graph", data)
    if "edges" not in data:
        raise ConfigError(f"graph file {path} has no 'edges' list")
    return GraphSpec(edges=data["edges"])


def graph_spec_from_arg(arg: str) -> GraphSpec:
    if arg in GENERATORS:
        return GraphSpec(generator=arg)
    return load_graph_file(arg)


def agent_rngs(seed: int, n: int) -> tuple[list[np.random.Generator], np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(n + 1)
    return [np.random.default_rng(c) for c in children[:n]], np.random.default_rng(children[n])


def build_graph(spec: GraphSpec, n: int, rng: np.random.Generator) -> DirectedWeightedGraph:
    try:
        if spec.edges is not None:
            g = DirectedWeightedGraph.from_edges(n, spec.edges)
        elif spec.generator == "observer":
            g = observer_graph(rng, n)
        elif spec.generator == "complete":
            g = complete_graph(n, spec.weight)
        elif spec.generator == "chain":
            g = chain_graph(n, spec.weight)
        else:
            g = random_qsc_graph(n, rng, spec.p, spec.weight_range)
    except GraphError as exc:
        raise ConfigError(str(exc)) from exc
    return g


def _draw_agent(rng, d, k, max_retries=100):
    for _ in range(max_retries):
        try:
            Qf, _ = qr_positive(rng.standard_normal((d, d)))
            if np.linalg.det(Qf) < 0:
                Qf[:, -1] = -Qf[:, -1]
            _, R = qr_positive(rng.standard_normal((k, k)))
            return Qf, R
        except RankDeficient:
            continue
    raise RankDeficient("repeated rank-deficient Gaussian draws")


def init_gaussian_qr(seed: int, n: int, d: int, k: int) -> SwarmState:
    """Orthogonal/triangular factors of standard Gaussian matrices.

    The orthogonal factor of a d x d draw is moved into SO(d) by negating its
    last column (leaves the first k columns untouched); ``R_i`` is the
    triangular factor of a k x k draw.  Agent ``i`` uses random substream ``i``.
    """
    rngs, _ = agent_rngs(seed, n)
    pairs = [_draw_agent(r, d, k) for r in rngs]
    return SwarmState(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]))


def init_identity(n: int, d: int, k: int) -> SwarmState:
    return SwarmState(np.tile(np.eye(d), (n, 1, 1)), np.tile(np.eye(k), (n, 1, 1)))


# ---------------------------------------------------------------- CSV output


def trajectory_header(n: int, d: int, k: int) -> list[str]:
    cols = ["time"]
    for i in range(1, n + 1):
        cols += [f"Q{i}_r{r}_c{c}" for c in range(1, d + 1) for r in range(1, d + 1)]
        cols += [f"R{i}_r{r}_c{c}" for r in range(1, k + 1) for c in range(r, k + 1)]
    return cols


def consensus_header(n: int, d: int, k: int) -> list[str]:
    cols = ["time"]
    for i in range(1, n + 1):
        cols += [f"Z{i}_r{r}_c{c}" for c in range(1, k + 1) for r in range(1, d + 1)]
    return cols


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_FMT % x for x in row) + "\n")


def write_trajectory_csv(path: Path, traj: TrajectoryRecord) -> None:
    snap0 = traj.snapshots[0]
    if traj.kind == "closed_loop":
        n, d, k = snap0.n, snap0.d, snap0.k
        iu = np.triu_indices(k)
        header = trajectory_header(n, d, k)

        def flat(s):
            q = s.Q.transpose(0, 2, 1).reshape(n, d * d)
            return np.concatenate([q, s.R[:, iu[0], iu[1]]], axis=1).ravel()

    else:
        n, d, k = snap0.Z.shape
        header = consensus_header(n, d, k)

        def flat(s):
            return s.Z.transpose(0, 2, 1).reshape(-1)

    _write_csv(path, header, ([t, *flat(s)] for t, s in zip(traj.times, traj.snapshots)))


def read_trajectory_csv(path: str | os.PathLike):
    """Parse a closed-loop ``trajectory.csv`` into ``(times, [SwarmState, ...])``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(x) for x in r] for r in reader if r])
    n = len({h.split("_")[0][1:] for h in header[1:] if h.startswith("Q")})
    d = int(round(np.sqrt(sum(1 for h in header if h.startswith("Q1_")))))
    m_r = sum(1 for h in header if h.startswith("R1_"))
    k = int(round((np.sqrt(8 * m_r + 1) - 1) / 2))
    if trajectory_header(n, d, k) != header:
        raise ConfigError(f"{path} is not a closed-loop trajectory file")
    iu = np.triu_indices(k)
    stride = d * d + len(iu[0])
    states = []
    for row in rows:
        block = row[1:].reshape(n, stride)
        Q = block[:, : d * d].reshape(n, d, d).transpose(0, 2, 1)
        R = np.zeros((n, k, k))
        R[:, iu[0], iu[1]] = block[:, d * d :]
        states.append(SwarmState(Q, R))
    return rows[:, 0], states


def init_from_file(path: str, n: int, d: int, k: int) -> SwarmState:
    """Initial state = last row of a closed-loop ``trajectory.csv``."""
    try:
        _, states = read_trajectory_csv(path)
    except OSError as exc:
        raise ConfigError(f"cannot read init_file {path}: {exc}") from exc
    if not states:
        raise ConfigError(f"init_file {path} has no data rows")
    s = states[-1]
    if (s.n, s.d, s.k) != (n, d, k):
        raise ConfigError(
            f"init_file has (n, d, k) = {(s.n, s.d, s.k)}, config expects {(n, d, k)}"
        )
    return s


def metrics_rows(report):
    if report.kind == "consensus":
        return ["time", "z_diameter"], [[t, z] for t, z in zip(report.times, report.z_diameter)]
    n = report.q_error.shape[1]
    header = ["time"]
    for name in ("q_sync_error", "r_sync_error", "u_norm", "rdot_norm"):
        header += [f"{name}_{i}" for i in range(1, n + 1)]
    data = np.column_stack(
        [report.times, report.q_error, report.r_error, report.u_norm, report.rdot_norm]
    )
    return header, data


def write_metrics_csv(path: Path, report) -> None:
    header, rows = metrics_rows(report)
    _write_csv(path, header, rows)


# ---------------------------------------------------------------- runs


def _initial_swarm(cfg: ExperimentConfig) -> SwarmState:
    if cfg.init == "gaussian_qr":
        return init_gaussian_qr(cfg.seed, cfg.n, cfg.d, cfg.k)
    if cfg.init == "identity":
        return init_identity(cfg.n, cfg.d, cfg.k)
    return init_from_file(cfg.init_file, cfg.n, cfg.d, cfg.k)


def _events_json(traj):
    return [
        {"time": e.time, "kind": e.kind, "agent": None if e.agent is None else e.agent + 1}
        for e in traj.events
    ]


def run_single(cfg: ExperimentConfig, out: Path) -> tuple[int, dict]:
    """Execute one non-Monte-Carlo run, write its files, return (exit code, summary)."""
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    _, graph_rng = agent_rngs(cfg.seed, cfg.n)
    g = build_graph(cfg.graph, cfg.n, graph_rng)
    if not is_quasi_strongly_connected(g):
        log.warning("graph is not quasi-strongly connected")
    swarm0 = _initial_swarm(cfg)
    summary: dict = {
        "config": cfg.to_dict(),
        "graph_edges": g.to_edges(),
        "seed": cfg.seed,
    }
    code = EXIT_OK
    try:
        if cfg.mode == "consensus":
            traj = integrate_consensus(ConsensusState(swarm0.Z()), g, cfg.integrator)
            report = compute_report(traj)
            summary["final_errors"] = report.final_errors()
            summary["converged_at"] = None
        else:
            if cfg.mode == "equivalence":
                Z0 = ConsensusState(swarm0.Z())
                res = equivalence_run(Z0, g, cfg.integrator)
                traj = res.closed_loop
                _write_csv(
                    out / "deviation.csv", ["time", "deviation"], zip(res.times, res.deviation)
                )
                write_trajectory_csv(out / "consensus_trajectory.csv", res.consensus)
                summary["max_deviation"] = res.max_deviation
                summary["deviation_budget"] = res.budget
                try:
                    zbar = consensus_limit(Z0, g)
                    summary["limit_mismatch"] = float(
                        np.abs(traj.final.Z() - zbar).max()
                    )
                except GraphError:
                    summary["limit_mismatch"] = None
            else:
                traj = integrate_closed_loop(swarm0, g, cfg.integrator)
            report = compute_report(traj, cfg.conv_tol, cfg.conv_dwell)
            summary["final_errors"] = report.final_errors()
            summary["converged_at"] = report.converged_at
            if report.limit_Q_cols is not None:
                summary["limit_Q_cols"] = report.limit_Q_cols.tolist()
            if traj.halted:
                code = EXIT_SINGULAR
        write_trajectory_csv(out / "trajectory.csv", traj)
        write_metrics_csv(out / "metrics.csv", report)
        summary["events"] = _events_json(traj)
        summary["final_time"] = float(traj.times[-1])
        summary["steps"] = {"accepted": traj.n_accepted, "rejected": traj.n_rejected, "evals": traj.n_evals}
    except StepSizeUnderflow as exc:
        summary["error"] = str(exc)
        summary["events"] = [{"time": exc.time, "kind": "StepSizeUnderflow", "agent": None}]
        code = EXIT_INTEGRATOR
    except SingularR as exc:
        summary["error"] = str(exc)
        summary["events"] = [{"time": exc.time, "kind": "SingularR", "agent": None if exc.agent is None else exc.agent + 1}]
        code = EXIT_SINGULAR
    summary["exit_code"] = code
    summary["wall_clock_s"] = time.perf_counter() - t_start
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    return code, summary


def _mc_worker(args):
    cfg_dict, out = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    return run_single(cfg, Path(out))


def run_monte_carlo(cfg: ExperimentConfig, out: Path) -> tuple[int, dict]:
    """Closed-loop runs for seeds ``seed .. seed + num_seeds - 1``."""
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    seeds = [cfg.seed + s for s in range(cfg.num_seeds)]
    jobs = [
        (cfg.replace(mode="closed_loop", seed=s, num_seeds=1).to_dict(), str(out / f"seed_{s}"))
        for s in seeds
    ]
    workers = cfg.workers or os.cpu_count() or 1
    if workers == 1:
        results = [_mc_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_mc_worker, jobs))
    per_seed = []
    for s, (code, summ) in zip(seeds, results):
        per_seed.append(
            {
                "seed": s,
                "exit_code": code,
                "converged_at": summ.get("converged_at"),
                "final_q_sync_error": summ.get("final_errors", {}).get(f"q_sync_error_k{cfg.k}"),
            }
        )
    conv = [p for p in per_seed if p["converged_at"] is not None]
    times = [p["converged_at"] for p in conv]
    aggregate = {
        "config": cfg.to_dict(),
        "num_seeds": len(seeds),
        "num_converged": len(conv),
        "convergence_fraction": len(conv) / len(seeds),
        "converged_at": {
            "min": min(times) if times else None,
            "mean": float(np.mean(times)) if times else None,
            "max": max(times) if times else None,
        },
        "failed_seeds": [p["seed"] for p in per_seed if p["converged_at"] is None],
        "per_seed": per_seed,
        "wall_clock_s": time.perf_counter() - t_start,
    }
    with open(out / "aggregate.json", "w") as fh:
        json.dump(aggregate, fh, indent=2)
    codes = {p["exit_code"] for p in per_seed} - {EXIT_OK}
    return (max(codes) if codes else EXIT_OK), aggregate


def run(cfg: ExperimentConfig) -> int:
    """Execute ``cfg`` and return the process exit code."""
    out = Path(cfg.output_dir)
    try:
        if cfg.mode == "monte_carlo":
            code, _ = run_monte_carlo(cfg, out)
        else:
            code, _ = run_single(cfg, out)
    except (ConfigError, RankDeficient) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    return code
