import json
import subprocess
import sys

import numpy as np
import pytest

from colsync.cli import main
from colsync.exceptions import ConfigError
from colsync.experiment import (
    EXIT_CONFIG,
    EXIT_SINGULAR,
    ExperimentConfig,
    GraphSpec,
    init_gaussian_qr,
    load_config,
    read_trajectory_csv,
)
from colsync.graph import DirectedWeightedGraph
from colsync.integrator import IntegratorConfig, TrajectoryRecord
from colsync.matops import orthogonality_defect
from colsync.metrics import compute_report


def test_init_gaussian_qr_deterministic_and_valid():
    a = init_gaussian_qr(7, 5, 3, 2)
    b = init_gaussian_qr(7, 5, 3, 2)
    assert np.array_equal(a.Q, b.Q) and np.array_equal(a.R, b.R)
    for Q, R in zip(a.Q, a.R):
        assert orthogonality_defect(Q) <= 1e-12
        assert abs(np.linalg.det(Q) - 1) <= 1e-12
        assert np.all(np.diag(R) > 0) and not np.any(np.tril(R, -1))
    c = init_gaussian_qr(8, 5, 3, 2)
    assert not np.array_equal(a.Q, c.Q)


def test_agent_substreams_independent_of_n():
    # agent i's draw depends on the seed and i, not on how many agents follow
    assert np.array_equal(init_gaussian_qr(3, 5, 3, 2).Q[:1], init_gaussian_qr(3, 5, 3, 2).Q[:1])


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(k=3, d=3)
    with pytest.raises(ConfigError):
        ExperimentConfig(d=1, k=1)
    with pytest.raises(ConfigError):
        ExperimentConfig(mode="nope")
    with pytest.raises(ConfigError):
        ExperimentConfig(init="from_file")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        GraphSpec(generator="star")


def test_config_file_and_round_trip(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(
        """
mode = "equivalence"
n = 4
d = 4
k = 3
seed = 11

[graph]
edges = [[1, 2, 0.5], [2, 3, 1.5], [3, 4, 0.25], [4, 1, 1.0]]

[integrator]
t_final = 4.0
rel_tol = 1e-7
"""
    )
    cfg = load_config(path)
    assert cfg.integrator.t_final == 4.0 and cfg.graph.edges[0] == [1, 2, 0.5]
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def _run(tmp_path, *args):
    return main(["--out", str(tmp_path), *args])


def test_closed_loop_outputs(tmp_path):
    assert _run(tmp_path, "--t-final", "3") == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["events"] == [] and summary["exit_code"] == 0
    assert ExperimentConfig.from_dict(summary["config"]) == ExperimentConfig(
        output_dir=str(tmp_path), integrator=IntegratorConfig(t_final=3.0)
    )
    lines = (tmp_path / "trajectory.csv").read_text().splitlines()
    header = lines[0].split(",")
    assert header[:3] == ["time", "Q1_r1_c1", "Q1_r2_c1"]
    assert len(header) == 1 + 5 * (9 + 3)
    # 17 significant digits survive a round trip exactly
    times, states = read_trajectory_csv(tmp_path / "trajectory.csv")
    assert times[0] == 0.0
    s0 = init_gaussian_qr(0, 5, 3, 2)
    assert np.array_equal(states[0].Q, s0.Q) and np.array_equal(states[0].R, s0.R)


def test_metrics_csv_rederivable(tmp_path):
    assert _run(tmp_path, "--t-final", "2") == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    g = DirectedWeightedGraph.from_edges(5, summary["graph_edges"])
    times, states = read_trajectory_csv(tmp_path / "trajectory.csv")
    rep = compute_report(TrajectoryRecord("closed_loop", times, states, g))
    data = np.loadtxt(tmp_path / "metrics.csv", delimiter=",", skiprows=1)
    ref = np.column_stack([rep.times, rep.q_error, rep.r_error, rep.u_norm, rep.rdot_norm])
    np.testing.assert_allclose(data, ref, rtol=0, atol=1e-12)


def test_consensus_mode(tmp_path):
    assert _run(tmp_path, "--mode", "consensus", "--t-final", "2") == 0
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header == "time,z_diameter"
    assert (tmp_path / "trajectory.csv").read_text().startswith("time,Z1_r1_c1")


def test_equivalence_mode(tmp_path):
    assert _run(tmp_path, "--mode", "equivalence", "--graph", "complete", "--t-final", "10") == 0
    dev = np.loadtxt(tmp_path / "deviation.csv", delimiter=",", skiprows=1)
    assert dev[:, 1].max() <= 1e-4
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["limit_mismatch"] <= 1e-6


def test_graph_file_flag(tmp_path):
    gfile = tmp_path / "g.toml"
    gfile.write_text("n = 3\nedges = [[1, 2, 1.0], [2, 3, 1.0], [3, 2, 0.5]]\n")
    out = tmp_path / "out"
    assert main(["--out", str(out), "--n", "3", "--graph", str(gfile), "--t-final", "1"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["graph_edges"] == [[1, 2, 1.0], [2, 3, 1.0], [3, 2, 0.5]]


def test_config_error_exit_code(tmp_path, capsys):
    assert _run(tmp_path, "--k", "3") == EXIT_CONFIG
    assert _run(tmp_path, "--graph", str(tmp_path / "missing.toml")) == EXIT_CONFIG
    assert _run(tmp_path, "--mode", "closed_loop", "--init", "from_file", "--init-file", str(tmp_path / "nope.csv")) == EXIT_CONFIG


def test_singular_exit_code(tmp_path):
    # agent 1 follows agent 2 whose first column is opposite -> Z_1 hits zero
    traj = tmp_path / "init.csv"
    traj.write_text(
        "time,Q1_r1_c1,Q1_r2_c1,Q1_r1_c2,Q1_r2_c2,R1_r1_c1,Q2_r1_c1,Q2_r2_c1,Q2_r1_c2,Q2_r2_c2,R2_r1_c1\n"
        "0,1,0,0,1,1,-1,0,0,-1,1\n"
    )
    gfile = tmp_path / "g.toml"
    gfile.write_text("edges = [[1, 2, 1.0]]\n")
    out = tmp_path / "out"
    code = main([
        "--out", str(out), "--n", "2", "--d", "2", "--k", "1", "--init", "from_file",
        "--init-file", str(traj), "--graph", str(gfile), "--t-final", "2",
    ])
    assert code == EXIT_SINGULAR
    summary = json.loads((out / "summary.json").read_text())
    assert summary["events"][0]["kind"] == "SingularR" and summary["events"][0]["agent"] == 1


def test_init_from_file_continues_run(tmp_path):
    first = tmp_path / "a"
    assert main(["--out", str(first), "--t-final", "1"]) == 0
    second = tmp_path / "b"
    assert main(["--out", str(second), "--t-final", "1", "--init", "from_file",
                 "--init-file", str(first / "trajectory.csv")]) == 0
    _, s1 = read_trajectory_csv(first / "trajectory.csv")
    _, s2 = read_trajectory_csv(second / "trajectory.csv")
    assert np.array_equal(s1[-1].Q, s2[0].Q)


def test_monte_carlo_seed_isolation(tmp_path):
    mc = tmp_path / "mc"
    assert main(["--out", str(mc), "--mode", "monte_carlo", "--seed", "3", "--num-seeds", "2",
                 "--k", "1", "--t-final", "2", "--workers", "2"]) == 0
    agg = json.loads((mc / "aggregate.json").read_text())
    assert agg["num_seeds"] == 2 and [p["seed"] for p in agg["per_seed"]] == [3, 4]
    for seed in (3, 4):
        single = tmp_path / f"single{seed}"
        assert main(["--out", str(single), "--seed", str(seed), "--k", "1", "--t-final", "2"]) == 0
        assert (single / "trajectory.csv").read_bytes() == (mc / f"seed_{seed}" / "trajectory.csv").read_bytes()
        assert (single / "metrics.csv").read_bytes() == (mc / f"seed_{seed}" / "metrics.csv").read_bytes()


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "colsync", "--out", str(tmp_path), "--t-final", "0.5"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "summary.json").exists()
