import numpy as np
import pytest

from colsync.consensus import ConsensusState, consensus_exact, consensus_limit, hull_diameter
from colsync.controller import SwarmState
from colsync.exceptions import ConfigError, StepSizeUnderflow
from colsync.graph import DirectedWeightedGraph, chain_graph, complete_graph, random_qsc_graph
from colsync.integrator import (
    IntegratorConfig,
    dopri5,
    equivalence_run,
    integrate_closed_loop,
    integrate_consensus,
    pack_consensus,
    pack_swarm,
    swarm_from_consensus,
    unpack_consensus,
    unpack_swarm,
)
from colsync.matops import orthogonality_defect

from conftest import random_swarm, synchronized_swarm


def test_config_validation():
    with pytest.raises(ConfigError):
        IntegratorConfig(t_final=0)
    with pytest.raises(ConfigError):
        IntegratorConfig(rel_tol=-1)
    with pytest.raises(ConfigError):
        IntegratorConfig(h_init=1.0, h_max=0.5)
    with pytest.raises(ConfigError):
        IntegratorConfig(h_min=1e-2, h_init=1e-3)
    with pytest.raises(ConfigError):
        IntegratorConfig(record_stride=0)
    assert IntegratorConfig(t_final=20).h_max_eff == 2.0


def test_dopri5_scalar_decay():
    cfg = IntegratorConfig(t_final=5.0, rel_tol=1e-10, abs_tol=1e-12)
    times, states, stats, exc = dopri5(lambda t, y: -y, np.array([1.0]), cfg)
    assert exc is None and times[-1] == 5.0
    assert abs(states[-1][0] - np.exp(-5.0)) <= 1e-10
    assert np.all(np.diff(times) > 0)


def test_dopri5_harmonic_oscillator_and_grid():
    cfg = IntegratorConfig(t_final=2 * np.pi, rel_tol=1e-9, abs_tol=1e-12)
    grid = np.linspace(0, 2 * np.pi, 9)
    times, states, _, _ = dopri5(lambda t, y: np.array([y[1], -y[0]]), np.array([1.0, 0.0]), cfg, t_grid=grid)
    np.testing.assert_array_equal(times, grid)
    ys = np.array(states)
    np.testing.assert_allclose(ys[:, 0], np.cos(grid), atol=1e-8)


def test_dopri5_step_underflow():
    cfg = IntegratorConfig(t_final=1.0, h_min=1e-4, h_init=1e-3)
    with pytest.raises(StepSizeUnderflow):
        dopri5(lambda t, y: 1.0 / (0.5 - t) ** 2 * np.ones(1), np.zeros(1), cfg)


def test_record_stride():
    cfg = IntegratorConfig(t_final=3.0, record_stride=4)
    times, _, stats, _ = dopri5(lambda t, y: -y, np.ones(2), cfg)
    assert times[0] == 0.0 and times[-1] == 3.0
    assert len(times) == stats["n_accepted"] // 4 + 1 + (stats["n_accepted"] % 4 != 0)


def test_pack_layout():
    Q = np.arange(9.0).reshape(1, 3, 3)
    R = np.array([[[1.0, 2.0], [0.0, 3.0]]])
    y = pack_swarm(SwarmState(Q, R))
    # Q column-major, then R upper triangle row-major
    np.testing.assert_array_equal(y, [0, 3, 6, 1, 4, 7, 2, 5, 8, 1, 2, 3])
    back = unpack_swarm(y, 1, 3, 2)
    np.testing.assert_array_equal(back.Q, Q)
    np.testing.assert_array_equal(back.R, R)
    Z = np.arange(12.0).reshape(2, 3, 2)
    np.testing.assert_array_equal(unpack_consensus(pack_consensus(ConsensusState(Z)), 2, 3, 2).Z, Z)


def test_synchronized_swarm_stays_put(rng):
    s = synchronized_swarm(rng, 5, 3, 2)
    tr = integrate_closed_loop(s, random_qsc_graph(5, rng), IntegratorConfig(t_final=5))
    for snap in tr.snapshots:
        assert np.abs(snap.Q - s.Q).max() <= 1e-10
        assert np.abs(snap.R - s.R).max() <= 1e-10


def test_closed_loop_converges_and_stays_on_manifold(rng):
    s = random_swarm(rng, 5, 3, 2)
    g = complete_graph(5)
    tr = integrate_closed_loop(s, g, IntegratorConfig(t_final=10))
    assert not tr.events
    err = [np.abs(x.Qk() - x.Qk()[0]).max() for x in tr.snapshots]
    assert err[-1] < 1e-6
    for snap in tr.snapshots:
        for Q, R in zip(snap.Q, snap.R):
            assert orthogonality_defect(Q) <= 1e-8
            assert abs(np.linalg.det(Q) - 1) <= 1e-8
            assert np.all(np.diag(R) > 0)
            assert not np.any(np.tril(R, -1))


def test_two_agent_circle_converges_from_random_starts():
    g = complete_graph(2)
    cfg = IntegratorConfig(t_final=15)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        s = random_swarm(rng, 2, 2, 1)
        tr = integrate_closed_loop(s, g, cfg)
        assert not tr.halted
        assert np.linalg.norm(tr.final.Qk()[0] - tr.final.Qk()[1]) < 1e-6, seed


def test_determinism(rng):
    s = random_swarm(rng, 5, 3, 1)
    g = random_qsc_graph(5, rng)
    a = integrate_closed_loop(s, g, IntegratorConfig(t_final=3))
    b = integrate_closed_loop(s, g, IntegratorConfig(t_final=3))
    np.testing.assert_array_equal(a.times, b.times)
    for x, y in zip(a.snapshots, b.snapshots):
        assert np.array_equal(x.Q, y.Q) and np.array_equal(x.R, y.R)


def test_singular_r_event_on_rank_loss():
    # Z_1(t) = (2 e^{-t} - 1) v vanishes at t = ln 2
    v = np.array([[1.0], [0.5]])
    s = swarm_from_consensus(ConsensusState(np.stack([v, -v])))
    tr = integrate_closed_loop(s, chain_graph(2), IntegratorConfig(t_final=2))
    assert tr.halted
    (ev,) = tr.events
    assert ev.kind == "SingularR" and ev.agent == 0
    assert abs(ev.time - np.log(2)) < 1e-6


def test_singular_r_event_on_column_collapse():
    A = np.array([[1.0, 0], [0, 1.0], [0, 0]])
    B = np.array([[1.0, 0], [0, -1.0], [0, 0]])
    s = swarm_from_consensus(ConsensusState(np.stack([A, B])))
    tr = integrate_closed_loop(s, chain_graph(2), IntegratorConfig(t_final=2))
    assert tr.halted and tr.events[0].agent == 0
    assert abs(tr.events[0].time - np.log(2)) < 1e-6


def test_consensus_integration(rng):
    g = random_qsc_graph(5, rng)
    Z0 = ConsensusState(rng.standard_normal((5, 3, 2)))
    tr = integrate_consensus(Z0, g, IntegratorConfig(t_final=5))
    assert np.abs(tr.final.Z - consensus_exact(Z0, g, 5.0).Z).max() <= 1e-5
    diam = [hull_diameter(s) for s in tr.snapshots]
    assert np.all(np.diff(diam) <= 1e-9)
    same = ConsensusState(np.tile(Z0.Z[0], (5, 1, 1)))
    tr = integrate_consensus(same, g, IntegratorConfig(t_final=5))
    assert np.abs(tr.final.Z - same.Z).max() <= 1e-14


def test_tolerance_refinement_reduces_error(rng):
    g = random_qsc_graph(5, rng)
    Z0 = ConsensusState(rng.standard_normal((5, 3, 2)))
    exact = consensus_exact(Z0, g, 5.0).Z
    errs = []
    for rtol in (1e-4, 1e-5, 1e-6, 1e-7):
        cfg = IntegratorConfig(t_final=5, rel_tol=rtol, abs_tol=rtol * 1e-3)
        errs.append(np.abs(integrate_consensus(Z0, g, cfg).final.Z - exact).max())
    assert all(b < a for a, b in zip(errs, errs[1:])), errs


def test_equivalence_synchronized(rng):
    A = rng.standard_normal((3, 2))
    res = equivalence_run(ConsensusState(np.tile(A, (5, 1, 1))), complete_graph(5), IntegratorConfig(t_final=5))
    assert res.max_deviation <= 1e-12


@pytest.mark.parametrize("k", [1, 2])
def test_equivalence_random(rng, k):
    g = complete_graph(5)
    Z0 = ConsensusState(rng.standard_normal((5, 3, k)))
    res = equivalence_run(Z0, g, IntegratorConfig(t_final=10))
    assert res.max_deviation <= 1e-4
    assert res.max_deviation <= res.budget
    np.testing.assert_array_equal(res.times, res.consensus.times)
    zbar = consensus_limit(Z0, g)
    assert np.abs(res.closed_loop.final.Z() - zbar).max() <= 1e-6


def test_equivalence_directed_graph(rng):
    g = random_qsc_graph(5, rng, p=0.4)
    Z0 = ConsensusState(rng.standard_normal((5, 4, 2)))
    res = equivalence_run(Z0, g, IntegratorConfig(t_final=10))
    assert res.max_deviation <= res.budget
