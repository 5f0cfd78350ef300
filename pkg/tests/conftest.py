import numpy as np
import pytest

from colsync.controller import SwarmState
from colsync.graph import random_qsc_graph
from colsync.matops import qr_positive


def random_rotation(rng, d):
    Q, _ = qr_positive(rng.standard_normal((d, d)))
    if np.linalg.det(Q) < 0:
        Q[:, -1] = -Q[:, -1]
    return Q


def random_upper_pos(rng, k):
    return qr_positive(rng.standard_normal((k, k)))[1]


def random_swarm(rng, n, d, k):
    Q = np.stack([random_rotation(rng, d) for _ in range(n)])
    R = np.stack([random_upper_pos(rng, k) for _ in range(n)])
    return SwarmState(Q, R)


def synchronized_swarm(rng, n, d, k):
    Q = random_rotation(rng, d)
    R = random_upper_pos(rng, k)
    return SwarmState(np.tile(Q, (n, 1, 1)), np.tile(R, (n, 1, 1)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def qsc_graph(rng):
    return random_qsc_graph(5, rng, p=0.4)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number, title, passed, detail=""):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}"
    if detail:
        line += f" ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
