"""Exception types shared across the package."""


class ColsyncError(Exception):
    """Base class for all package errors."""


class GraphError(ColsyncError, ValueError):
    """Malformed graph or a graph lacking a required connectivity property."""


class RankDeficient(ColsyncError, ValueError):
    """A matrix expected to have full column rank does not."""


class SingularR(ColsyncError):
    """An agent's triangular factor lost invertibility.

    Attributes
    ----------
    agent : int or None
        0-based index of the offending agent, if known.
    time : float or None
        Simulation time at which it was detected, when known.
    """

    def __init__(self, agent, time=None, detail=""):
        self.agent = agent
        self.time = time
        who = f"agent {agent + 1}" if agent is not None else "an agent"
        msg = f"R of {who} is singular"
        if time is not None:
            msg += f" at t={time:.6g}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class StepSizeUnderflow(ColsyncError):
    """The adaptive step size fell below the configured minimum."""

    def __init__(self, time, h):
        self.time = time
        self.h = h
        super().__init__(f"step size {h:.3e} below h_min at t={time:.6g}")


class ConfigError(ColsyncError, ValueError):
    """Invalid experiment configuration."""
