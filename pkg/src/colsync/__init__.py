"""Dynamic controllers for synchronizing the first k columns of rotation matrices.

The closed loop is the positive-diagonal QR factorization of a linear
consensus flow; both systems are provided so they can check each other.
"""

from .consensus import (
    ConsensusState,
    consensus_derivative,
    consensus_exact,
    consensus_limit,
    hull_diameter,
)
from .controller import (
    AgentState,
    ClosedLoopField,
    ControlOutput,
    SwarmState,
    closed_loop_derivative,
    compute_R_dot,
    compute_U_full,
    compute_U_k,
    compute_V,
    relative_r,
    relative_rotation_cols,
)
from .exceptions import (
    ColsyncError,
    ConfigError,
    GraphError,
    RankDeficient,
    SingularR,
    StepSizeUnderflow,
)
from .experiment import ExperimentConfig, GraphSpec, init_gaussian_qr, run
from .graph import (
    DirectedWeightedGraph,
    chain_graph,
    complete_graph,
    is_quasi_strongly_connected,
    laplacian,
    left_null_vector,
    random_qsc_graph,
    observer_graph,
)
from .integrator import (
    EquivalenceResult,
    IntegratorConfig,
    TrajectoryRecord,
    equivalence_run,
    integrate_closed_loop,
    integrate_consensus,
)
from .matops import (
    complete_to_rotation,
    low,
    map_h,
    map_h_inv,
    project_to_so,
    qr_positive,
    up,
)
from .metrics import SyncReport, compute_report, detect_convergence

__version__ = "0.1.0"
