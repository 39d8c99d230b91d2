"""Block-distributed dense arrays, collective backends, and statistical solvers."""

from .comm import (
    CollectiveContractError,
    CommError,
    CommInitError,
    Communicator,
    RankAbortedError,
    ReduceOp,
    init,
    launch,
    run_inproc,
)
from .distarray import (
    BroadcastError,
    DistArray,
    DistributionError,
    Partition,
    TransposedView,
    distribute,
    empty,
    fill,
    gather_full,
    map_broadcast,
    partition_of,
    rand_fill,
    reduce_all,
    reduce_dims,
    reduce_into,
    scan,
    transpose,
    zeros,
)
from .distlinalg import (
    SCENARIOS,
    ScenarioError,
    ShapeError,
    diag_fill,
    diag_get,
    dot,
    matmul,
    opnorm,
    pairwise_euclidean,
)
from .solvers import (
    ConvergenceMonitor,
    CoxState,
    DegenerateConfigError,
    MdsState,
    NmfState,
    NumericError,
    converged,
    cox_fit,
    cox_init,
    cox_partial_loglik,
    mds_fit,
    mds_init,
    mds_stress,
    nmf_apg,
    nmf_init,
    nmf_multiplicative,
    nmf_objective,
    pi_delta,
    soft_threshold,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
