"""Federated-learning simulation with phase-synchronized aggregation.

The package provides exact flat-vector numerics, trainable objectives
with analytic gradients, dataset sharding, server aggregation strategies
(weighted averaging, phase-synchronized weighting, SCAFFOLD control
variates, FedProx), the federated round loop, and a numerical harness
that verifies the underlying convergence inequalities on controlled
quadratic instances.
"""

__version__ = "0.1.0"

from .aggregation import (
    ClientUpdate,
    DegenerateRoundError,
    KuramotoMode,
    ScaffoldState,
    SyncDiagnostics,
    compute_phases,
    fedavg_aggregate,
    fedprox_gradient_adjustment,
    kappa_schedule,
    kuramoto_aggregate,
    kuramoto_weights,
    mean_update,
    scaffold_server_step,
)
from .data import (
    LabeledDataset,
    ShardPartition,
    label_shard_partition,
    load_idx,
    partition_stats,
    synthesize_clusters,
)
from .engine import (
    AggregatorSpec,
    ClientProblem,
    ConfigError,
    DatasetSpec,
    FederatedConfig,
    ModelSpec,
    RoundRecord,
    cosine_lr,
    gradient_diversity,
    local_train,
    loss_variance,
    run_experiment,
    run_federated,
)
from .numeric import ZeroNormError, axpy, cosine_similarity, dot, l2norm
from .objectives import (
    NoiseModel,
    QuadraticObjective,
    SoftmaxClassifier,
    smoothness_constant,
    stochastic_gradient,
)
from .theory import (
    TheoryInstance,
    descent_inequality_check,
    drift_comparison,
    equality_case_instance,
    make_random_instance,
    variance_decomposition_check,
)
