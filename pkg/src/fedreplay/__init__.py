"""Deterministic federated continual-learning simulator with dynamic
exemplar-replay memory allocation."""

from .core import (
    ClassHistogram,
    Dataset,
    DivergenceError,
    FederationConfig,
    FedReplayError,
    LabeledSample,
    ModelParams,
    ShapeMismatchError,
    ValidationError,
    param_axpy,
    param_l2_norm,
)
from .mlp import MlpSpec, LossBreakdown, backward, forward, loss_ce, loss_kl, loss_mg
from .scenarios import (
    ClientPartition,
    TaskSpec,
    TaskStream,
    build_experiment_data,
    build_task_stream,
    dirichlet_partition,
    make_gaussian_dataset,
)
from .allocator import (
    ContributionIndices,
    MemoryPlan,
    build_memory_plan,
    class_memory_split,
    client_memory_split,
    data_contribution,
    model_contribution,
)
from .client import ClientState, SampleScore, local_train, refresh_cache, select_exemplars, update_info_model
from .server import GlobalState, fedavg_aggregate, run_experiment, run_round, task_boundary
from .report import (
    CostEstimate,
    ExperimentReport,
    emit_report,
    estimate_costs,
    evaluate,
    load_report,
    summarize,
)
from .cli import RunConfig, load_config

__version__ = "0.1.0"
