"""Protocol lab for collaborative training over split and federated
topologies, with client-side differential privacy and exact
communication accounting."""

from .costs import CostInputs, MethodCost, analytic_costs, compare_measured
from .data import Dataset, Shard, load_idx, partition_uniform, synthetic
from .models import (
    ArchitectureSpec,
    ModelStats,
    SplitModel,
    build_architecture,
    default_cut,
    init_params,
    load_checkpoint,
    model_stats,
    save_checkpoint,
    split_at,
)
from .nn import (
    GradientSet,
    LayerSpec,
    ParameterSet,
    layer_backward,
    layer_forward,
    sgd_update,
    softmax_cross_entropy,
)
from .privacy import (
    DpConfig,
    DpRng,
    clip_gradient,
    noisy_average,
    per_example_gradients,
    randomize_smashed,
    report_budget,
)
from .protocols import (
    ClientUpdateMsg,
    SmashedBatch,
    SmashedGradient,
    TrainConfig,
    coefficient_of_variation,
    evaluate,
    fedavg_aggregate,
    run_protocol,
)
from .runner import RunConfig, run
from .transport import TrafficCounter

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec",
    "ClientUpdateMsg",
    "CostInputs",
    "Dataset",
    "DpConfig",
    "DpRng",
    "GradientSet",
    "LayerSpec",
    "MethodCost",
    "ModelStats",
    "ParameterSet",
    "RunConfig",
    "Shard",
    "SmashedBatch",
    "SmashedGradient",
    "SplitModel",
    "TrafficCounter",
    "TrainConfig",
    "analytic_costs",
    "build_architecture",
    "clip_gradient",
    "coefficient_of_variation",
    "compare_measured",
    "default_cut",
    "evaluate",
    "fedavg_aggregate",
    "init_params",
    "layer_backward",
    "layer_forward",
    "load_checkpoint",
    "load_idx",
    "model_stats",
    "noisy_average",
    "partition_uniform",
    "per_example_gradients",
    "randomize_smashed",
    "report_budget",
    "run",
    "run_protocol",
    "save_checkpoint",
    "sgd_update",
    "softmax_cross_entropy",
    "split_at",
    "synthetic",
]
