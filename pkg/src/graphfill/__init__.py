"""Graph-convolutional recommendation with similarity constraints and
variational completion for sparse interaction data."""

from .evaluation import MetricReport, evaluate, export_heatmap, ndcg_at_k, rank_items, recall_at_k, sparsity_report
from .ingest import (
    DatasetStats,
    InteractionSet,
    build_matrix,
    load_interactions,
    read_prepared,
    sparsity_groups,
    split,
    write_prepared,
)
from .numeric import ParamStore, Rng, adam_step, finite_diff_check
from .training import FitResult, ModelState, TrainConfig, ablate, fit, init_model

__version__ = "0.1.0"

__all__ = [
    "DatasetStats",
    "FitResult",
    "InteractionSet",
    "MetricReport",
    "ModelState",
    "ParamStore",
    "Rng",
    "TrainConfig",
    "ablate",
    "adam_step",
    "build_matrix",
    "evaluate",
    "export_heatmap",
    "finite_diff_check",
    "fit",
    "init_model",
    "load_interactions",
    "ndcg_at_k",
    "rank_items",
    "read_prepared",
    "recall_at_k",
    "sparsity_groups",
    "split",
    "sparsity_report",
    "write_prepared",
    "__version__",
]
