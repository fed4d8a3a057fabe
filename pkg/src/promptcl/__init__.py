"""Desk-scale continual instruction tuning with dual-guided prompt routing.

A frozen toy multimodal decoder, per-task learnable prompt pools, frozen
image/text guidance encoders, cosine-scored prompt fusion (training) and
selection (inference), plus the standard continual-learning metric stack
and an experiment grid, all sized to run on a CPU in minutes.
"""

from .config import RunConfig
from .errors import PromptclError
from .evaluation import (
    AccuracyMatrix,
    MetricReport,
    compute_report,
    evaluate_task,
    metric_avg,
    metric_bwt,
    metric_last,
    metric_mean_acc,
    selection_histogram,
    similarity_heatmap,
)
from .backbone import BackboneModel, pretrain_backbone
from .guidance import GuidanceEncoders, score
from .prompts import PromptStore, PrototypeHead, project_prototype
from .selection import SelectionResult, assemble_prefix, select_eval, select_train
from .tasks import (
    TaskDataset,
    TaskSpec,
    generate_confusable_suite,
    generate_pretrain_mixture,
    generate_suite,
    joint_mixture,
    load_suite,
    save_suite,
)
from .training import lmm_loss, proto_loss, run_continual, train_task
from .experiments import RunResult, aggregate, complexity_benchmark, run_variant

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix",
    "BackboneModel",
    "GuidanceEncoders",
    "MetricReport",
    "PromptStore",
    "PromptclError",
    "PrototypeHead",
    "RunConfig",
    "RunResult",
    "SelectionResult",
    "TaskDataset",
    "TaskSpec",
    "aggregate",
    "assemble_prefix",
    "complexity_benchmark",
    "compute_report",
    "evaluate_task",
    "generate_confusable_suite",
    "generate_pretrain_mixture",
    "generate_suite",
    "joint_mixture",
    "lmm_loss",
    "load_suite",
    "metric_avg",
    "metric_bwt",
    "metric_last",
    "metric_mean_acc",
    "pretrain_backbone",
    "project_prototype",
    "proto_loss",
    "run_continual",
    "run_variant",
    "save_suite",
    "score",
    "select_eval",
    "select_train",
    "selection_histogram",
    "similarity_heatmap",
    "train_task",
]
