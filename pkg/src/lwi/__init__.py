"""Continual learning by pathway-aware model fusion.

Sequentially trained task models are aligned layer by layer (most-similar
channel matching in shallow layers, least-similar in deep layers) and fused,
so that different tasks end up on different channels of one network.
"""
from .align import FusionConfig, LayerPolicy, align_and_fuse
from .checkpoint import load_checkpoint, save_checkpoint
from .continual import (
    MetricsLog,
    RunConfig,
    activation_levels,
    eval_task_agnostic,
    eval_task_aware,
    forgetting,
    pathway_overlap,
    run_lwi,
)
from .data import Dataset, SyntheticSpec, TaskStream, gen_synthetic, load_csv, load_idx, split_classes
from .errors import ConfigError, FormatError, InvalidInputError
from .matching import MatchConfig, TransportPlan, adaptive_match, hungarian, sinkhorn
from .netcore import LayerWeights, Model, TrainConfig, forward, init_model

__all__ = [
    "ConfigError", "Dataset", "FormatError", "FusionConfig", "InvalidInputError", "LayerPolicy",
    "LayerWeights", "MatchConfig", "MetricsLog", "Model", "RunConfig", "SyntheticSpec", "TaskStream",
    "TrainConfig", "TransportPlan", "activation_levels", "adaptive_match", "align_and_fuse",
    "eval_task_agnostic", "eval_task_aware", "forgetting", "forward", "gen_synthetic", "hungarian",
    "init_model", "load_checkpoint", "load_csv", "load_idx", "pathway_overlap", "run_lwi",
    "save_checkpoint", "sinkhorn", "split_classes",
]
