"""Multi-behavior recommendation with cascading residual graph convolution."""

__version__ = "0.1.0"

from .data import (
    EventLog,
    RawEvent,
    Schema,
    Split,
    build_event_log,
    dedup_earliest,
    make_cold_start_split,
    parse_events,
    split_leave_one_out,
)
from .estimator import CascadeRecommender
from .graph import BehaviorGraph, build_behavior_graph, build_graphs, build_interaction_matrix, propagate
from .metrics import MetricsReport, evaluate
from .model import CascadeConfig, EmbeddingTable, forward_cascade, init_embeddings
from .synth import FunnelParams, generate_synthetic
from .training import TrainConfig, fit

__all__ = [
    "__version__",
    "BehaviorGraph",
    "CascadeConfig",
    "CascadeRecommender",
    "EmbeddingTable",
    "EventLog",
    "FunnelParams",
    "MetricsReport",
    "RawEvent",
    "Schema",
    "Split",
    "TrainConfig",
    "build_behavior_graph",
    "build_event_log",
    "build_graphs",
    "build_interaction_matrix",
    "dedup_earliest",
    "evaluate",
    "fit",
    "forward_cascade",
    "generate_synthetic",
    "init_embeddings",
    "make_cold_start_split",
    "parse_events",
    "propagate",
    "split_leave_one_out",
]
