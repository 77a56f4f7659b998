"""Image + tabular-metadata fusion transformer built on a small numpy autograd."""
from .data import (
    Dataset,
    FieldSpec,
    MetadataSchema,
    Sample,
    SynthSpec,
    correlation_ranking,
    encode_metadata,
    generate_synthetic,
    load_dataset,
    select_metadata,
    stratified_split,
)
from .explain import RelevancyMap, relevancy_propagate
from .metrics import MetricsReport, compute_metrics
from .model import ModelConfig, VitAttParams, forward
from .project import separation_score, tsne_3d
from .tensor import Tensor, backward
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "FieldSpec",
    "MetadataSchema",
    "Sample",
    "SynthSpec",
    "correlation_ranking",
    "encode_metadata",
    "generate_synthetic",
    "load_dataset",
    "select_metadata",
    "stratified_split",
    "RelevancyMap",
    "relevancy_propagate",
    "MetricsReport",
    "compute_metrics",
    "ModelConfig",
    "VitAttParams",
    "forward",
    "separation_score",
    "tsne_3d",
    "Tensor",
    "backward",
    "TrainConfig",
    "evaluate",
    "train",
]
