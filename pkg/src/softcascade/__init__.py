"""Entropy-weighted ensemble fusion with confidence-gap routing and
selective arbitration."""

__version__ = "0.1.0"

from .errors import (
    BackendError,
    CascadeError,
    ConfigError,
    ContractViolationError,
    MissingSampleError,
    StructuralError,
    TrainingCollapseError,
)
from .fusion import (
    EnsemblePrediction,
    FusionConfig,
    ModelOpinion,
    RouterConfig,
    decide,
    fuse_opinions,
)
from .losses import LossBreakdown, LossConfig, total_loss
from .backends import BackendSet, SampleRef, fan_out, load_logit_store
from .arbiter import (
    ArbiterConfig,
    ArbitrationRequest,
    ArbitrationResult,
    CachingArbiter,
    DescriptorDB,
    LlmArbiter,
    MockArbiter,
)
from .datasets import DatasetManifest, dataset_stats, load_manifest, scan_image_folder
from .evaluation import (
    EvalRecord,
    MetricsReport,
    expected_latency,
    metrics,
    run_pipeline,
    sweep_trigger,
)
from .pipeline import ClassifyOutcome, classify_sample
from .training import TrainConfig, TrainReport, train

__all__ = [
    "__version__",
    "ArbiterConfig",
    "ArbitrationRequest",
    "ArbitrationResult",
    "BackendError",
    "BackendSet",
    "CachingArbiter",
    "CascadeError",
    "ClassifyOutcome",
    "ConfigError",
    "ContractViolationError",
    "DatasetManifest",
    "DescriptorDB",
    "EnsemblePrediction",
    "EvalRecord",
    "FusionConfig",
    "LlmArbiter",
    "LossBreakdown",
    "LossConfig",
    "MetricsReport",
    "MissingSampleError",
    "MockArbiter",
    "ModelOpinion",
    "RouterConfig",
    "SampleRef",
    "StructuralError",
    "TrainConfig",
    "TrainingCollapseError",
    "TrainReport",
    "classify_sample",
    "dataset_stats",
    "decide",
    "expected_latency",
    "fan_out",
    "fuse_opinions",
    "load_logit_store",
    "load_manifest",
    "metrics",
    "run_pipeline",
    "scan_image_folder",
    "sweep_trigger",
    "total_loss",
    "train",
]
