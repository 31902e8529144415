"""debiaslab: debiasing pipeline toolkit for artifact-biased binary image
classification (trap splits, artifact environments, robust training,
test-time censoring, bias sweeps)."""

__version__ = "0.1.0"

from .bias import (
    CorrelationReport,
    EnvironmentKey,
    EnvironmentPartition,
    TrapSplit,
    build_environments,
    build_trap_split,
    correlation_report,
    spearman_binary,
)
from .manifest import (
    ARTIFACT_NAMES,
    ArtifactVector,
    DatasetManifest,
    SampleRecord,
    load_manifest,
    save_manifest,
)
from .metrics import PredictionSet, roc_auc
from .noisecrop import BitMask, NoiseCropConfig, batch_noisecrop, convex_hull, fallback_segment, noisecrop
from .synthetic import SyntheticConfig, generate_synthetic, solve_contingency
from .training import GroupWeights, TrainConfig, TrainRun, grid_search, reference_grid, train

__all__ = [
    "ARTIFACT_NAMES",
    "ArtifactVector",
    "BitMask",
    "CorrelationReport",
    "DatasetManifest",
    "EnvironmentKey",
    "EnvironmentPartition",
    "GroupWeights",
    "NoiseCropConfig",
    "PredictionSet",
    "SampleRecord",
    "SyntheticConfig",
    "TrainConfig",
    "TrainRun",
    "TrapSplit",
    "batch_noisecrop",
    "build_environments",
    "build_trap_split",
    "convex_hull",
    "correlation_report",
    "fallback_segment",
    "generate_synthetic",
    "grid_search",
    "load_manifest",
    "noisecrop",
    "reference_grid",
    "roc_auc",
    "save_manifest",
    "solve_contingency",
    "spearman_binary",
    "train",
]
