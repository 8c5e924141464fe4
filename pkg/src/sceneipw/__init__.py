"""Scene-level treatment effect estimation with image-derived confounders."""

__version__ = "0.1.0"

from .confounder import (
    ConfounderSpec,
    KernelFilter,
    convolve_valid,
    global_max_pool,
    neighborhood_indices,
    scene_confounders,
    standardize,
)
from .dgp import DGPConfig, SceneRecord, assign_treatment, generate_dataset, generate_outcome
from .errors import (
    CheckpointFormatError,
    ConfigError,
    DegenerateDataError,
    DivergenceError,
    ManifestFormatError,
    RasterFormatError,
    SceneIPWError,
)
from .estimators import (
    BalanceReport,
    balance_diagnostics,
    diff_in_means,
    ipw_hajek,
    ipw_ht,
)
from .evaluation import (
    EvalReport,
    GridSpec,
    MetricSummary,
    ReportRow,
    SkippedCell,
    metrics,
    run_grid,
    run_replicate,
)
from .propensity import (
    ConvLayerSpec,
    ConvNetSpec,
    ForwardTrace,
    PropensityModel,
    TrainConfig,
    TrainResult,
    build_model,
    forward,
    gradient_wrt_input,
    load_model,
    loss_and_gradient,
    predict_batch,
    save_model,
    trace_forward,
    train,
)
from .raster import Raster, SynthParams, downsample, load_raster, random_flip, save_raster, synth_scene
from .rng import derive_seeds, substream
from .salience import salience_map

__all__ = [
    "BalanceReport",
    "CheckpointFormatError",
    "ConfigError",
    "ConfounderSpec",
    "ConvLayerSpec",
    "ConvNetSpec",
    "DGPConfig",
    "DegenerateDataError",
    "DivergenceError",
    "EvalReport",
    "MetricSummary",
    "ReportRow",
    "SkippedCell",
    "ForwardTrace",
    "GridSpec",
    "KernelFilter",
    "ManifestFormatError",
    "PropensityModel",
    "Raster",
    "RasterFormatError",
    "SceneIPWError",
    "SceneRecord",
    "SynthParams",
    "TrainConfig",
    "TrainResult",
    "assign_treatment",
    "balance_diagnostics",
    "build_model",
    "convolve_valid",
    "derive_seeds",
    "diff_in_means",
    "downsample",
    "forward",
    "generate_dataset",
    "generate_outcome",
    "global_max_pool",
    "gradient_wrt_input",
    "ipw_hajek",
    "ipw_ht",
    "load_model",
    "load_raster",
    "loss_and_gradient",
    "metrics",
    "neighborhood_indices",
    "predict_batch",
    "random_flip",
    "run_grid",
    "run_replicate",
    "salience_map",
    "save_model",
    "save_raster",
    "scene_confounders",
    "standardize",
    "substream",
    "synth_scene",
    "trace_forward",
    "train",
]
