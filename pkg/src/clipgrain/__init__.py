"""Data-parallel SGD with per-core gradient clipping, plus a canary memorization audit."""

__version__ = "0.1.0"

from ._accel import USE_NUMBA, backend
from .clipping import (
    ClippedGradientSet,
    ClippingPolicy,
    PerCoreGradient,
    adaptive_bound,
    apply_policy,
    clip_to_bound,
)
from .errors import (
    ClipGrainError,
    ConfigError,
    ContractError,
    DatasetFormatError,
    DimensionError,
    InvalidInputError,
    OracleFailureError,
    TrainingAbort,
)
from .memorization import (
    CanarySettings,
    ExposureReport,
    cer,
    edit_distance,
    exposure,
    exposures,
    generalization_gap,
    generate_canaries,
    run_secret_sharer,
    wer,
)
from .models import (
    Dataset,
    Example,
    Model,
    TeacherTask,
    batch_gradient,
    example_loss,
    example_score,
    init_params,
    load_dataset,
    save_dataset,
)
from .numerics import SeededRng, axpy, finite_diff_gradient, l2_norm
from .trainer import (
    CanarySchedule,
    StepRecord,
    TrainConfig,
    TrainTrajectory,
    sample_minibatch,
    shard,
    train,
    train_step,
)
