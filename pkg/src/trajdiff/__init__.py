"""Multi-agent trajectory forecasting with context-guided conditional diffusion.

The package trains a conditional denoising model over normalized relative
futures, guides it with per-hypothesis scene context, and reweights the
sampled hypotheses with a jointly trained energy model.
"""

from trajdiff.core import (
    CheckpointError,
    ConfigError,
    DataError,
    FutureWindow,
    NormalizationStats,
    NotFittedError,
    ObservationWindow,
    ParseError,
    PredictionSet,
    Scene,
    TrajdiffError,
    canonical_agent_order,
    denormalize,
    from_relative,
    normalize,
    to_relative,
)
from trajdiff.data import (
    SyntheticConfig,
    generate_synthetic_scenes,
    leave_one_out_split,
    parse_trajectory_file,
    window_scenes,
)
from trajdiff.denoiser import DiffusionSchedule, TrajectoryDenoiser
from trajdiff.encoder import ContextEncoder
from trajdiff.metrics import (
    MetricReport,
    collision_rate,
    jade,
    jfde,
    min_ade,
    min_fde,
)
from trajdiff.objectives import (
    LossWeights,
    diversity_loss,
    ebm_loss,
    regression_loss,
    total_loss,
)
from trajdiff.refinement import (
    EnergyNetwork,
    collision_energy_baseline,
    joint_energy,
    refine,
)
from trajdiff.training import RunConfig, TrajectoryForecaster, build_dataset

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ContextEncoder",
    "DataError",
    "DiffusionSchedule",
    "EnergyNetwork",
    "FutureWindow",
    "LossWeights",
    "MetricReport",
    "NormalizationStats",
    "NotFittedError",
    "ObservationWindow",
    "ParseError",
    "PredictionSet",
    "RunConfig",
    "Scene",
    "SyntheticConfig",
    "TrajdiffError",
    "TrajectoryDenoiser",
    "TrajectoryForecaster",
    "build_dataset",
    "canonical_agent_order",
    "collision_energy_baseline",
    "collision_rate",
    "denormalize",
    "diversity_loss",
    "ebm_loss",
    "from_relative",
    "generate_synthetic_scenes",
    "jade",
    "jfde",
    "joint_energy",
    "leave_one_out_split",
    "min_ade",
    "min_fde",
    "normalize",
    "parse_trajectory_file",
    "refine",
    "regression_loss",
    "to_relative",
    "total_loss",
    "window_scenes",
    "__version__",
]
