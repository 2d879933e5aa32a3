"""Point cloud upsampling from paired local and global inputs.

The package trains a small point network that consumes a sparse local
patch together with a sparse whole-shape segment, fuses both feature
streams, and decodes r upsampled points per input point. It also ships
the evaluation metrics, robustness/ablation protocols, and a spherical
saliency analysis of the trained models, all deterministic on CPU.
"""

from .config import ExperimentConfig, default_config, load_config, save_config
from .estimator import PointCloudUpsampler
from .exceptions import (
    ConfigError,
    DegenerateFit,
    InvalidArgument,
    InvalidModel,
    NumericalError,
    ParseError,
    TrainingDiverged,
)
from .geometry import PointCloud
from .network import build_variant, upsample_cloud
from .protocols import (
    cmd_ablate,
    cmd_evaluate,
    cmd_gen_data,
    cmd_noise,
    cmd_saliency,
    cmd_train,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateFit",
    "ExperimentConfig",
    "InvalidArgument",
    "InvalidModel",
    "NumericalError",
    "ParseError",
    "PointCloud",
    "PointCloudUpsampler",
    "TrainingDiverged",
    "__version__",
    "build_variant",
    "cmd_ablate",
    "cmd_evaluate",
    "cmd_gen_data",
    "cmd_noise",
    "cmd_saliency",
    "cmd_train",
    "default_config",
    "load_config",
    "save_config",
    "upsample_cloud",
]
