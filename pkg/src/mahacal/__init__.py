"""Meta-learned diagonal-plus-low-rank Mahalanobis covariances for calibrated few-shot classification."""

from .config import ConfigError, RunConfig
from .linalg import LowRankCovariance, build_covariance
from .model import FewShotModel, LogitNormalPrediction
from .tensor import Tensor

__all__ = [
    "ConfigError",
    "FewShotModel",
    "LogitNormalPrediction",
    "LowRankCovariance",
    "RunConfig",
    "Tensor",
    "build_covariance",
]
__version__ = "0.1.0"
